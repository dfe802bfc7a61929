//! Acceptance suite. Each test prints one PASS/FAIL line for its criterion;
//! run with `cargo test -p delnet-core --test acceptance -- --nocapture`.

mod common;

use std::sync::Arc;
use std::time::Instant;

use common::{conv2d_reference, correlated_pair, ms_ssim_literal};
use delnet_core::arch::{self, bind_params, ArchConfig, DelNet, EamBlock, ScaBlock, Variant};
use delnet_core::color::{ciede2000_lab, Lab, CIEDE2000_VERIFICATION_PAIRS};
use delnet_core::complexity::{count_model, count_params};
use delnet_core::data::{self, synth_pair, CfaPattern};
use delnet_core::loss::{loss_total, LossConfig};
use delnet_core::metrics;
use delnet_core::ops::{self, macs, ConvSpec};
use delnet_core::perceptual::IdentityExtractor;
use delnet_core::tape::Tape;
use delnet_core::tensor::Tensor;
use delnet_core::trainer::{train, OptimConfig, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn criterion(n: usize, name: &str, ok: bool, detail: &str) {
    println!("ACCEPTANCE {n} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

#[test]
fn criterion_01_complexity_calibration() {
    let start = Instant::now();
    let report = count_model(&ArchConfig::default(), 2976, 4000).unwrap();
    let elapsed = start.elapsed();
    let params = report.total_params as f64;
    let macs = report.total_mult_adds as f64;
    let param_ratio = params / 2.68e6;
    let mac_ratio = macs / 0.53e12;
    let ok = (param_ratio - 1.0).abs() <= 0.20 && (mac_ratio - 1.0).abs() <= 0.20 && elapsed.as_secs_f64() < 1.0;
    criterion(
        1,
        "complexity-calibration",
        ok,
        &format!(
            "params {:.4}e6 ({:+.1}% of 2.68e6), mult-adds {:.4}e12 ({:+.1}% of 0.53e12), {:.1} ms",
            params / 1e6,
            (param_ratio - 1.0) * 100.0,
            macs / 1e12,
            (mac_ratio - 1.0) * 100.0,
            elapsed.as_secs_f64() * 1e3
        ),
    );
}

fn random_small_config(rng: &mut ChaCha20Rng, variant: Variant) -> ArchConfig {
    let levels = rng.random_range(2..=3usize);
    let mut widths = Vec::with_capacity(levels);
    let mut w = rng.random_range(2..=4usize);
    for _ in 0..levels {
        widths.push(w);
        w += rng.random_range(2..=5usize);
    }
    let dilation_sets: [&[usize]; 3] = [&[1], &[1, 2], &[1, 2, 3]];
    ArchConfig {
        variant,
        stem_width: widths[0],
        eam_count: rng.random_range(1..=2),
        eam_dilations: dilation_sets[rng.random_range(0..3usize)].to_vec(),
        unet_levels: levels,
        unet_widths: widths,
        sca_per_level: rng.random_range(1..=2),
    }
}

#[test]
fn criterion_02_counter_soundness() {
    let mut rng = ChaCha20Rng::seed_from_u64(0xc0de);
    let mut checked = 0usize;
    for i in 0..12usize {
        let variant = Variant::ALL[i % 4];
        let config = random_small_config(&mut rng, variant);
        let analytic = count_model(&config, 16, 16).unwrap().total_mult_adds;

        let net = DelNet::new(config.clone()).unwrap();
        let params = net.init_params::<f32>(i as u64);
        let raw = synth_pair(i as u64, 16, 16).raw.data;
        let ((), measured) = macs::tally(|| {
            let mut tape = Tape::new();
            let binding = bind_params(&mut tape, &params, false);
            let rv = tape.leaf(raw.clone());
            net.forward(&mut tape, &binding, rv).unwrap();
        });
        assert_eq!(
            analytic, measured,
            "config {i} ({variant}): analytic {analytic} vs instrumented {measured}"
        );
        checked += 1;
    }
    criterion(
        2,
        "counter-soundness",
        checked >= 10,
        &format!("analytic == instrumented mult-adds on {checked} random configs at 16x16"),
    );
}

#[test]
fn criterion_03_gradient_suite() {
    let results = delnet_core::gradcheck::run_full_suite(7);
    let mut worst: f64 = 0.0;
    let mut all_ok = true;
    for r in &results {
        if !r.passed() {
            println!("  gradient check failed: {r}");
            all_ok = false;
        }
        worst = worst.max(r.max_err / r.tol);
    }
    criterion(
        3,
        "gradient-suite",
        all_ok,
        &format!("{} checks (ops + blocks + end-to-end), worst err/tol {:.3}", results.len(), worst),
    );
}

#[test]
fn criterion_04_convolution_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(0xc04);
    let mut max_delta = 0.0f64;
    let mut cases = 0usize;
    while cases < 100 {
        let (n, cin, cout) = (rng.random_range(1..=2usize), rng.random_range(1..=3usize), rng.random_range(1..=3usize));
        let (h, w) = (rng.random_range(1..=7usize), rng.random_range(1..=7usize));
        let k = if rng.random_bool(0.5) { 1 } else { 3 };
        let spec = ConvSpec {
            stride: rng.random_range(1..=2),
            padding: rng.random_range(0..=2),
            dilation: rng.random_range(1..=2),
        };
        if ops::conv_out_extent(h, k, spec).is_none() || ops::conv_out_extent(w, k, spec).is_none() {
            continue;
        }
        let mut fill = |shape: &[usize]| {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };
        let x = fill(&[n, cin, h, w]);
        let wt = fill(&[cout, cin, k, k]);
        let b = fill(&[cout]);
        let got = ops::conv2d(&x, &wt, &b, spec).unwrap();
        let want = conv2d_reference(&x, &wt, &b, spec);
        assert_eq!(got.shape(), want.shape());
        for (a, e) in got.data().iter().zip(want.data()) {
            max_delta = max_delta.max((a - e).abs());
        }
        cases += 1;
    }
    criterion(
        4,
        "convolution-oracle",
        max_delta < 1e-10,
        &format!("{cases} random shape/stride/dilation cases, max |delta| {max_delta:.2e}"),
    );
}

#[test]
fn criterion_05_residual_identity() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let mut ok = true;
    for trial in 0..4u64 {
        let width = 3 + trial as usize;
        let input = {
            let numel = width * 36;
            let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::new(vec![1, width, 6, 6], data).unwrap()
        };

        let sca = ScaBlock::new("sca", width);
        let mut params = sca.init_params::<f64>(trial);
        for name in params.names().cloned().collect::<Vec<_>>() {
            let shape = params.get(&name).unwrap().shape().to_vec();
            params.replace(&name, Tensor::zeros(&shape));
        }
        let mut tape = Tape::new();
        let binding = bind_params(&mut tape, &params, false);
        let x = tape.leaf(input.clone());
        let y = sca.apply(&mut tape, &binding, x).unwrap();
        ok &= tape.value(y).data() == input.data();

        let eam = EamBlock::new("eam", width, &[1, 2]);
        let mut params = eam.init_params::<f64>(trial);
        for name in params.names().cloned().collect::<Vec<_>>() {
            let shape = params.get(&name).unwrap().shape().to_vec();
            params.replace(&name, Tensor::zeros(&shape));
        }
        let mut tape = Tape::new();
        let binding = bind_params(&mut tape, &params, false);
        let x = tape.leaf(input.clone());
        let y = eam.apply(&mut tape, &binding, x).unwrap();
        ok &= tape.value(y).data() == input.data();
    }
    criterion(5, "residual-identity", ok, "zero-weight blocks reproduce their input exactly");
}

#[test]
fn criterion_06_metric_fidelity() {
    // CIEDE2000: the full published verification pair set to 1e-4.
    let mut de_max = 0.0f64;
    for &(l1, a1, b1, l2, a2, b2, expected) in CIEDE2000_VERIFICATION_PAIRS.iter() {
        let got = ciede2000_lab(Lab { l: l1, a: a1, b: b1 }, Lab { l: l2, a: a2, b: b2 });
        de_max = de_max.max((got - expected).abs());
    }

    // MS-SSIM against the independent literal implementation on 3 random
    // 256x256 pairs.
    let mut ms_max = 0.0f64;
    for seed in 1..=3u64 {
        let (gt, pred) = correlated_pair(seed, 256, 0.15);
        let fast = metrics::ms_ssim(&gt, &pred).unwrap();
        let literal = ms_ssim_literal(&gt, &pred);
        ms_max = ms_max.max((fast - literal).abs());
    }

    // PSNR analytic cases.
    let zeros = Tensor::<f64>::zeros(&[1, 3, 8, 8]);
    let ones = Tensor::<f64>::full(&[1, 3, 8, 8], 1.0);
    let half = Tensor::<f64>::full(&[1, 3, 8, 8], 0.5);
    let cap_err = (metrics::psnr(&zeros, &zeros).unwrap() - 100.0).abs();
    let zero_err = metrics::psnr(&zeros, &ones).unwrap().abs();
    let offset_err = (metrics::psnr(&zeros, &half).unwrap() - 10.0 * 4.0f64.log10()).abs();
    let psnr_max = cap_err.max(zero_err).max(offset_err);

    let ok = de_max < 1e-4 && ms_max < 1e-6 && psnr_max < 1e-9;
    criterion(
        6,
        "metric-fidelity",
        ok,
        &format!(
            "ciede2000 max |delta| {de_max:.2e} over {} pairs; ms-ssim vs literal max |delta| {ms_max:.2e}; psnr max |delta| {psnr_max:.2e}",
            CIEDE2000_VERIFICATION_PAIRS.len()
        ),
    );
}

#[test]
fn criterion_07_loss_contract() {
    // Identical pair with the default extractor.
    let default_config = LossConfig::<f64>::with_seed(0);
    let gt = synth_pair(2, 16, 16).target.cast::<f64>();
    let mut tape = Tape::new();
    let g = tape.leaf(gt.clone());
    let p = tape.leaf(gt);
    let (_, bd_same) = loss_total(&mut tape, g, p, &default_config).unwrap();
    let identical_ok = bd_same.total.abs() < 1e-12;

    // Hand computation on a constant 4x4 pair (identity extractor makes the
    // perceptual term plain MSE). All windows of constant images are
    // constant, so every term is exactly evaluable by hand:
    //   l1   = |0.8-0.5| + |ln 0.8 - ln 0.5|
    //   ssim = 1 - (2*0.8*0.5 + C1)/(0.8^2 + 0.5^2 + C1)   (cs term is 1)
    //   perc = (0.8-0.5)^2
    let config = LossConfig::<f64>::with_seed(0).with_extractor(Arc::new(IdentityExtractor));
    let mut tape = Tape::new();
    let g = tape.leaf(Tensor::full(&[1, 3, 4, 4], 0.8));
    let p = tape.leaf(Tensor::full(&[1, 3, 4, 4], 0.5));
    let (_, bd) = loss_total(&mut tape, g, p, &config).unwrap();

    let l1_hand = 0.3 + (0.8f64.ln() - 0.5f64.ln());
    let lum = (2.0 * 0.8 * 0.5 + metrics::SSIM_C1) / (0.8 * 0.8 + 0.5 * 0.5 + metrics::SSIM_C1);
    let ssim_hand = 1.0 - lum;
    let perc_hand = 0.3 * 0.3;
    let total_hand = 0.85 * l1_hand + 0.15 * ssim_hand + 1.0 * perc_hand;
    let err = (bd.total - total_hand)
        .abs()
        .max((bd.l1 - l1_hand).abs())
        .max((bd.ms_ssim - ssim_hand).abs())
        .max((bd.perceptual - perc_hand).abs());

    let ok = identical_ok && err < 1e-9;
    criterion(
        7,
        "loss-contract",
        ok,
        &format!(
            "identical-pair total {:.2e}; 4x4 hand-computed max |delta| {err:.2e} (total {total_hand:.9})",
            bd_same.total
        ),
    );
}

#[test]
fn criterion_08_overfit_sanity() {
    let arch_config = ArchConfig::default();
    let loss_config = LossConfig::<f32>::with_seed(0);
    let pairs: Vec<_> = (0..8).map(|i| synth_pair(i, 64, 64)).collect();
    let opts = TrainOptions {
        steps: 200,
        batch_size: 2,
        seed: 0,
        optim: OptimConfig::default(), // lr 1e-4, betas 0.9/0.999
        augment: true,
        checkpoint_every: None,
        out_dir: None,
    };
    let start = Instant::now();
    let outcome = train(&arch_config, &loss_config, &pairs, &opts).unwrap();
    let elapsed = start.elapsed();

    let initial = outcome.curve.first().unwrap().total;
    let final_loss = outcome.curve.last().unwrap().total;
    let finite = outcome.curve.iter().all(|b| b.total.is_finite());

    // Determinism: a shorter rerun must reproduce the curve prefix exactly.
    let rerun = train(&arch_config, &loss_config, &pairs, &TrainOptions { steps: 3, ..opts.clone() }).unwrap();
    let deterministic = rerun
        .curve
        .iter()
        .zip(outcome.curve.iter())
        .all(|(a, b)| a.total == b.total);

    let ok = finite && deterministic && final_loss <= 0.5 * initial;
    criterion(
        8,
        "overfit-sanity",
        ok,
        &format!(
            "200 steps on 8 synthetic 64x64 pairs: loss {initial:.4} -> {final_loss:.4} (ratio {:.3}), deterministic {deterministic}, {:.1} s",
            final_loss / initial,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_09_ablation_structure() {
    let base = ArchConfig::default();
    let mut params_by_variant = Vec::new();
    let mut all_ok = true;
    for variant in Variant::ALL {
        let config = base.clone().with_variant(variant);
        let counted = count_params(&config).unwrap();
        let init = arch::init_params::<f32>(&config, 0).unwrap();
        all_ok &= counted == init.total_scalars();

        let raw = synth_pair(0, 64, 64).raw.data;
        let out = arch::forward_tensor(&config, &init, &raw).unwrap();
        all_ok &= out.shape() == [1, 3, 64, 64];
        params_by_variant.push((variant, counted));
    }
    let get = |v: Variant| params_by_variant.iter().find(|(x, _)| *x == v).unwrap().1;
    let (unet, sca, eam, full) = (get(Variant::UNet), get(Variant::UNetSca), get(Variant::UNetEam), get(Variant::DelNet));
    let monotone = unet < sca && sca <= full && unet < eam && eam <= full;
    criterion(
        9,
        "ablation-structure",
        all_ok && monotone,
        &format!("params: unet {unet} < unet+sca {sca} <= delnet {full}; unet {unet} < unet+eam {eam} <= delnet {full}; all forwards 64x64 ok"),
    );
}

#[test]
fn criterion_10_data_invariants() {
    // Flip involution with correct CFA phase update.
    let pair = synth_pair(13, 12, 16);
    let mut flips_ok = true;
    for (h, v) in [(true, false), (false, true), (true, true)] {
        let f = data::augment_flip(&pair, h, v);
        let back = data::augment_flip(&f, h, v);
        flips_ok &= back.raw.data.data() == pair.raw.data.data();
        flips_ok &= back.target.data() == pair.target.data();
        flips_ok &= back.raw.cfa_pattern == pair.raw.cfa_pattern;
    }
    let hflip = data::augment_flip(&pair, true, false);
    flips_ok &= hflip.raw.cfa_pattern == CfaPattern::Grbg;
    let (_, w) = pair.raw.extents();
    flips_ok &= hflip.raw.data.at4(0, 0, 0, 0) == pair.raw.data.at4(0, 0, 0, w - 1);

    // Demosaic commutes with phase-aware flips.
    for (h, v) in [(true, false), (false, true), (true, true)] {
        let flipped = data::augment_flip(&pair, h, v);
        let ref_a = data::augment_flip(
            &data::TrainPair {
                raw: pair.raw.clone(),
                target: data::demosaic_bilinear(&pair.raw),
                id: pair.id.clone(),
            },
            h,
            v,
        );
        let demo_b = data::demosaic_bilinear(&flipped.raw);
        flips_ok &= ref_a.target.data() == demo_b.data();
    }

    // 8-bit round trips are lossless and loaded values stay in [0,1].
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.png");
    let p2 = dir.path().join("b.png");
    data::write_image(&pair.target, &p1).unwrap();
    let loaded = data::load_rgb(&p1).unwrap();
    data::write_image(&loaded, &p2).unwrap();
    let lossless = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();
    let in_range = loaded.min_value() >= 0.0 && loaded.max_value() <= 1.0;

    let ok = flips_ok && lossless && in_range;
    criterion(
        10,
        "data-invariants",
        ok,
        &format!("flip involution + phase {flips_ok}, 8-bit round trip lossless {lossless}, range ok {in_range}"),
    );
}
