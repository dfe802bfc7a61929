//! Central finite-difference verification of every backward rule.
//!
//! Checks run in wide (f64) precision with step 1e-5. An analytic gradient
//! entry `a` and its central-difference estimate `n` agree when
//! `|a - n| / max(|a|, |n|, 0.01)` stays below the tolerance; the floor keeps
//! near-zero entries from blowing up the ratio while remaining far stricter
//! than the finite-difference noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::arch::{self, ArchConfig, Binding, EamBlock, ScaBlock, Variant};
use crate::error::Result;
use crate::loss::{loss_total, LossConfig};
use crate::ops::{ChannelPoolMode, ConvSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Tolerance for individual operations.
pub const OP_TOL: f64 = 1e-4;

/// Tolerance for the end-to-end loss gradient.
pub const END_TO_END_TOL: f64 = 1e-3;

/// Result of one gradient check.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_err.is_finite() && self.max_err < self.tol
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} max rel err {:.3e} (tol {:.0e})",
            if self.passed() { "ok  " } else { "FAIL" },
            self.name,
            self.max_err,
            self.tol
        )
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

/// Compare analytic gradients of a scalar-valued graph against central
/// finite differences over every element of every input.
pub fn check_scalar_fn<F>(name: &str, inputs: &[Tensor<f64>], tol: f64, build: F) -> CheckOutcome
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let root = build(&mut tape, &vars).expect("gradcheck graph must build");
    tape.backward(root).expect("gradcheck backward");
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();

    let eval = |modified: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = modified.iter().map(|t| tape.leaf(t.clone().detached())).collect();
        let root = build(&mut tape, &vars).expect("gradcheck graph must build");
        tape.value(root).item()
    };

    let mut max_err = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(analytic[i].data()[j], fd));
        }
    }
    CheckOutcome {
        name: name.to_string(),
        max_err,
        tol,
    }
}

fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Uniform values with |v| in [0.1, 1): keeps inputs away from the kinks of
/// prelu/abs/clamp so finite differences stay two-sided.
fn rand_signed_off_zero(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Separate channel values per pixel so the max-pool argmax cannot flip
/// under the finite-difference step.
fn rand_tiebreak_free(rng: &mut ChaCha20Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut t = rand_tensor(rng, &[n, c, h, w], -1.0, 1.0);
    let hw = h * w;
    let data = t.data_mut();
    for ni in 0..n {
        for k in 0..hw {
            for ci in 0..c {
                data[(ni * c + ci) * hw + k] += 0.05 * ci as f64;
            }
        }
    }
    t
}

/// Probe-weighted mean: turns any tensor output into a scalar with
/// non-uniform output sensitivities.
fn probed(tape: &mut Tape<f64>, out: Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = tape.constant(probe.clone());
    let weighted = tape.mul(out, p)?;
    Ok(tape.mean_all(weighted))
}

/// Finite-difference checks for every tape operation.
pub fn run_op_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    {
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.7, 0.7);
        let b = rand_tensor(&mut rng, &[3], -0.3, 0.3);
        let probe = rand_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
        out.push(check_scalar_fn("conv2d same", &[x, w, b], OP_TOL, |tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], ConvSpec::same(3, 1))?;
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_tensor(&mut rng, &[1, 2, 7, 7], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 2, 3, 3], -0.7, 0.7);
        let b = rand_tensor(&mut rng, &[2], -0.3, 0.3);
        let spec = ConvSpec { stride: 2, padding: 2, dilation: 2 };
        let probe = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        out.push(check_scalar_fn("conv2d stride2 dilation2", &[x, w, b], OP_TOL, move |tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], spec)?;
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_signed_off_zero(&mut rng, &[1, 3, 4, 4]);
        let s = rand_tensor(&mut rng, &[3], 0.05, 0.6);
        let probe = rand_tensor(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
        out.push(check_scalar_fn("prelu per-channel", &[x, s], OP_TOL, |tape, v| {
            let y = tape.prelu(v[0], v[1])?;
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_signed_off_zero(&mut rng, &[1, 2, 3, 3]);
        let s = rand_tensor(&mut rng, &[1], 0.05, 0.6);
        let probe = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        out.push(check_scalar_fn("prelu shared", &[x, s], OP_TOL, |tape, v| {
            let y = tape.prelu(v[0], v[1])?;
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4], -3.0, 3.0);
        let probe = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        out.push(check_scalar_fn("sigmoid", &[x], OP_TOL, |tape, v| {
            let y = tape.sigmoid(v[0]);
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let probe = rand_tensor(&mut rng, &[2, 3, 1, 1], -1.0, 1.0);
        out.push(check_scalar_fn("global_avg_pool", &[x], OP_TOL, |tape, v| {
            let y = tape.global_avg_pool(v[0])?;
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_tensor(&mut rng, &[1, 4, 3, 3], -1.0, 1.0);
        let probe = rand_tensor(&mut rng, &[1, 1, 3, 3], -1.0, 1.0);
        out.push(check_scalar_fn("channel_pool mean", &[x], OP_TOL, |tape, v| {
            let y = tape.channel_pool(v[0], ChannelPoolMode::Mean)?;
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_tiebreak_free(&mut rng, 1, 4, 3, 3);
        let probe = rand_tensor(&mut rng, &[1, 1, 3, 3], -1.0, 1.0);
        out.push(check_scalar_fn("channel_pool max", &[x], OP_TOL, |tape, v| {
            let y = tape.channel_pool(v[0], ChannelPoolMode::Max)?;
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_tensor(&mut rng, &[1, 2, 4, 6], -1.0, 1.0);
        let probe = rand_tensor(&mut rng, &[1, 2, 2, 3], -1.0, 1.0);
        out.push(check_scalar_fn("avg_pool2", &[x], OP_TOL, |tape, v| {
            let y = tape.avg_pool2(v[0])?;
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let probe = rand_tensor(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
        out.push(check_scalar_fn("upsample_nearest2", &[x], OP_TOL, |tape, v| {
            let y = tape.upsample_nearest2(v[0])?;
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.7, 0.7);
        let b = rand_tensor(&mut rng, &[3], -0.3, 0.3);
        let probe = rand_tensor(&mut rng, &[1, 3, 2, 2], -1.0, 1.0);
        out.push(check_scalar_fn("downsample", &[x, w, b], OP_TOL, |tape, v| {
            let y = tape.downsample(v[0], v[1], v[2])?;
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_tensor(&mut rng, &[1, 3, 2, 2], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 3, 3, 3], -0.7, 0.7);
        let b = rand_tensor(&mut rng, &[2], -0.3, 0.3);
        let probe = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        out.push(check_scalar_fn("upsample", &[x, w, b], OP_TOL, |tape, v| {
            let y = tape.upsample(v[0], v[1], v[2])?;
            probed(tape, y, &probe)
        }));
    }
    {
        let a = rand_tensor(&mut rng, &[2, 8], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 8], -1.0, 1.0);
        let probe = rand_tensor(&mut rng, &[2, 8], -1.0, 1.0);
        for (name, f) in [
            ("add", 0usize),
            ("sub", 1),
            ("mul", 2),
        ] {
            let probe = probe.clone();
            out.push(check_scalar_fn(name, &[a.clone(), b.clone()], OP_TOL, move |tape, v| {
                let y = match f {
                    0 => tape.add(v[0], v[1])?,
                    1 => tape.sub(v[0], v[1])?,
                    _ => tape.mul(v[0], v[1])?,
                };
                probed(tape, y, &probe)
            }));
        }
        let den = rand_tensor(&mut rng, &[2, 8], 0.5, 1.5);
        out.push(check_scalar_fn("div", &[a, den], OP_TOL, move |tape, v| {
            let y = tape.div(v[0], v[1])?;
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_tensor(&mut rng, &[1, 3, 3, 3], -1.0, 1.0);
        let m = rand_tensor(&mut rng, &[1, 3, 1, 1], -1.0, 1.0);
        let probe = rand_tensor(&mut rng, &[1, 3, 3, 3], -1.0, 1.0);
        out.push(check_scalar_fn("scale_channels", &[x, m], OP_TOL, |tape, v| {
            let y = tape.scale_channels(v[0], v[1])?;
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_tensor(&mut rng, &[1, 3, 3, 3], -1.0, 1.0);
        let m = rand_tensor(&mut rng, &[1, 1, 3, 3], -1.0, 1.0);
        let probe = rand_tensor(&mut rng, &[1, 3, 3, 3], -1.0, 1.0);
        out.push(check_scalar_fn("scale_spatial", &[x, m], OP_TOL, |tape, v| {
            let y = tape.scale_spatial(v[0], v[1])?;
            probed(tape, y, &probe)
        }));
    }
    {
        let a = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[1, 1, 3, 3], -1.0, 1.0);
        let c = rand_tensor(&mut rng, &[1, 3, 3, 3], -1.0, 1.0);
        let probe = rand_tensor(&mut rng, &[1, 6, 3, 3], -1.0, 1.0);
        out.push(check_scalar_fn("concat_channels", &[a, b, c], OP_TOL, |tape, v| {
            let y = tape.concat_channels(v)?;
            probed(tape, y, &probe)
        }));
    }
    {
        // Keep samples away from the clamp boundaries.
        let mut x = rand_tensor(&mut rng, &[3, 5], -0.5, 1.5);
        for v in x.data_mut() {
            if (*v).abs() < 5e-3 {
                *v += 0.01;
            }
            if (*v - 1.0).abs() < 5e-3 {
                *v += 0.01;
            }
        }
        let probe = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
        out.push(check_scalar_fn("clamp", &[x], OP_TOL, |tape, v| {
            let y = tape.clamp(v[0], 0.0, 1.0);
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_signed_off_zero(&mut rng, &[4, 4]);
        let probe = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        out.push(check_scalar_fn("abs", &[x], OP_TOL, |tape, v| {
            let y = tape.abs(v[0]);
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_tensor(&mut rng, &[4, 4], 0.2, 2.0);
        let probe = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        out.push(check_scalar_fn("ln", &[x], OP_TOL, |tape, v| {
            let y = tape.ln(v[0])?;
            probed(tape, y, &probe)
        }));
    }
    {
        // Values away from the 0.3 threshold.
        let mut x = rand_tensor(&mut rng, &[4, 4], 0.0, 1.0);
        for v in x.data_mut() {
            if (*v - 0.3).abs() < 5e-3 {
                *v += 0.01;
            }
        }
        let probe = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        out.push(check_scalar_fn("max_scalar", &[x], OP_TOL, |tape, v| {
            let y = tape.max_scalar(v[0], 0.3);
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let probe = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let probe2 = probe.clone();
        out.push(check_scalar_fn("add_scalar", &[x.clone()], OP_TOL, move |tape, v| {
            let y = tape.add_scalar(v[0], 0.37);
            probed(tape, y, &probe)
        }));
        out.push(check_scalar_fn("mul_scalar", &[x], OP_TOL, move |tape, v| {
            let y = tape.mul_scalar(v[0], -1.7);
            probed(tape, y, &probe2)
        }));
    }
    {
        let x = rand_tensor(&mut rng, &[4, 4], 0.2, 2.0);
        let probe = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        out.push(check_scalar_fn("powf_scalar", &[x], OP_TOL, |tape, v| {
            let y = tape.powf_scalar(v[0], 0.7);
            probed(tape, y, &probe)
        }));
    }
    {
        let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        out.push(check_scalar_fn("mean_all", &[x.clone()], OP_TOL, |tape, v| Ok(tape.mean_all(v[0]))));
        out.push(check_scalar_fn("sum_all", &[x], OP_TOL, |tape, v| Ok(tape.sum_all(v[0]))));
    }

    out
}

fn block_inputs(
    rng: &mut ChaCha20Rng,
    specs: &[arch::ParamSpec],
    init: &arch::ModelParams<f64>,
    feature_shape: &[usize],
) -> (Vec<Tensor<f64>>, Vec<String>) {
    let mut inputs = vec![rand_tensor(rng, feature_shape, -1.0, 1.0)];
    let mut names = Vec::new();
    for spec in specs {
        inputs.push(init.get(&spec.name).expect("spec initialized").clone());
        names.push(spec.name.clone());
    }
    (inputs, names)
}

/// Finite-difference checks of both block types: gradients with respect to
/// the block input and every block parameter.
pub fn run_block_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xb10c);
    let mut out = Vec::new();

    {
        let block = ScaBlock::new("sca", 5);
        let specs = block.param_specs();
        let init: arch::ModelParams<f64> = block.init_params(seed);
        let (inputs, names) = block_inputs(&mut rng, &specs, &init, &[1, 5, 6, 6]);
        let probe = rand_tensor(&mut rng, &[1, 5, 6, 6], -1.0, 1.0);
        out.push(check_scalar_fn("sca_block", &inputs, OP_TOL, move |tape, v| {
            let bind = Binding::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            let y = block.apply(tape, &bind, v[0])?;
            probed(tape, y, &probe)
        }));
    }
    {
        let block = EamBlock::new("eam", 4, &[1, 2]);
        let specs = block.param_specs();
        let init: arch::ModelParams<f64> = block.init_params(seed + 1);
        let (inputs, names) = block_inputs(&mut rng, &specs, &init, &[1, 4, 6, 6]);
        let probe = rand_tensor(&mut rng, &[1, 4, 6, 6], -1.0, 1.0);
        out.push(check_scalar_fn("eam_block", &inputs, OP_TOL, move |tape, v| {
            let bind = Binding::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            let y = block.apply(tape, &bind, v[0])?;
            probed(tape, y, &probe)
        }));
    }

    out
}

/// End-to-end check: loss gradient with respect to `samples` randomly chosen
/// parameter scalars of a small model on a 16x16 input.
pub fn run_end_to_end(seed: u64, samples: usize) -> CheckOutcome {
    let config = ArchConfig {
        variant: Variant::DelNet,
        stem_width: 4,
        eam_count: 1,
        eam_dilations: vec![1, 2],
        unet_levels: 3,
        unet_widths: vec![4, 6, 9],
        sca_per_level: 1,
    };
    let net = arch::DelNet::new(config.clone()).expect("valid config");
    let params: arch::ModelParams<f64> = net.init_params(seed);
    let loss_config = LossConfig::<f64>::with_seed(seed);
    let raw = crate::data::synth_pair(seed, 16, 16).raw.data.cast::<f64>();
    let target = crate::data::synth_pair(seed, 16, 16).target.cast::<f64>();

    let eval = |p: &arch::ModelParams<f64>| -> f64 {
        let mut tape = Tape::new();
        let binding = arch::bind_params(&mut tape, p, false);
        let rv = tape.leaf(raw.clone().detached());
        let tv = tape.leaf(target.clone().detached());
        let pred = net.forward(&mut tape, &binding, rv).expect("forward");
        let (_, bd) = loss_total(&mut tape, tv, pred, &loss_config).expect("loss");
        bd.total
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let binding = arch::bind_params(&mut tape, &params, true);
    let rv = tape.leaf(raw.clone().detached());
    let tv = tape.leaf(target.clone().detached());
    let pred = net.forward(&mut tape, &binding, rv).expect("forward");
    let (total, _) = loss_total(&mut tape, tv, pred, &loss_config).expect("loss");
    tape.backward(total).expect("backward");

    let names: Vec<String> = params.names().cloned().collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xe2e);
    let mut max_err = 0.0f64;
    for _ in 0..samples {
        let name = &names[rng.random_range(0..names.len())];
        let tensor = params.get(name).expect("named param");
        let j = rng.random_range(0..tensor.numel());
        let analytic = tape.grad_or_zeros(binding.var(name).expect("bound")).data()[j];

        let mut plus = params.clone();
        let mut t = tensor.clone();
        t.data_mut()[j] += FD_STEP;
        plus.replace(name, t);
        let mut minus = params.clone();
        let mut t = tensor.clone();
        t.data_mut()[j] -= FD_STEP;
        minus.replace(name, t);
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        max_err = max_err.max(rel_err(analytic, fd));
    }
    CheckOutcome {
        name: format!("end-to-end loss ({samples} params)"),
        max_err,
        tol: END_TO_END_TOL,
    }
}

/// The whole suite: every op, both blocks, and the end-to-end loss.
pub fn run_full_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut out = run_op_suite(seed);
    out.extend(run_block_suite(seed));
    out.push(run_end_to_end(seed, 10));
    out
}
