//! Composite training loss: a modified L1 with a log-domain term, a
//! multi-scale structural similarity loss, and a pluggable perceptual loss,
//! combined as `total = l1*L1_mod + l2*(1-MS-SSIM) + l3*L_perc`.
//!
//! All terms are built on the tape, so the total is differentiable end to
//! end. Norms are means over elements (not sums), which keeps magnitudes
//! resolution-independent.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::metrics;
use crate::ops::ConvSpec;
use crate::perceptual::{FeatureExtractor, RandomConvPyramid};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Contrast-structure means are floored at this value before exponentiation
/// on the differentiable path, guarding against fractional powers of
/// non-positive numbers far from convergence. The pure metric in
/// [`crate::metrics`] stays literal.
const CS_FLOOR: f64 = 1e-4;

/// Loss weights, the log-term floor, and the perceptual feature extractor.
#[derive(Clone)]
pub struct LossConfig<T: Scalar> {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub epsilon: f64,
    pub extractor: Arc<dyn FeatureExtractor<T>>,
}

impl<T: Scalar> LossConfig<T> {
    /// Default weights (0.85 / 0.15 / 1.0), epsilon 0.001, random pyramid
    /// extractor with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        LossConfig {
            lambda1: 0.85,
            lambda2: 0.15,
            lambda3: 1.0,
            epsilon: 1e-3,
            extractor: Arc::new(RandomConvPyramid::new(seed)),
        }
    }

    pub fn with_extractor(mut self, extractor: Arc<dyn FeatureExtractor<T>>) -> Self {
        self.extractor = extractor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

/// Per-term values of one loss evaluation, for logging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub ms_ssim: f64,
    pub perceptual: f64,
}

fn check_pair<T: Scalar>(op: &'static str, tape: &Tape<T>, gt: Var, pred: Var) -> Result<()> {
    if tape.value(gt).shape() != tape.value(pred).shape() {
        return Err(Error::shape(
            op,
            tape.value(gt).shape(),
            tape.value(pred).shape(),
            "ground truth and prediction must have equal shapes",
        ));
    }
    Ok(())
}

/// Mean absolute difference plus mean absolute log-difference with an
/// epsilon floor. Symmetric in its arguments; values must be non-negative.
pub fn l1_modified<T: Scalar>(tape: &mut Tape<T>, gt: Var, pred: Var, epsilon: f64) -> Result<Var> {
    check_pair("l1_modified", tape, gt, pred)?;
    for v in [gt, pred] {
        if tape.value(v).min_value() < T::zero() {
            return Err(Error::invalid("l1_modified", "values must be non-negative"));
        }
    }
    let d = tape.sub(gt, pred)?;
    let d = tape.abs(d);
    let plain = tape.mean_all(d);

    let lg = tape.max_scalar(gt, epsilon);
    let lg = tape.ln(lg)?;
    let lp = tape.max_scalar(pred, epsilon);
    let lp = tape.ln(lp)?;
    let ld = tape.sub(lg, lp)?;
    let ld = tape.abs(ld);
    let log_term = tape.mean_all(ld);

    tape.add(plain, log_term)
}

fn tape_luma<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (_, c, _, _) = tape.value(x).dims4("ms_ssim")?;
    match c {
        1 => Ok(x),
        3 => {
            let w = Tensor::new(vec![1, 3, 1, 1], vec![T::of(0.299), T::of(0.587), T::of(0.114)])?;
            let wv = tape.constant(w);
            let bv = tape.constant(Tensor::zeros(&[1]));
            tape.conv2d(x, wv, bv, ConvSpec::unit())
        }
        other => Err(Error::invalid("ms_ssim", format!("expected 1 or 3 channels, got {other}"))),
    }
}

/// Differentiable multi-scale structural similarity index, mirroring
/// [`metrics::ms_ssim`]: contrast-structure at every scale, luminance at the
/// coarsest, Gaussian windows, 2x2 average pooling between scales.
pub fn ms_ssim_index<T: Scalar>(tape: &mut Tape<T>, gt: Var, pred: Var) -> Result<Var> {
    check_pair("ms_ssim", tape, gt, pred)?;
    let (_, _, h, w) = tape.value(gt).dims4("ms_ssim")?;
    let scales = metrics::ms_ssim_scales(h, w)?;
    let weights = metrics::ms_ssim_weights(scales);

    let mut a = tape_luma(tape, gt)?;
    let mut b = tape_luma(tape, pred)?;
    let mut value: Option<Var> = None;

    for (j, &wj) in weights.iter().enumerate() {
        let (_, _, ch, cw) = tape.value(a).dims4("ms_ssim")?;
        let (win, sigma) = metrics::ssim_window(ch, cw);
        let kernel: Vec<T> = metrics::gaussian_kernel_2d(win, sigma).iter().map(|&v| T::of(v)).collect();
        let gv = tape.constant(Tensor::new(vec![1, 1, win, win], kernel)?);
        let bz = tape.constant(Tensor::zeros(&[1]));
        let spec = ConvSpec::unit();

        let mu1 = tape.conv2d(a, gv, bz, spec)?;
        let mu2 = tape.conv2d(b, gv, bz, spec)?;
        let aa = tape.mul(a, a)?;
        let e11 = tape.conv2d(aa, gv, bz, spec)?;
        let bb = tape.mul(b, b)?;
        let e22 = tape.conv2d(bb, gv, bz, spec)?;
        let ab = tape.mul(a, b)?;
        let e12 = tape.conv2d(ab, gv, bz, spec)?;

        let mu11 = tape.mul(mu1, mu1)?;
        let mu22 = tape.mul(mu2, mu2)?;
        let mu12 = tape.mul(mu1, mu2)?;
        let s1 = tape.sub(e11, mu11)?;
        let s2 = tape.sub(e22, mu22)?;
        let s12 = tape.sub(e12, mu12)?;

        let cs_num = tape.mul_scalar(s12, 2.0);
        let cs_num = tape.add_scalar(cs_num, metrics::SSIM_C2);
        let cs_den = tape.add(s1, s2)?;
        let cs_den = tape.add_scalar(cs_den, metrics::SSIM_C2);
        let cs_map = tape.div(cs_num, cs_den)?;
        let cs = tape.mean_all(cs_map);
        let cs = tape.max_scalar(cs, CS_FLOOR);

        let term = if j + 1 == scales {
            let l_num = tape.mul_scalar(mu12, 2.0);
            let l_num = tape.add_scalar(l_num, metrics::SSIM_C1);
            let l_den = tape.add(mu11, mu22)?;
            let l_den = tape.add_scalar(l_den, metrics::SSIM_C1);
            let l_map = tape.div(l_num, l_den)?;
            let l = tape.mean_all(l_map);
            let lw = tape.powf_scalar(l, wj);
            let csw = tape.powf_scalar(cs, wj);
            tape.mul(lw, csw)?
        } else {
            tape.powf_scalar(cs, wj)
        };
        value = Some(match value {
            None => term,
            Some(v) => tape.mul(v, term)?,
        });
        if j + 1 < scales {
            a = tape.avg_pool2(a)?;
            b = tape.avg_pool2(b)?;
        }
    }
    Ok(value.expect("at least one scale"))
}

/// `1 - MS-SSIM`.
pub fn loss_ms_ssim<T: Scalar>(tape: &mut Tape<T>, gt: Var, pred: Var) -> Result<Var> {
    let idx = ms_ssim_index(tape, gt, pred)?;
    let neg = tape.mul_scalar(idx, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Mean squared difference between extractor feature maps, averaged over
/// layers. Symmetric in its arguments.
pub fn loss_perceptual<T: Scalar>(
    tape: &mut Tape<T>,
    gt: Var,
    pred: Var,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Var> {
    check_pair("loss_perceptual", tape, gt, pred)?;
    let fg = extractor.features(tape, gt)?;
    let fp = extractor.features(tape, pred)?;
    debug_assert_eq!(fg.len(), fp.len());
    let mut acc: Option<Var> = None;
    for (g, p) in fg.iter().zip(&fp) {
        let d = tape.sub(*g, *p)?;
        let sq = tape.mul(d, d)?;
        let m = tape.mean_all(sq);
        acc = Some(match acc {
            None => m,
            Some(v) => tape.add(v, m)?,
        });
    }
    let total = acc.ok_or_else(|| Error::invalid("loss_perceptual", "extractor produced no features"))?;
    Ok(tape.mul_scalar(total, 1.0 / fg.len() as f64))
}

/// Weighted sum of the three terms plus the per-term breakdown for logging.
pub fn loss_total<T: Scalar>(
    tape: &mut Tape<T>,
    gt: Var,
    pred: Var,
    config: &LossConfig<T>,
) -> Result<(Var, LossBreakdown)> {
    config.validate()?;
    let l1 = l1_modified(tape, gt, pred, config.epsilon)?;
    let ssim_loss = loss_ms_ssim(tape, gt, pred)?;
    let perc = loss_perceptual(tape, gt, pred, config.extractor.as_ref())?;

    let t1 = tape.mul_scalar(l1, config.lambda1);
    let t2 = tape.mul_scalar(ssim_loss, config.lambda2);
    let t3 = tape.mul_scalar(perc, config.lambda3);
    let partial = tape.add(t1, t2)?;
    let total = tape.add(partial, t3)?;

    let breakdown = LossBreakdown {
        total: tape.value(total).item().wide(),
        l1: tape.value(l1).item().wide(),
        ms_ssim: tape.value(ssim_loss).item().wide(),
        perceptual: tape.value(perc).item().wide(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptual::IdentityExtractor;

    fn pair(gt: f64, pred: f64, h: usize, w: usize) -> (Tape<f64>, Var, Var) {
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::full(&[1, 3, h, w], gt));
        let p = tape.leaf(Tensor::full(&[1, 3, h, w], pred));
        (tape, g, p)
    }

    #[test]
    fn l1_modified_identity_and_direct_value() {
        let (mut tape, g, p) = pair(0.5, 0.5, 4, 4);
        let l = l1_modified(&mut tape, g, p, 1e-3).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        // Scalar images 1.0 vs 0.5: 0.5 + ln 2.
        let (mut tape, g, p) = pair(1.0, 0.5, 1, 1);
        let l = l1_modified(&mut tape, g, p, 1e-3).unwrap();
        let expect = 0.5 + (2.0f64).ln();
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn l1_modified_epsilon_floor_zeroes_log_term() {
        // pred 0 everywhere, gt = epsilon: both logs hit ln(eps).
        let (mut tape, g, p) = pair(1e-3, 0.0, 2, 2);
        let l = l1_modified(&mut tape, g, p, 1e-3).unwrap();
        assert!((tape.value(l).item() - 1e-3).abs() < 1e-15, "only the plain term remains");
    }

    #[test]
    fn l1_modified_is_symmetric() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.7, 0.4, 0.9]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![0.3, 0.2, 0.8, 0.5]).unwrap());
        let l1 = l1_modified(&mut tape, a, b, 1e-3).unwrap();
        let l2 = l1_modified(&mut tape, b, a, 1e-3).unwrap();
        assert_eq!(tape.value(l1).item(), tape.value(l2).item());
    }

    #[test]
    fn ms_ssim_loss_zero_for_identical_and_equal_constants() {
        let (mut tape, g, p) = pair(0.42, 0.42, 32, 32);
        let l = loss_ms_ssim(&mut tape, g, p).unwrap();
        assert!(tape.value(l).item().abs() < 1e-9);
    }

    #[test]
    fn ms_ssim_loss_matches_pure_metric() {
        let mut tape = Tape::<f64>::new();
        let gt = crate::data::synth_pair(4, 32, 32).target.cast::<f64>();
        let mut state = 2u64;
        let noisy: Vec<f64> = gt
            .data()
            .iter()
            .map(|&v| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let noise = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                (v + 0.1 * noise).clamp(0.0, 1.0)
            })
            .collect();
        let pt = Tensor::new(gt.shape().to_vec(), noisy).unwrap();
        let metric = metrics::ms_ssim(&gt, &pt).unwrap();
        let g = tape.leaf(gt);
        let p = tape.leaf(pt);
        let l = loss_ms_ssim(&mut tape, g, p).unwrap();
        assert!((tape.value(l).item() - (1.0 - metric)).abs() < 1e-9);
    }

    #[test]
    fn perceptual_is_symmetric_and_zero_on_identity() {
        let (mut tape, g, p) = pair(0.3, 0.3, 8, 8);
        let ex = IdentityExtractor;
        let l = loss_perceptual(&mut tape, g, p, &ex).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(&[1, 3, 8, 8], 0.2));
        let b = tape.leaf(Tensor::full(&[1, 3, 8, 8], 0.9));
        let ex = RandomConvPyramid::new(3);
        let l1 = loss_perceptual(&mut tape, a, b, &ex).unwrap();
        let l2 = loss_perceptual(&mut tape, b, a, &ex).unwrap();
        assert_eq!(tape.value(l1).item(), tape.value(l2).item());
        assert!(tape.value(l1).item() > 0.0);
    }

    #[test]
    fn ms_ssim_loss_increases_with_noise_amplitude() {
        let gt = crate::data::synth_pair(6, 64, 64).target.cast::<f64>();
        let mut losses = Vec::new();
        for sigma in [0.01f64, 0.05, 0.1] {
            let mut state = 77u64;
            let noisy: Vec<f64> = gt
                .data()
                .iter()
                .map(|&v| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    // Same unit-noise stream per amplitude, scaled by sigma.
                    let u = 2.0 * ((state >> 11) as f64 / (1u64 << 53) as f64) - 1.0;
                    (v + sigma * u).clamp(0.0, 1.0)
                })
                .collect();
            let pt = Tensor::new(gt.shape().to_vec(), noisy).unwrap();
            let mut tape = Tape::<f64>::new();
            let g = tape.leaf(gt.clone());
            let p = tape.leaf(pt);
            let l = loss_ms_ssim(&mut tape, g, p).unwrap();
            losses.push(tape.value(l).item());
        }
        assert!(
            losses[0] < losses[1] && losses[1] < losses[2],
            "loss must increase with noise: {losses:?}"
        );
    }

    #[test]
    fn total_gradient_matches_finite_differences_on_8x8() {
        let config = LossConfig::<f64>::with_seed(5);
        let gt = crate::data::synth_pair(9, 8, 8).target.cast::<f64>();
        let mut state = 3u64;
        let pred_data: Vec<f64> = (0..gt.numel())
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                0.1 + 0.8 * ((state >> 11) as f64 / (1u64 << 53) as f64)
            })
            .collect();
        let pred = Tensor::new(gt.shape().to_vec(), pred_data).unwrap();
        let outcome = crate::gradcheck::check_scalar_fn("loss_total wrt pred", &[pred], 1e-3, move |tape, v| {
            let g = tape.leaf(gt.clone());
            let (total, _) = loss_total(tape, g, v[0], &config)?;
            Ok(total)
        });
        assert!(outcome.passed(), "{outcome}");
    }

    #[test]
    fn total_is_zero_on_identical_pair_with_zero_breakdown() {
        let config = LossConfig::<f64>::with_seed(0);
        let (mut tape, g, p) = pair(0.6, 0.6, 16, 16);
        let (total, bd) = loss_total(&mut tape, g, p, &config).unwrap();
        assert!(tape.value(total).item().abs() < 1e-12);
        assert!(bd.l1 == 0.0 && bd.perceptual == 0.0);
        assert!(bd.ms_ssim.abs() < 1e-12);
    }

    #[test]
    fn lambda_projection_reduces_to_l1() {
        let mut config = LossConfig::<f64>::with_seed(0);
        config.lambda1 = 1.0;
        config.lambda2 = 0.0;
        config.lambda3 = 0.0;
        let (mut tape, g, p) = pair(0.8, 0.5, 16, 16);
        let (total, _) = loss_total(&mut tape, g, p, &config).unwrap();
        let l1 = l1_modified(&mut tape, g, p, config.epsilon).unwrap();
        assert_eq!(tape.value(total).item(), tape.value(l1).item());
    }
}
