//! Full-reference image quality metrics: PSNR, SSIM, MS-SSIM and mean
//! CIEDE2000.
//!
//! All metrics are computed in f64 regardless of the tensor precision, are
//! pure, and are deterministic. PSNR is taken over all RGB channels; SSIM and
//! MS-SSIM are computed on luma (0.299/0.587/0.114), following the dominant
//! convention for RAW-to-sRGB comparisons.

use crate::color;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Immutable evaluation result for one image pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    /// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
    pub psnr: f64,
    /// Single-scale structural similarity, in [-1, 1].
    pub ssim: f64,
    /// Multi-scale structural similarity, in [0, 1] for non-negative images.
    pub ms_ssim: f64,
    /// Mean CIEDE2000 colour difference over pixels.
    pub delta_e00: f64,
}

/// Reported PSNR when the mean squared error is zero (or small enough to
/// exceed the cap); avoids infinities in reports.
pub const PSNR_CAP_DB: f64 = 100.0;

const K1: f64 = 0.01;
const K2: f64 = 0.03;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;

/// SSIM stabilizers for a unit dynamic range: `(K1*L)^2` and `(K2*L)^2`.
pub const SSIM_C1: f64 = K1 * K1;
pub const SSIM_C2: f64 = K2 * K2;

/// Scale weights for 5-scale MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Smallest spatial extent any (MS-)SSIM computation accepts.
pub const MIN_SSIM_EXTENT: usize = 4;

// ---------------------------------------------------------------------------
// Shared SSIM geometry, also used by the differentiable loss path.
// ---------------------------------------------------------------------------

/// Gaussian window extent and sigma for a given image size.
///
/// The standard 11x11 / sigma 1.5 window is used whenever it fits. Below
/// that, the window shrinks to the largest odd extent that fits, with sigma
/// scaled proportionally, so that losses stay defined on tiny test images.
pub fn ssim_window(h: usize, w: usize) -> (usize, f64) {
    let m = h.min(w);
    let win = if m >= WINDOW {
        WINDOW
    } else if m % 2 == 1 {
        m
    } else {
        m - 1
    };
    (win, SIGMA * win as f64 / WINDOW as f64)
}

/// Number of MS-SSIM scales for an image size: 5 when `min(H,W) >= 176`,
/// otherwise the largest count whose coarsest scale still fits the standard
/// window (at least 1, using the shrunken window below 11 pixels).
pub fn ms_ssim_scales(h: usize, w: usize) -> Result<usize> {
    let m = h.min(w);
    if m < MIN_SSIM_EXTENT {
        return Err(Error::invalid(
            "ms_ssim",
            format!("image {h}x{w} too small for any scale (needs min extent {MIN_SSIM_EXTENT})"),
        ));
    }
    if m < WINDOW {
        return Ok(1);
    }
    let mut scales = 1usize;
    while scales < 5 && (m >> scales) >= WINDOW {
        scales += 1;
    }
    Ok(scales)
}

/// Scale weights for a given count: the published five, or a renormalized
/// prefix when fewer scales fit.
pub fn ms_ssim_weights(scales: usize) -> Vec<f64> {
    assert!((1..=5).contains(&scales));
    if scales == 5 {
        return MS_SSIM_WEIGHTS.to_vec();
    }
    let sum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    MS_SSIM_WEIGHTS[..scales].iter().map(|w| w / sum).collect()
}

/// Normalized 1D Gaussian window.
pub fn gaussian_window(win: usize, sigma: f64) -> Vec<f64> {
    let c = (win as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..win)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Normalized 2D Gaussian window (outer product of the 1D window).
pub fn gaussian_kernel_2d(win: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_window(win, sigma);
    let mut out = Vec::with_capacity(win * win);
    for y in &k {
        for x in &k {
            out.push(y * x);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Plane extraction
// ---------------------------------------------------------------------------

fn image_dims<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c @ (1 | 3), h, w] => Ok((*c, *h, *w)),
        [1, c @ (1 | 3), h, w] => Ok((*c, *h, *w)),
        other => Err(Error::invalid(
            op,
            format!("expected [C,H,W] or [1,C,H,W] with 1 or 3 channels, got {other:?}"),
        )),
    }
}

fn luma_plane<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = image_dims(t, op)?;
    let hw = h * w;
    let d = &t.data()[t.numel() - c * hw..];
    let plane = if c == 1 {
        d.iter().map(|v| v.wide()).collect()
    } else {
        (0..hw)
            .map(|i| 0.299 * d[i].wide() + 0.587 * d[hw + i].wide() + 0.114 * d[2 * hw + i].wide())
            .collect()
    };
    Ok((h, w, plane))
}

fn matched_luma<T: Scalar>(
    gt: &Tensor<T>,
    pred: &Tensor<T>,
    op: &'static str,
) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
    let (h, w, a) = luma_plane(gt, op)?;
    let (h2, w2, b) = luma_plane(pred, op)?;
    if (h, w) != (h2, w2) {
        return Err(Error::shape(op, gt.shape(), pred.shape(), "image extents must agree"));
    }
    Ok((h, w, a, b))
}

// ---------------------------------------------------------------------------
// PSNR
// ---------------------------------------------------------------------------

/// `10 log10(1 / MSE)` for images in [0,1]; equal images report the cap.
pub fn psnr<T: Scalar>(gt: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    if gt.shape() != pred.shape() {
        return Err(Error::shape("psnr", gt.shape(), pred.shape(), "image shapes must agree"));
    }
    for t in [gt, pred] {
        if t.min_value().wide() < 0.0 || t.max_value().wide() > 1.0 {
            return Err(Error::invalid("psnr", "values must lie in [0,1]"));
        }
    }
    let mut acc = 0.0f64;
    for (a, b) in gt.data().iter().zip(pred.data()) {
        let d = a.wide() - b.wide();
        acc += d * d;
    }
    let mse = acc / gt.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

// ---------------------------------------------------------------------------
// SSIM / MS-SSIM
// ---------------------------------------------------------------------------

/// Valid (un-padded) separable Gaussian blur of an `h x w` plane.
fn blur_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> (usize, usize, Vec<f64>) {
    let k = win.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    // Horizontal pass.
    let mut rows = vec![0.0f64; h * ow];
    for y in 0..h {
        let src = &plane[y * w..][..w];
        let dst = &mut rows[y * ow..][..ow];
        for (x, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, &g) in win.iter().enumerate() {
                acc += g * src[x + i];
            }
            *d = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        let dst = &mut out[y * ow..][..ow];
        for (i, &g) in win.iter().enumerate() {
            let src = &rows[(y + i) * ow..][..ow];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += g * s;
            }
        }
    }
    (oh, ow, out)
}

/// Mean luminance and contrast-structure terms of one scale.
fn ssim_components(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<(f64, f64)> {
    let (win, sigma) = ssim_window(h, w);
    if h.min(w) < MIN_SSIM_EXTENT {
        return Err(Error::invalid("ssim", format!("image {h}x{w} too small (needs min extent {MIN_SSIM_EXTENT})")));
    }
    let g = gaussian_window(win, sigma);
    let sq_a: Vec<f64> = a.iter().map(|v| v * v).collect();
    let sq_b: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (oh, ow, mu1) = blur_valid(a, h, w, &g);
    let (_, _, mu2) = blur_valid(b, h, w, &g);
    let (_, _, e11) = blur_valid(&sq_a, h, w, &g);
    let (_, _, e22) = blur_valid(&sq_b, h, w, &g);
    let (_, _, e12) = blur_valid(&ab, h, w, &g);

    let c1 = SSIM_C1;
    let c2 = SSIM_C2;
    let mut lsum = 0.0;
    let mut cssum = 0.0;
    for i in 0..oh * ow {
        let (m1, m2) = (mu1[i], mu2[i]);
        let s1 = e11[i] - m1 * m1;
        let s2 = e22[i] - m2 * m2;
        let s12 = e12[i] - m1 * m2;
        lsum += (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        cssum += (2.0 * s12 + c2) / (s1 + s2 + c2);
    }
    let n = (oh * ow) as f64;
    Ok((lsum / n, cssum / n))
}

/// Single-scale SSIM on luma with an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03.
pub fn ssim<T: Scalar>(gt: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    let (h, w, a, b) = matched_luma(gt, pred, "ssim")?;
    let (l, cs) = ssim_components(&a, &b, h, w)?;
    Ok(l * cs)
}

fn downsample2(plane: &[f64], h: usize, w: usize) -> (usize, usize, Vec<f64>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = 0.25
                * (plane[(2 * y) * w + 2 * x]
                    + plane[(2 * y) * w + 2 * x + 1]
                    + plane[(2 * y + 1) * w + 2 * x]
                    + plane[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (oh, ow, out)
}

/// Multi-scale SSIM: contrast-structure terms at every scale, luminance at
/// the coarsest, combined as a weighted product. Scales are linked by 2x2
/// average pooling.
pub fn ms_ssim<T: Scalar>(gt: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    let (h, w, a, b) = matched_luma(gt, pred, "ms_ssim")?;
    let scales = ms_ssim_scales(h, w)?;
    let weights = ms_ssim_weights(scales);

    let (mut ch, mut cw) = (h, w);
    let (mut pa, mut pb) = (a, b);
    let mut value = 1.0f64;
    for (j, &wj) in weights.iter().enumerate() {
        let (l, cs) = ssim_components(&pa, &pb, ch, cw)?;
        if j + 1 == scales {
            value *= l.powf(wj) * cs.powf(wj);
        } else {
            value *= cs.powf(wj);
            let (nh, nw, na) = downsample2(&pa, ch, cw);
            let (_, _, nb) = downsample2(&pb, ch, cw);
            ch = nh;
            cw = nw;
            pa = na;
            pb = nb;
        }
    }
    Ok(value)
}

/// All four metrics for a pair of sRGB images.
pub fn evaluate<T: Scalar>(gt: &Tensor<T>, pred: &Tensor<T>) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(gt, pred)?,
        ssim: ssim(gt, pred)?,
        ms_ssim: ms_ssim(gt, pred)?,
        delta_e00: color::ciede2000_mean(gt, pred)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        let mut d = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                d.push(f(y, x));
            }
        }
        Tensor::new(vec![1, 1, h, w], d).unwrap()
    }

    #[test]
    fn psnr_analytic_cases() {
        let zeros = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let ones = Tensor::<f64>::full(&[1, 3, 4, 4], 1.0);
        let half = Tensor::<f64>::full(&[1, 3, 4, 4], 0.5);
        assert_eq!(psnr(&zeros, &zeros).unwrap(), 100.0);
        assert!((psnr(&zeros, &ones).unwrap() - 0.0).abs() < 1e-9);
        // Constant offset 0.5: MSE 0.25 -> 10 log10 4.
        let expect = 10.0 * 4.0f64.log10();
        assert!((psnr(&zeros, &half).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn psnr_is_symmetric_and_decreases_with_noise() {
        let a = img(16, 16, |y, x| ((y * 31 + x * 17) % 97) as f64 / 97.0);
        let mk = |amp: f64| {
            let d: Vec<f64> = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| (v + amp * if i % 2 == 0 { 1.0 } else { -1.0 }).clamp(0.0, 1.0))
                .collect();
            Tensor::new(vec![1, 1, 16, 16], d).unwrap()
        };
        let (n1, n2) = (mk(0.05), mk(0.2));
        assert_eq!(psnr(&a, &n1).unwrap(), psnr(&n1, &a).unwrap());
        assert!(psnr(&a, &n1).unwrap() > psnr(&a, &n2).unwrap());
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a = img(32, 32, |y, x| ((y as f64).sin() * 0.3 + (x as f64 * 0.2).cos() * 0.3 + 0.5).clamp(0.0, 1.0));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn inverted_checkerboard_has_negative_ssim() {
        let a = img(32, 32, |y, x| ((y + x) % 2) as f64);
        let b = img(32, 32, |y, x| 1.0 - ((y + x) % 2) as f64);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn scale_count_follows_image_size() {
        assert_eq!(ms_ssim_scales(176, 400).unwrap(), 5);
        assert_eq!(ms_ssim_scales(256, 256).unwrap(), 5);
        assert_eq!(ms_ssim_scales(64, 64).unwrap(), 3);
        assert_eq!(ms_ssim_scales(16, 16).unwrap(), 1);
        assert_eq!(ms_ssim_scales(8, 8).unwrap(), 1);
        assert!(ms_ssim_scales(2, 100).is_err());
        let w = ms_ssim_weights(3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_invariant_to_simultaneous_flips() {
        let a = img(24, 20, |y, x| ((y * 13 + x * 7) % 53) as f64 / 53.0);
        let b = img(24, 20, |y, x| ((y * 11 + x * 19) % 41) as f64 / 41.0);
        let flip = |t: &Tensor<f64>| {
            let (h, w) = (t.shape()[2], t.shape()[3]);
            let mut d = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    d[y * w + x] = t.data()[(h - 1 - y) * w + (w - 1 - x)];
                }
            }
            Tensor::new(t.shape().to_vec(), d).unwrap()
        };
        let (fa, fb) = (flip(&a), flip(&b));
        assert!((ssim(&a, &b).unwrap() - ssim(&fa, &fb).unwrap()).abs() < 1e-9);
        assert!((ms_ssim(&a, &b).unwrap() - ms_ssim(&fa, &fb).unwrap()).abs() < 1e-9);
    }
}
