//! Shared oracles for integration tests. These are intentionally independent
//! of the library's kernels: direct nested loops in original coordinates,
//! no padded buffers, no separable filtering.

// Not every test binary uses every oracle.
#![allow(dead_code)]

use delnet_core::ops::ConvSpec;
use delnet_core::tensor::{Scalar, Tensor};

/// Six-nested-loop cross-correlation in original coordinates with
/// bounds-checked zero padding.
pub fn conv2d_reference<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, spec: ConvSpec) -> Tensor<T> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let eff = spec.dilation * (k - 1) + 1;
    let oh = (h + 2 * spec.padding - eff) / spec.stride + 1;
    let ow = (wd + 2 * spec.padding - eff) / spec.stride + 1;
    let mut out = vec![T::zero(); n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc = acc + x.at4(ni, ci, iy as usize, ix as usize) * w.at4(co, ci, ky, kx);
                            }
                        }
                    }
                    out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).expect("reference shape")
}

/// Literal multi-scale structural similarity, written directly from the
/// published construction: 11x11 Gaussian (sigma 1.5) sliding windows without
/// padding, contrast-structure at every scale, luminance at the coarsest,
/// 2x2 mean downsampling, weighted product of the per-scale means.
pub fn ms_ssim_literal(gt: &Tensor<f64>, pred: &Tensor<f64>) -> f64 {
    const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let win = 11usize;
    let sigma = 1.5f64;

    let to_luma = |t: &Tensor<f64>| -> (usize, usize, Vec<f64>) {
        let (c, h, w) = (t.shape()[1], t.shape()[2], t.shape()[3]);
        let hw = h * w;
        let d = t.data();
        let plane = if c == 1 {
            d.to_vec()
        } else {
            (0..hw).map(|i| 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i]).collect()
        };
        (h, w, plane)
    };

    let mut g = vec![0.0f64; win * win];
    let c = (win as f64 - 1.0) / 2.0;
    let mut gsum = 0.0;
    for y in 0..win {
        for x in 0..win {
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            g[y * win + x] = v;
            gsum += v;
        }
    }
    for v in &mut g {
        *v /= gsum;
    }

    let half = |plane: &[f64], h: usize, w: usize| -> (usize, usize, Vec<f64>) {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0f64; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] =
                    (plane[2 * y * w + 2 * x] + plane[2 * y * w + 2 * x + 1] + plane[(2 * y + 1) * w + 2 * x] + plane[(2 * y + 1) * w + 2 * x + 1]) / 4.0;
            }
        }
        (oh, ow, out)
    };

    let (mut h, mut w, mut a) = to_luma(gt);
    let (_, _, mut b) = to_luma(pred);

    let mut value = 1.0f64;
    for (scale, &weight) in WEIGHTS.iter().enumerate() {
        let (oh, ow) = (h - win + 1, w - win + 1);
        let mut lsum = 0.0f64;
        let mut cssum = 0.0f64;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut m1, mut m2, mut e11, mut e22, mut e12) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..win {
                    for kx in 0..win {
                        let gw = g[ky * win + kx];
                        let va = a[(oy + ky) * w + ox + kx];
                        let vb = b[(oy + ky) * w + ox + kx];
                        m1 += gw * va;
                        m2 += gw * vb;
                        e11 += gw * va * va;
                        e22 += gw * vb * vb;
                        e12 += gw * va * vb;
                    }
                }
                let s1 = e11 - m1 * m1;
                let s2 = e22 - m2 * m2;
                let s12 = e12 - m1 * m2;
                lsum += (2.0 * m1 * m2 + C1) / (m1 * m1 + m2 * m2 + C1);
                cssum += (2.0 * s12 + C2) / (s1 + s2 + C2);
            }
        }
        let npos = (oh * ow) as f64;
        let (lmean, csmean) = (lsum / npos, cssum / npos);
        if scale == WEIGHTS.len() - 1 {
            value *= lmean.powf(weight) * csmean.powf(weight);
        } else {
            value *= csmean.powf(weight);
            let (nh, nw, na) = half(&a, h, w);
            let (_, _, nb) = half(&b, h, w);
            h = nh;
            w = nw;
            a = na;
            b = nb;
        }
    }
    value
}

/// Deterministic correlated image pair: a smooth synthetic target plus
/// bounded per-pixel noise of the given amplitude.
pub fn correlated_pair(seed: u64, hw: usize, amplitude: f64) -> (Tensor<f64>, Tensor<f64>) {
    let gt = delnet_core::data::synth_pair(seed, hw, hw).target.cast::<f64>();
    let mut state = seed.wrapping_mul(0x2545f4914f6cdd1d).wrapping_add(1);
    let noisy: Vec<f64> = gt
        .data()
        .iter()
        .map(|&v| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            (v + amplitude * u).clamp(0.0, 1.0)
        })
        .collect();
    let pred = Tensor::new(gt.shape().to_vec(), noisy).expect("same shape");
    (gt, pred)
}
