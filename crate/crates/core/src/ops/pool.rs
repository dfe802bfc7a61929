//! Pooling and resampling kernels.

use super::macs;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean over each `HxW` plane: `[N,C,H,W] -> [N,C,1,1]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let inv = T::of(1.0 / (h * w) as f64);
    let mut out = Vec::with_capacity(n * c);
    for plane in x.data().chunks_exact(h * w) {
        let mut acc = T::zero();
        for v in plane {
            acc = acc + *v;
        }
        out.push(acc * inv);
    }
    macs::add((n * c) as u64);
    let t = Tensor::new(vec![n, c, 1, 1], out)?;
    t.debug_assert_finite("global_avg_pool");
    Ok(t)
}

/// Reduction mode of [`channel_pool`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelPoolMode {
    Mean,
    Max,
}

/// Per-pixel reduction across channels: `[N,C,H,W] -> [N,1,H,W]`.
///
/// For `Max` the index of the winning channel is returned per pixel so the
/// gradient can be routed there; ties go to the lowest channel index.
pub fn channel_pool<T: Scalar>(x: &Tensor<T>, mode: ChannelPoolMode) -> Result<(Tensor<T>, Option<Vec<u32>>)> {
    let (n, c, h, w) = x.dims4("channel_pool")?;
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![T::zero(); n * hw];
    let mut argmax = match mode {
        ChannelPoolMode::Max => Some(vec![0u32; n * hw]),
        ChannelPoolMode::Mean => None,
    };
    for ni in 0..n {
        let nbase = ni * c * hw;
        match mode {
            ChannelPoolMode::Mean => {
                let inv = T::of(1.0 / c as f64);
                for i in 0..hw {
                    let mut acc = T::zero();
                    for ci in 0..c {
                        acc = acc + xd[nbase + ci * hw + i];
                    }
                    out[ni * hw + i] = acc * inv;
                }
            }
            ChannelPoolMode::Max => {
                let arg = argmax.as_mut().expect("argmax allocated for max mode");
                for i in 0..hw {
                    let mut best = xd[nbase + i];
                    let mut best_c = 0u32;
                    for ci in 1..c {
                        let v = xd[nbase + ci * hw + i];
                        if v > best {
                            best = v;
                            best_c = ci as u32;
                        }
                    }
                    out[ni * hw + i] = best;
                    arg[ni * hw + i] = best_c;
                }
            }
        }
    }
    macs::add((n * hw) as u64);
    let t = Tensor::new(vec![n, 1, h, w], out)?;
    t.debug_assert_finite("channel_pool");
    Ok((t, argmax))
}

/// 2x2 average pooling with stride 2: `[N,C,H,W] -> [N,C,H/2,W/2]`.
///
/// Odd trailing rows/columns are dropped (floor semantics).
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("avg_pool2")?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("avg_pool2", format!("input {h}x{w} too small to halve")));
    }
    let quarter = T::of(0.25);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &xd[plane * h * w..][..h * w];
        let dst = &mut out[plane * oh * ow..][..oh * ow];
        for y in 0..oh {
            let r0 = &src[(2 * y) * w..][..w];
            let r1 = &src[(2 * y + 1) * w..][..w];
            for xx in 0..ow {
                dst[y * ow + xx] = (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]) * quarter;
            }
        }
    }
    macs::add((n * c * oh * ow) as u64);
    let t = Tensor::new(vec![n, c, oh, ow], out)?;
    t.debug_assert_finite("avg_pool2");
    Ok(t)
}

/// Nearest-neighbour x2 upsampling: `[N,C,H,W] -> [N,C,2H,2W]`.
///
/// Pure replication, so it contributes no multiply-accumulates.
pub fn upsample_nearest2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("upsample_nearest2")?;
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &xd[plane * h * w..][..h * w];
        let dst = &mut out[plane * oh * ow..][..oh * ow];
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx];
                let base = (2 * y) * ow + 2 * xx;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + ow] = v;
                dst[base + ow + 1] = v;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_constant_plane_and_direct_mean() {
        let c = Tensor::<f64>::full(&[1, 2, 3, 3], 0.7);
        let y = global_avg_pool(&c).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1, 1]);
        assert!((y.data()[0] - 0.7).abs() < 1e-15);

        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert!((y.item() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn channel_pool_single_channel_is_identity() {
        let x = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let (mean, _) = channel_pool(&x, ChannelPoolMode::Mean).unwrap();
        let (max, _) = channel_pool(&x, ChannelPoolMode::Max).unwrap();
        assert_eq!(mean.data(), x.data());
        assert_eq!(max.data(), x.data());
    }

    #[test]
    fn channel_pool_mean_and_max_values() {
        // Two channels holding -1 and 3 at the same pixel.
        let x = Tensor::<f64>::new(vec![1, 2, 1, 1], vec![-1.0, 3.0]).unwrap();
        let (mean, _) = channel_pool(&x, ChannelPoolMode::Mean).unwrap();
        let (max, arg) = channel_pool(&x, ChannelPoolMode::Max).unwrap();
        assert!((mean.item() - 1.0).abs() < 1e-15);
        assert!((max.item() - 3.0).abs() < 1e-15);
        assert_eq!(arg.unwrap(), vec![1]);
    }

    #[test]
    fn channel_pool_max_tie_picks_lowest_index() {
        let x = Tensor::<f64>::new(vec![1, 3, 1, 1], vec![2.0, 2.0, 1.0]).unwrap();
        let (_, arg) = channel_pool(&x, ChannelPoolMode::Max).unwrap();
        assert_eq!(arg.unwrap(), vec![0]);
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x = Tensor::<f32>::full(&[1, 1, 4, 4], 1.0);
        assert_eq!(avg_pool2(&x).unwrap().shape(), &[1, 1, 2, 2]);
        let up = upsample_nearest2(&x).unwrap();
        assert_eq!(up.shape(), &[1, 1, 8, 8]);
        assert!(up.data().iter().all(|&v| v == 1.0));
    }
}
