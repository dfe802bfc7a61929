//! 2D convolution (cross-correlation, no kernel flip).

use rayon::prelude::*;

use super::macs;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Stride/padding/dilation of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn unit() -> Self {
        ConvSpec { stride: 1, padding: 0, dilation: 1 }
    }

    /// "Same" zero padding: with stride 1 the output extents equal the input
    /// extents. Requires an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
}

/// Output extent of a convolution along one axis, or `None` when it would be
/// empty.
pub fn conv_out_extent(input: usize, kernel: usize, spec: ConvSpec) -> Option<usize> {
    let effective = spec.dilation * (kernel - 1) + 1;
    let padded = input + 2 * spec.padding;
    if padded < effective || spec.stride == 0 {
        None
    } else {
        Some((padded - effective) / spec.stride + 1)
    }
}

fn validate<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: ConvSpec,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, cin, h, wd) = x.dims4("conv2d")?;
    let (cout, wcin, kh, kw) = w.dims4("conv2d")?;
    if kh != kw {
        return Err(Error::invalid("conv2d", format!("kernel must be square, got {kh}x{kw}")));
    }
    if kh % 2 == 0 {
        return Err(Error::invalid("conv2d", format!("kernel extent must be odd, got {kh}")));
    }
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            x.shape(),
            w.shape(),
            format!("input has {cin} channels but kernel expects {wcin}"),
        ));
    }
    if b.shape() != [cout] {
        return Err(Error::shape("conv2d", w.shape(), b.shape(), "bias extent must equal output channels"));
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::invalid("conv2d", "stride and dilation must be >= 1"));
    }
    let oh = conv_out_extent(h, kh, spec)
        .ok_or_else(|| Error::invalid("conv2d", format!("empty output for input {h}x{wd}, kernel {kh}, {spec:?}")))?;
    let ow = conv_out_extent(wd, kw, spec)
        .ok_or_else(|| Error::invalid("conv2d", format!("empty output for input {h}x{wd}, kernel {kh}, {spec:?}")))?;
    Ok((n, cin, h, wd, cout, kh, oh, ow))
}

/// Copy `x` into an explicitly zero-padded buffer so the inner loops run
/// branch-free; padded taps are therefore real multiply-accumulates, matching
/// the analytic count.
fn zero_pad<T: Scalar>(x: &Tensor<T>, p: usize) -> Vec<T> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); n * c * ph * pw];
    let xd = x.data();
    for plane in 0..n * c {
        let src = &xd[plane * h * w..][..h * w];
        let dst = &mut out[plane * ph * pw..][..ph * pw];
        for y in 0..h {
            dst[(y + p) * pw + p..][..w].copy_from_slice(&src[y * w..][..w]);
        }
    }
    out
}

/// Direct 2D cross-correlation plus bias.
///
/// Shapes: input `[N,Cin,H,W]`, weight `[Cout,Cin,k,k]`, bias `[Cout]`,
/// output `[N,Cout,H',W']` with `H' = (H + 2p - d(k-1) - 1)/s + 1`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let (n, cin, h, wd, cout, k, oh, ow) = validate(x, w, b, spec)?;
    let (stride, p, dil) = (spec.stride, spec.padding, spec.dilation);
    let (ph, pw) = (h + 2 * p, wd + 2 * p);

    let padded_storage;
    let xp: &[T] = if p == 0 {
        x.data()
    } else {
        padded_storage = zero_pad(x, p);
        &padded_storage
    };
    let wdat = w.data();
    let bdat = b.data();

    let plane = oh * ow;
    let mut out = vec![T::zero(); n * cout * plane];

    // One output plane per (batch, out-channel); returns the MACs it ran.
    let compute_plane = |pi: usize, out_plane: &mut [T]| -> u64 {
        let ni = pi / cout;
        let co = pi % cout;
        let bias = bdat[co];
        for v in out_plane.iter_mut() {
            *v = bias;
        }
        let mut ran = 0u64;
        for ci in 0..cin {
            let xplane = &xp[(ni * cin + ci) * ph * pw..][..ph * pw];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdat[((co * cin + ci) * k + ky) * k + kx];
                    let xoff = kx * dil;
                    for oy in 0..oh {
                        let xrow = &xplane[(oy * stride + ky * dil) * pw..][..pw];
                        let orow = &mut out_plane[oy * ow..][..ow];
                        if stride == 1 {
                            for ox in 0..ow {
                                orow[ox] = orow[ox] + wv * xrow[xoff + ox];
                            }
                        } else {
                            for ox in 0..ow {
                                orow[ox] = orow[ox] + wv * xrow[ox * stride + xoff];
                            }
                        }
                    }
                    ran += plane as u64;
                }
            }
        }
        ran
    };

    let work = n * cout * plane * cin * k * k;
    if macs::is_active() || work < (1 << 17) || n * cout < 2 {
        let mut total = 0u64;
        for (pi, out_plane) in out.chunks_exact_mut(plane).enumerate() {
            total += compute_plane(pi, out_plane);
        }
        macs::add(total);
    } else {
        out.par_chunks_exact_mut(plane).enumerate().for_each(|(pi, out_plane)| {
            compute_plane(pi, out_plane);
        });
    }

    let t = Tensor::new(vec![n, cout, oh, ow], out)?;
    t.debug_assert_finite("conv2d");
    Ok(t)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias; each is
/// computed only when the corresponding `need_*` flag is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: ConvSpec,
    dout: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, cin, h, wd) = x.dims4("conv2d_backward")?;
    let (cout, _, k, _) = w.dims4("conv2d_backward")?;
    let (stride, p, dil) = (spec.stride, spec.padding, spec.dilation);
    let oh = conv_out_extent(h, k, spec).expect("shape validated at forward");
    let ow = conv_out_extent(wd, k, spec).expect("shape validated at forward");
    debug_assert_eq!(dout.len(), n * cout * oh * ow);
    let (ph, pw) = (h + 2 * p, wd + 2 * p);
    let wdat = w.data();

    let dx = if need_dx {
        let mut dxp = vec![T::zero(); n * cin * ph * pw];
        let fill_plane = |pi: usize, plane: &mut [T]| {
            let ni = pi / cin;
            let ci = pi % cin;
            for co in 0..cout {
                let dplane = &dout[(ni * cout + co) * oh * ow..][..oh * ow];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdat[((co * cin + ci) * k + ky) * k + kx];
                        for oy in 0..oh {
                            let drow = &dplane[oy * ow..][..ow];
                            let base = (oy * stride + ky * dil) * pw + kx * dil;
                            for ox in 0..ow {
                                let i = base + ox * stride;
                                plane[i] = plane[i] + wv * drow[ox];
                            }
                        }
                    }
                }
            }
        };
        let work = n * cin * cout * oh * ow * k * k;
        if work < (1 << 17) || n * cin < 2 {
            for (pi, plane) in dxp.chunks_exact_mut(ph * pw).enumerate() {
                fill_plane(pi, plane);
            }
        } else {
            dxp.par_chunks_exact_mut(ph * pw).enumerate().for_each(|(pi, plane)| fill_plane(pi, plane));
        }
        // Crop the padding ring back off.
        let mut dx = vec![T::zero(); n * cin * h * wd];
        for plane in 0..n * cin {
            let src = &dxp[plane * ph * pw..][..ph * pw];
            let dst = &mut dx[plane * h * wd..][..h * wd];
            for y in 0..h {
                dst[y * wd..][..wd].copy_from_slice(&src[(y + p) * pw + p..][..wd]);
            }
        }
        Some(Tensor::new(vec![n, cin, h, wd], dx)?)
    } else {
        None
    };

    let dw = if need_dw {
        let padded_storage;
        let xp: &[T] = if p == 0 {
            x.data()
        } else {
            padded_storage = zero_pad(x, p);
            &padded_storage
        };
        let mut dw = vec![T::zero(); cout * cin * k * k];
        let fill_co = |co: usize, chunk: &mut [T]| {
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = T::zero();
                        for ni in 0..n {
                            let dplane = &dout[(ni * cout + co) * oh * ow..][..oh * ow];
                            let xplane = &xp[(ni * cin + ci) * ph * pw..][..ph * pw];
                            for oy in 0..oh {
                                let drow = &dplane[oy * ow..][..ow];
                                let base = (oy * stride + ky * dil) * pw + kx * dil;
                                for ox in 0..ow {
                                    acc = acc + drow[ox] * xplane[base + ox * stride];
                                }
                            }
                        }
                        chunk[(ci * k + ky) * k + kx] = acc;
                    }
                }
            }
        };
        let work = cout * cin * k * k * n * oh * ow;
        if work < (1 << 17) || cout < 2 {
            for (co, chunk) in dw.chunks_exact_mut(cin * k * k).enumerate() {
                fill_co(co, chunk);
            }
        } else {
            dw.par_chunks_exact_mut(cin * k * k).enumerate().for_each(|(co, chunk)| fill_co(co, chunk));
        }
        Some(Tensor::new(vec![cout, cin, k, k], dw)?)
    } else {
        None
    };

    let db = if need_db {
        let mut db = vec![T::zero(); cout];
        for ni in 0..n {
            for (co, dbv) in db.iter_mut().enumerate() {
                let dplane = &dout[(ni * cout + co) * oh * ow..][..oh * ow];
                let mut acc = T::zero();
                for v in dplane {
                    acc = acc + *v;
                }
                *dbv = *dbv + acc;
            }
        }
        Some(Tensor::new(vec![cout], db)?)
    } else {
        None
    };

    Ok((dx, dw, db))
}
