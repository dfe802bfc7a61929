//! Elementwise and broadcast kernels.

use super::macs;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape(), "operands must have equal shapes"));
    }
    Ok(())
}

fn zip<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    macs::add(a.numel() as u64);
    let t = Tensor::new(a.shape().to_vec(), data)?;
    t.debug_assert_finite(op);
    Ok(t)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip("mul", a, b, |x, y| x * y)
}

/// Elementwise division. Denominators must be bounded away from zero.
pub fn div<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip("div", a, b, |x, y| x / y)
}

/// Multiply `[N,C,H,W]` features by a per-channel map `[N,C,1,1]`.
pub fn scale_channels<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("scale_channels")?;
    if m.shape() != [n, c, 1, 1] {
        return Err(Error::shape("scale_channels", x.shape(), m.shape(), "map must be [N,C,1,1]"));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(x.numel());
    for (plane, chunk) in x.data().chunks_exact(hw).enumerate() {
        let s = m.data()[plane];
        data.extend(chunk.iter().map(|&v| v * s));
    }
    macs::add(x.numel() as u64);
    let t = Tensor::new(x.shape().to_vec(), data)?;
    t.debug_assert_finite("scale_channels");
    Ok(t)
}

/// Multiply `[N,C,H,W]` features by a per-pixel map `[N,1,H,W]`.
pub fn scale_spatial<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("scale_spatial")?;
    if m.shape() != [n, 1, h, w] {
        return Err(Error::shape("scale_spatial", x.shape(), m.shape(), "map must be [N,1,H,W]"));
    }
    let hw = h * w;
    let md = m.data();
    let mut data = Vec::with_capacity(x.numel());
    for ni in 0..n {
        let mplane = &md[ni * hw..][..hw];
        for ci in 0..c {
            let xplane = &x.data()[(ni * c + ci) * hw..][..hw];
            data.extend(xplane.iter().zip(mplane).map(|(&v, &s)| v * s));
        }
    }
    macs::add(x.numel() as u64);
    let t = Tensor::new(x.shape().to_vec(), data)?;
    t.debug_assert_finite("scale_spatial");
    Ok(t)
}

/// Stack rank-4 tensors along the channel axis in argument order.
///
/// Pure data movement: contributes no multiply-accumulates.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::invalid("concat_channels", "no operands"));
    }
    let (n, _, h, w) = parts[0].dims4("concat_channels")?;
    let mut cs = Vec::with_capacity(parts.len());
    for part in parts {
        let (pn, pc, ph, pw) = part.dims4("concat_channels")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                parts[0].shape(),
                part.shape(),
                "non-channel extents must agree",
            ));
        }
        cs.push(pc);
    }
    let ctot: usize = cs.iter().sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * ctot * hw);
    for ni in 0..n {
        for (part, &pc) in parts.iter().zip(&cs) {
            data.extend_from_slice(&part.data()[ni * pc * hw..][..pc * hw]);
        }
    }
    Tensor::new(vec![n, ctot, h, w], data)
}

/// Parametric ReLU with a per-channel `[C]` or shared `[1]` slope.
pub fn prelu<T: Scalar>(x: &Tensor<T>, slope: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("prelu")?;
    if slope.rank() != 1 || (slope.numel() != c && slope.numel() != 1) {
        return Err(Error::shape("prelu", x.shape(), slope.shape(), "slope must be [C] or [1]"));
    }
    let shared = slope.numel() == 1;
    let hw = h * w;
    let mut data = Vec::with_capacity(x.numel());
    for ni in 0..n {
        for ci in 0..c {
            let s = slope.data()[if shared { 0 } else { ci }];
            let plane = &x.data()[(ni * c + ci) * hw..][..hw];
            data.extend(plane.iter().map(|&v| if v >= T::zero() { v } else { s * v }));
        }
    }
    macs::add(x.numel() as u64);
    let t = Tensor::new(x.shape().to_vec(), data)?;
    t.debug_assert_finite("prelu");
    Ok(t)
}

fn map_op<T: Scalar>(op: &'static str, x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    macs::add(x.numel() as u64);
    let t = x.map(f);
    t.debug_assert_finite(op);
    t
}

/// Numerically stable logistic function; no overflow for any finite input.
pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map_op("sigmoid", x, sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn abs<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map_op("abs", x, |v| v.abs())
}

/// Natural logarithm; rejects non-positive inputs instead of producing
/// non-finite values. Pair with [`max_scalar`] to floor the domain.
pub fn ln<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.min_value() <= T::zero() {
        return Err(Error::invalid("ln", format!("requires positive input, min is {}", x.min_value())));
    }
    Ok(map_op("ln", x, |v| v.ln()))
}

pub fn max_scalar<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    map_op("max_scalar", x, |v| if v >= c { v } else { c })
}

pub fn add_scalar<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    map_op("add_scalar", x, |v| v + c)
}

pub fn mul_scalar<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    map_op("mul_scalar", x, |v| v * c)
}

/// Elementwise power with a fixed exponent; inputs must be positive when the
/// exponent is fractional.
pub fn powf_scalar<T: Scalar>(x: &Tensor<T>, p: T) -> Tensor<T> {
    map_op("powf_scalar", x, |v| v.powf(p))
}

pub fn clamp<T: Scalar>(x: &Tensor<T>, lo: T, hi: T) -> Tensor<T> {
    map_op("clamp", x, |v| if v < lo { lo } else if v > hi { hi } else { v })
}

/// Mean over all elements, as a rank-0 scalar tensor.
pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let inv = T::of(1.0 / x.numel() as f64);
    let mut acc = T::zero();
    for v in x.data() {
        acc = acc + *v;
    }
    macs::add(1);
    Tensor::scalar(acc * inv)
}

/// Sum over all elements, as a rank-0 scalar tensor.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for v in x.data() {
        acc = acc + *v;
    }
    macs::add(1);
    Tensor::scalar(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_zero_and_mul_one_are_identities() {
        let a = Tensor::<f64>::new(vec![2, 3], vec![1.0, -2.0, 3.0, 4.0, -5.0, 6.0]).unwrap();
        let zero = Tensor::zeros(&[2, 3]);
        let one = Tensor::full(&[2, 3], 1.0);
        assert_eq!(add(&a, &zero).unwrap().data(), a.data());
        assert_eq!(mul(&a, &one).unwrap().data(), a.data());
    }

    #[test]
    fn broadcast_channel_map_halves_values() {
        let x = Tensor::<f64>::full(&[1, 2, 2, 2], 3.0);
        let m = Tensor::full(&[1, 2, 1, 1], 0.5);
        let y = scale_channels(&x, &m).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
        let sm = Tensor::full(&[1, 1, 2, 2], 0.5);
        let y = scale_spatial(&x, &sm).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn concat_keeps_argument_order() {
        let a = Tensor::<f32>::full(&[1, 2, 2, 2], 1.0);
        let b = Tensor::<f32>::full(&[1, 3, 2, 2], 2.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[1, 5, 2, 2]);
        assert!(y.data()[..8].iter().all(|&v| v == 1.0));
        assert!(y.data()[8..].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let a = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let b = Tensor::<f32>::zeros(&[1, 1, 3, 2]);
        assert!(concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn prelu_examples() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 2], vec![2.0, -4.0]).unwrap();
        let s = Tensor::new(vec![1], vec![0.25]).unwrap();
        let y = prelu(&x, &s).unwrap();
        assert_eq!(y.data(), &[2.0, -1.0]);
        // Slope 1 makes it the identity map.
        let s1 = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert_eq!(prelu(&x, &s1).unwrap().data(), x.data());
    }

    #[test]
    fn sigmoid_is_stable_and_antisymmetric() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 3], vec![0.0, 800.0, -800.0]).unwrap();
        let y = sigmoid(&x);
        assert_eq!(y.data()[0], 0.5);
        assert_eq!(y.data()[1], 1.0);
        assert_eq!(y.data()[2], 0.0);
        for v in [-3.0f64, -0.5, 0.1, 7.0] {
            let a = sigmoid_scalar(v);
            let b = sigmoid_scalar(-v);
            assert!((a + b - 1.0).abs() < 1e-15, "antisymmetry at {v}");
        }
    }

    #[test]
    fn ln_rejects_nonpositive() {
        let x = Tensor::<f64>::new(vec![2], vec![1.0, 0.0]).unwrap();
        assert!(ln(&x).is_err());
    }

    #[test]
    fn reductions() {
        let x = Tensor::<f64>::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mean_all(&x).item(), 2.5);
        assert_eq!(sum_all(&x).item(), 10.0);
    }
}
