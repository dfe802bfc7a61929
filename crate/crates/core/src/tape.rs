//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied through it, in topological
//! order, together with whatever each operation needs for its backward rule.
//! [`Tape::backward`] replays the record in reverse and accumulates gradients
//! for every leaf created with `requires_grad`.
//!
//! A tape is confined to one logical thread; distinct tapes may run
//! concurrently. Gradients do not accumulate across backward calls: running
//! backward a second time on the same tape is an error.

use crate::error::{Error, Result};
use crate::ops::{self, ChannelPoolMode, ConvSpec};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Node {
    Conv2d { x: Var, w: Var, b: Var, out: Var, spec: ConvSpec },
    Prelu { x: Var, slope: Var, out: Var },
    Sigmoid { x: Var, out: Var },
    GlobalAvgPool { x: Var, out: Var },
    ChannelPool { x: Var, out: Var, mode: ChannelPoolMode, argmax: Option<Vec<u32>> },
    AvgPool2 { x: Var, out: Var },
    UpsampleNearest2 { x: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Div { a: Var, b: Var, out: Var },
    ScaleChannels { x: Var, m: Var, out: Var },
    ScaleSpatial { x: Var, m: Var, out: Var },
    ConcatChannels { parts: Vec<Var>, out: Var },
    Clamp { x: Var, out: Var, lo: f64, hi: f64 },
    Abs { x: Var, out: Var },
    Ln { x: Var, out: Var },
    MaxScalar { x: Var, out: Var, c: f64 },
    AddScalar { x: Var, out: Var },
    MulScalar { x: Var, out: Var, c: f64 },
    PowfScalar { x: Var, out: Var, p: f64 },
    MeanAll { x: Var, out: Var },
    SumAll { x: Var, out: Var },
}

/// Computation record for one reverse-mode differentiation pass.
pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Place a tensor on the tape. Gradient is tracked when the tensor was
    /// marked with [`Tensor::with_grad`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires = t.requires_grad();
        self.push(t, requires)
    }

    /// Place a tensor on the tape as a non-differentiated constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.detached(), false)
    }

    fn push(&mut self, t: Tensor<T>, requires: bool) -> Var {
        self.values.push(t);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check(&self, v: Var, op: &'static str) -> Result<()> {
        if v.0 >= self.values.len() {
            return Err(Error::invalid(op, format!("variable {} is not on this tape", v.0)));
        }
        Ok(())
    }

    // -- recorded operations ------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b), spec)?;
        let req = self.requires[x.0] || self.requires[w.0] || self.requires[b.0];
        let out = self.push(y, req);
        self.nodes.push(Node::Conv2d { x, w, b, out, spec });
        Ok(out)
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let y = ops::prelu(self.value(x), self.value(slope))?;
        let req = self.requires[x.0] || self.requires[slope.0];
        let out = self.push(y, req);
        self.nodes.push(Node::Prelu { x, slope, out });
        Ok(out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        let out = self.push(y, self.requires[x.0]);
        self.nodes.push(Node::Sigmoid { x, out });
        out
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        let out = self.push(y, self.requires[x.0]);
        self.nodes.push(Node::GlobalAvgPool { x, out });
        Ok(out)
    }

    pub fn channel_pool(&mut self, x: Var, mode: ChannelPoolMode) -> Result<Var> {
        let (y, argmax) = ops::channel_pool(self.value(x), mode)?;
        let out = self.push(y, self.requires[x.0]);
        self.nodes.push(Node::ChannelPool { x, out, mode, argmax });
        Ok(out)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let y = ops::avg_pool2(self.value(x))?;
        let out = self.push(y, self.requires[x.0]);
        self.nodes.push(Node::AvgPool2 { x, out });
        Ok(out)
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let y = ops::upsample_nearest2(self.value(x))?;
        let out = self.push(y, self.requires[x.0]);
        self.nodes.push(Node::UpsampleNearest2 { x, out });
        Ok(out)
    }

    /// Stride-2 halving convolution. Spatial extents must be even so the
    /// output is exactly half the input.
    pub fn downsample(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (_, _, h, wd) = self.value(x).dims4("downsample")?;
        if h % 2 != 0 || wd % 2 != 0 {
            return Err(Error::shape(
                "downsample",
                self.value(x).shape(),
                &[h / 2, wd / 2],
                "spatial extents must be even to halve",
            ));
        }
        let k = self.value(w).shape()[2];
        self.conv2d(x, w, b, ConvSpec::same(k, 1).with_stride(2))
    }

    /// Nearest-neighbour x2 upsampling followed by a same-padding convolution.
    pub fn upsample(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let up = self.upsample_nearest2(x)?;
        let k = self.value(w).shape()[2];
        self.conv2d(up, w, b, ConvSpec::same(k, 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        let req = self.requires[a.0] || self.requires[b.0];
        let out = self.push(y, req);
        self.nodes.push(Node::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::sub(self.value(a), self.value(b))?;
        let req = self.requires[a.0] || self.requires[b.0];
        let out = self.push(y, req);
        self.nodes.push(Node::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        let req = self.requires[a.0] || self.requires[b.0];
        let out = self.push(y, req);
        self.nodes.push(Node::Mul { a, b, out });
        Ok(out)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::div(self.value(a), self.value(b))?;
        let req = self.requires[a.0] || self.requires[b.0];
        let out = self.push(y, req);
        self.nodes.push(Node::Div { a, b, out });
        Ok(out)
    }

    pub fn scale_channels(&mut self, x: Var, m: Var) -> Result<Var> {
        let y = ops::scale_channels(self.value(x), self.value(m))?;
        let req = self.requires[x.0] || self.requires[m.0];
        let out = self.push(y, req);
        self.nodes.push(Node::ScaleChannels { x, m, out });
        Ok(out)
    }

    pub fn scale_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let y = ops::scale_spatial(self.value(x), self.value(m))?;
        let req = self.requires[x.0] || self.requires[m.0];
        let out = self.push(y, req);
        self.nodes.push(Node::ScaleSpatial { x, m, out });
        Ok(out)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|v| self.value(*v)).collect();
        let y = ops::concat_channels(&tensors)?;
        let req = parts.iter().any(|v| self.requires[v.0]);
        let out = self.push(y, req);
        self.nodes.push(Node::ConcatChannels { parts: parts.to_vec(), out });
        Ok(out)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let y = ops::clamp(self.value(x), T::of(lo), T::of(hi));
        let out = self.push(y, self.requires[x.0]);
        self.nodes.push(Node::Clamp { x, out, lo, hi });
        out
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let y = ops::abs(self.value(x));
        let out = self.push(y, self.requires[x.0]);
        self.nodes.push(Node::Abs { x, out });
        out
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let y = ops::ln(self.value(x))?;
        let out = self.push(y, self.requires[x.0]);
        self.nodes.push(Node::Ln { x, out });
        Ok(out)
    }

    pub fn max_scalar(&mut self, x: Var, c: f64) -> Var {
        let y = ops::max_scalar(self.value(x), T::of(c));
        let out = self.push(y, self.requires[x.0]);
        self.nodes.push(Node::MaxScalar { x, out, c });
        out
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let y = ops::add_scalar(self.value(x), T::of(c));
        let out = self.push(y, self.requires[x.0]);
        self.nodes.push(Node::AddScalar { x, out });
        out
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let y = ops::mul_scalar(self.value(x), T::of(c));
        let out = self.push(y, self.requires[x.0]);
        self.nodes.push(Node::MulScalar { x, out, c });
        out
    }

    pub fn powf_scalar(&mut self, x: Var, p: f64) -> Var {
        let y = ops::powf_scalar(self.value(x), T::of(p));
        let out = self.push(y, self.requires[x.0]);
        self.nodes.push(Node::PowfScalar { x, out, p });
        out
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let y = ops::mean_all(self.value(x));
        let out = self.push(y, self.requires[x.0]);
        self.nodes.push(Node::MeanAll { x, out });
        out
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let y = ops::sum_all(self.value(x));
        let out = self.push(y, self.requires[x.0]);
        self.nodes.push(Node::SumAll { x, out });
        out
    }

    // -- backward -----------------------------------------------------------

    /// Reverse pass from a scalar root. Fills the gradient of every
    /// `requires_grad` leaf reachable from `root`; unreachable leaves keep no
    /// gradient (read as zero via [`Tape::grad_or_zeros`]).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(root, "backward")?;
        if self.backward_done {
            return Err(Error::invalid(
                "backward",
                "gradients already computed on this tape; build a fresh tape instead of accumulating",
            ));
        }
        if self.values[root.0].numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", self.values[root.0].shape()),
            ));
        }
        self.backward_done = true;
        self.grads[root.0] = Some(vec![T::one()]);

        for i in (0..self.nodes.len()).rev() {
            self.backward_node(i);
        }
        Ok(())
    }

    /// Gradient of a variable, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[v.0].shape().to_vec(), g.clone()).expect("gradient shape matches value"))
    }

    /// Gradient of a variable, or zeros when none flowed to it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.values[v.0].shape()))
    }

    fn out_grad(&mut self, out: Var) -> Option<Vec<T>> {
        // Output gradients are finalized before their node is visited
        // (topological order), so taking the buffer is safe and avoids a copy.
        self.grads[out.0].take()
    }

    fn acc(&mut self, v: Var, contribution: impl Iterator<Item = T>) {
        if !self.requires[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (slot, c) in g.iter_mut().zip(contribution) {
                    *slot = *slot + c;
                }
            }
            none => {
                let mut g = vec![T::zero(); self.values[v.0].numel()];
                for (slot, c) in g.iter_mut().zip(contribution) {
                    *slot = c;
                }
                *none = Some(g);
            }
        }
    }

    fn acc_slice(&mut self, v: Var, contribution: &[T]) {
        self.acc(v, contribution.iter().copied());
    }

    fn backward_node(&mut self, i: usize) {
        // Nodes are moved out one at a time so `self` stays free for
        // accumulation; they are pushed back untouched afterwards.
        let node = std::mem::replace(&mut self.nodes[i], Node::MeanAll { x: Var(0), out: Var(0) });
        match &node {
            Node::Conv2d { x, w, b, out, spec } => {
                if let Some(dout) = self.out_grad(*out) {
                    let (dx, dw, db) = ops::conv2d_backward(
                        &self.values[x.0],
                        &self.values[w.0],
                        *spec,
                        &dout,
                        self.requires[x.0],
                        self.requires[w.0],
                        self.requires[b.0],
                    )
                    .expect("shapes validated at forward");
                    if let Some(dx) = dx {
                        self.acc_slice(*x, dx.data());
                    }
                    if let Some(dw) = dw {
                        self.acc_slice(*w, dw.data());
                    }
                    if let Some(db) = db {
                        self.acc_slice(*b, db.data());
                    }
                }
            }
            Node::Prelu { x, slope, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    let (dx, ds) = {
                        let xv = &self.values[x.0];
                        let sv = &self.values[slope.0];
                        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                        let hw = h * w;
                        let shared = sv.numel() == 1;
                        let mut dx = if self.requires[x.0] { Some(vec![T::zero(); xv.numel()]) } else { None };
                        let mut ds = if self.requires[slope.0] { Some(vec![T::zero(); sv.numel()]) } else { None };
                        for ni in 0..n {
                            for ci in 0..c {
                                let slot = if shared { 0 } else { ci };
                                let s = sv.data()[slot];
                                let base = (ni * c + ci) * hw;
                                for k in 0..hw {
                                    let xi = xv.data()[base + k];
                                    if let Some(dx) = dx.as_mut() {
                                        dx[base + k] = dout[base + k] * if xi >= T::zero() { T::one() } else { s };
                                    }
                                    if let Some(ds) = ds.as_mut() {
                                        if xi < T::zero() {
                                            ds[slot] = ds[slot] + dout[base + k] * xi;
                                        }
                                    }
                                }
                            }
                        }
                        (dx, ds)
                    };
                    if let Some(dx) = dx {
                        self.acc_slice(*x, &dx);
                    }
                    if let Some(ds) = ds {
                        self.acc_slice(*slope, &ds);
                    }
                }
            }
            Node::Sigmoid { x, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    let y = self.values[out.0].data().to_vec();
                    self.acc(*x, dout.iter().zip(&y).map(|(&d, &y)| d * y * (T::one() - y)));
                }
            }
            Node::GlobalAvgPool { x, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    let xv = &self.values[x.0];
                    let hw = xv.shape()[2] * xv.shape()[3];
                    let inv = T::of(1.0 / hw as f64);
                    let mut dx = Vec::with_capacity(xv.numel());
                    for &d in &dout {
                        dx.extend(std::iter::repeat(d * inv).take(hw));
                    }
                    self.acc_slice(*x, &dx);
                }
            }
            Node::ChannelPool { x, out, mode, argmax } => {
                if let Some(dout) = self.out_grad(*out) {
                    let xv = &self.values[x.0];
                    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                    let hw = h * w;
                    let mut dx = vec![T::zero(); xv.numel()];
                    match mode {
                        ChannelPoolMode::Mean => {
                            let inv = T::of(1.0 / c as f64);
                            for ni in 0..n {
                                for ci in 0..c {
                                    let base = (ni * c + ci) * hw;
                                    for k in 0..hw {
                                        dx[base + k] = dout[ni * hw + k] * inv;
                                    }
                                }
                            }
                        }
                        ChannelPoolMode::Max => {
                            let arg = argmax.as_ref().expect("argmax saved at forward");
                            for ni in 0..n {
                                for k in 0..hw {
                                    let ci = arg[ni * hw + k] as usize;
                                    dx[(ni * c + ci) * hw + k] = dout[ni * hw + k];
                                }
                            }
                        }
                    }
                    self.acc_slice(*x, &dx);
                }
            }
            Node::AvgPool2 { x, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    let xv = &self.values[x.0];
                    let ov = &self.values[out.0];
                    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                    let (oh, ow) = (ov.shape()[2], ov.shape()[3]);
                    let q = T::of(0.25);
                    let mut dx = vec![T::zero(); xv.numel()];
                    for plane in 0..n * c {
                        let src = &dout[plane * oh * ow..][..oh * ow];
                        let dst = &mut dx[plane * h * w..][..h * w];
                        for y in 0..oh {
                            for xx in 0..ow {
                                let d = src[y * ow + xx] * q;
                                dst[(2 * y) * w + 2 * xx] = d;
                                dst[(2 * y) * w + 2 * xx + 1] = d;
                                dst[(2 * y + 1) * w + 2 * xx] = d;
                                dst[(2 * y + 1) * w + 2 * xx + 1] = d;
                            }
                        }
                    }
                    self.acc_slice(*x, &dx);
                }
            }
            Node::UpsampleNearest2 { x, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    let xv = &self.values[x.0];
                    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                    let ow = 2 * w;
                    let mut dx = vec![T::zero(); xv.numel()];
                    for plane in 0..n * c {
                        let src = &dout[plane * 4 * h * w..][..4 * h * w];
                        let dst = &mut dx[plane * h * w..][..h * w];
                        for y in 0..h {
                            for xx in 0..w {
                                let base = (2 * y) * ow + 2 * xx;
                                dst[y * w + xx] = src[base] + src[base + 1] + src[base + ow] + src[base + ow + 1];
                            }
                        }
                    }
                    self.acc_slice(*x, &dx);
                }
            }
            Node::Add { a, b, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    self.acc_slice(*a, &dout);
                    self.acc_slice(*b, &dout);
                }
            }
            Node::Sub { a, b, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    self.acc_slice(*a, &dout);
                    self.acc(*b, dout.iter().map(|&d| -d));
                }
            }
            Node::Mul { a, b, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    if self.requires[a.0] {
                        let bv = self.values[b.0].data().to_vec();
                        self.acc(*a, dout.iter().zip(&bv).map(|(&d, &v)| d * v));
                    }
                    if self.requires[b.0] {
                        let av = self.values[a.0].data().to_vec();
                        self.acc(*b, dout.iter().zip(&av).map(|(&d, &v)| d * v));
                    }
                }
            }
            Node::Div { a, b, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    if self.requires[a.0] {
                        let bv = self.values[b.0].data().to_vec();
                        self.acc(*a, dout.iter().zip(&bv).map(|(&d, &v)| d / v));
                    }
                    if self.requires[b.0] {
                        let av = self.values[a.0].data().to_vec();
                        let bv = self.values[b.0].data().to_vec();
                        self.acc(
                            *b,
                            dout.iter()
                                .zip(av.iter().zip(&bv))
                                .map(|(&d, (&x, &y))| -d * x / (y * y)),
                        );
                    }
                }
            }
            Node::ScaleChannels { x, m, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    let (dx, dm) = {
                        let xv = &self.values[x.0];
                        let mv = &self.values[m.0];
                        let (n, c) = (xv.shape()[0], xv.shape()[1]);
                        let hw = xv.shape()[2] * xv.shape()[3];
                        let dx = self.requires[x.0].then(|| {
                            let mut dx = Vec::with_capacity(xv.numel());
                            for plane in 0..n * c {
                                let s = mv.data()[plane];
                                dx.extend(dout[plane * hw..][..hw].iter().map(|&d| d * s));
                            }
                            dx
                        });
                        let dm = self.requires[m.0].then(|| {
                            let mut dm = vec![T::zero(); n * c];
                            for (plane, dmv) in dm.iter_mut().enumerate() {
                                let xs = &xv.data()[plane * hw..][..hw];
                                let ds = &dout[plane * hw..][..hw];
                                let mut acc = T::zero();
                                for (xi, di) in xs.iter().zip(ds) {
                                    acc = acc + *xi * *di;
                                }
                                *dmv = acc;
                            }
                            dm
                        });
                        (dx, dm)
                    };
                    if let Some(dx) = dx {
                        self.acc_slice(*x, &dx);
                    }
                    if let Some(dm) = dm {
                        self.acc_slice(*m, &dm);
                    }
                }
            }
            Node::ScaleSpatial { x, m, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    let (dx, dm) = {
                        let xv = &self.values[x.0];
                        let mv = &self.values[m.0];
                        let (n, c) = (xv.shape()[0], xv.shape()[1]);
                        let hw = xv.shape()[2] * xv.shape()[3];
                        let dx = self.requires[x.0].then(|| {
                            let mut dx = Vec::with_capacity(xv.numel());
                            for ni in 0..n {
                                let mp = &mv.data()[ni * hw..][..hw];
                                for ci in 0..c {
                                    let ds = &dout[(ni * c + ci) * hw..][..hw];
                                    dx.extend(ds.iter().zip(mp).map(|(&d, &s)| d * s));
                                }
                            }
                            dx
                        });
                        let dm = self.requires[m.0].then(|| {
                            let mut dm = vec![T::zero(); n * hw];
                            for ni in 0..n {
                                for ci in 0..c {
                                    let xs = &xv.data()[(ni * c + ci) * hw..][..hw];
                                    let ds = &dout[(ni * c + ci) * hw..][..hw];
                                    for k in 0..hw {
                                        dm[ni * hw + k] = dm[ni * hw + k] + xs[k] * ds[k];
                                    }
                                }
                            }
                            dm
                        });
                        (dx, dm)
                    };
                    if let Some(dx) = dx {
                        self.acc_slice(*x, &dx);
                    }
                    if let Some(dm) = dm {
                        self.acc_slice(*m, &dm);
                    }
                }
            }
            Node::ConcatChannels { parts, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    let ov = &self.values[out.0];
                    let (n, ctot, h, w) = (ov.shape()[0], ov.shape()[1], ov.shape()[2], ov.shape()[3]);
                    let hw = h * w;
                    let mut offset = 0usize;
                    for part in parts {
                        let pc = self.values[part.0].shape()[1];
                        if self.requires[part.0] {
                            let mut dp = Vec::with_capacity(n * pc * hw);
                            for ni in 0..n {
                                let base = (ni * ctot + offset) * hw;
                                dp.extend_from_slice(&dout[base..][..pc * hw]);
                            }
                            self.acc_slice(*part, &dp);
                        }
                        offset += pc;
                    }
                }
            }
            Node::Clamp { x, out, lo, hi } => {
                if let Some(dout) = self.out_grad(*out) {
                    let (lo, hi) = (T::of(*lo), T::of(*hi));
                    let xv = self.values[x.0].data().to_vec();
                    self.acc(
                        *x,
                        dout.iter()
                            .zip(&xv)
                            .map(|(&d, &v)| if v >= lo && v <= hi { d } else { T::zero() }),
                    );
                }
            }
            Node::Abs { x, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    let xv = self.values[x.0].data().to_vec();
                    self.acc(
                        *x,
                        dout.iter().zip(&xv).map(|(&d, &v)| {
                            if v > T::zero() {
                                d
                            } else if v < T::zero() {
                                -d
                            } else {
                                T::zero()
                            }
                        }),
                    );
                }
            }
            Node::Ln { x, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    let xv = self.values[x.0].data().to_vec();
                    self.acc(*x, dout.iter().zip(&xv).map(|(&d, &v)| d / v));
                }
            }
            Node::MaxScalar { x, out, c } => {
                if let Some(dout) = self.out_grad(*out) {
                    let c = T::of(*c);
                    let xv = self.values[x.0].data().to_vec();
                    self.acc(
                        *x,
                        dout.iter().zip(&xv).map(|(&d, &v)| if v >= c { d } else { T::zero() }),
                    );
                }
            }
            Node::AddScalar { x, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    self.acc_slice(*x, &dout);
                }
            }
            Node::MulScalar { x, out, c } => {
                if let Some(dout) = self.out_grad(*out) {
                    let c = T::of(*c);
                    self.acc(*x, dout.iter().map(|&d| d * c));
                }
            }
            Node::PowfScalar { x, out, p } => {
                if let Some(dout) = self.out_grad(*out) {
                    let p = T::of(*p);
                    let xv = self.values[x.0].data().to_vec();
                    self.acc(
                        *x,
                        dout.iter().zip(&xv).map(|(&d, &v)| d * p * v.powf(p - T::one())),
                    );
                }
            }
            Node::MeanAll { x, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    let n = self.values[x.0].numel();
                    let d = dout[0] * T::of(1.0 / n as f64);
                    self.acc(*x, std::iter::repeat(d).take(n));
                }
            }
            Node::SumAll { x, out } => {
                if let Some(dout) = self.out_grad(*out) {
                    let n = self.values[x.0].numel();
                    let d = dout[0];
                    self.acc(*x, std::iter::repeat(d).take(n));
                }
            }
        }
        self.nodes[i] = node;
    }
}
