//! Analytic multiply-accumulate and parameter accounting.
//!
//! Counting convention: one MAC is one composite multiply-accumulate (not two
//! FLOPs). A convolution over an `[N,Cin,H,W]` input costs
//! `N*H'*W'*Cout*Cin*k^2` MACs and `Cout*Cin*k^2 + Cout` parameters; the bias
//! addition is not counted as a MAC. Activations, pools and elementwise ops
//! are charged one composite op per output element (their share is under 1%).
//! Pure data movement (channel concat, nearest-neighbour upsampling) costs
//! nothing.
//!
//! The analytic walk here never executes kernels; its independent counterpart
//! is the instrumented tally in [`crate::ops::macs`], and the two are compared
//! for exact equality in tests.

use crate::arch::{ArchConfig, DelNet};
use crate::error::{Error, Result};
use crate::ops::{conv_out_extent, ConvSpec};

/// Shape as it flows through the counter; batch extent may be zero.
pub type Shape4 = [usize; 4];

/// One countable operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerDesc {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    /// `channels` is the slope parameter count (1 when shared).
    PRelu { channels: usize },
    Sigmoid,
    GlobalAvgPool,
    ChannelPoolMean,
    ChannelPoolMax,
    UpsampleNearest2,
    /// Channels appended to the current branch by the other concat operands.
    ConcatChannels { extra_channels: usize },
    Add,
    ScaleChannels,
    ScaleSpatial,
    Clamp,
}

/// Counted cost of one layer applied to one input shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub mult_adds: u64,
    pub params: u64,
    pub out_shape: Shape4,
}

/// Analytic cost of `desc` applied to `input`.
pub fn count_layer(desc: &LayerDesc, input: Shape4) -> Result<LayerCount> {
    let [n, c, h, w] = input;
    let numel = (n * c * h * w) as u64;
    let count = match *desc {
        LayerDesc::Conv2d { in_ch, out_ch, kernel, stride, padding, dilation } => {
            if in_ch != c {
                return Err(Error::shape(
                    "count_layer",
                    &input,
                    &[out_ch, in_ch, kernel, kernel],
                    "input channels do not match layer",
                ));
            }
            let spec = ConvSpec { stride, padding, dilation };
            let oh = conv_out_extent(h, kernel, spec)
                .ok_or_else(|| Error::invalid("count_layer", format!("conv output empty for input {h}x{w}")))?;
            let ow = conv_out_extent(w, kernel, spec)
                .ok_or_else(|| Error::invalid("count_layer", format!("conv output empty for input {h}x{w}")))?;
            LayerCount {
                mult_adds: (n * out_ch * oh * ow) as u64 * (in_ch * kernel * kernel) as u64,
                params: (out_ch * in_ch * kernel * kernel + out_ch) as u64,
                out_shape: [n, out_ch, oh, ow],
            }
        }
        LayerDesc::PRelu { channels } => LayerCount {
            mult_adds: numel,
            params: channels as u64,
            out_shape: input,
        },
        LayerDesc::Sigmoid | LayerDesc::Add | LayerDesc::ScaleChannels | LayerDesc::ScaleSpatial | LayerDesc::Clamp => {
            LayerCount { mult_adds: numel, params: 0, out_shape: input }
        }
        LayerDesc::GlobalAvgPool => LayerCount {
            mult_adds: (n * c) as u64,
            params: 0,
            out_shape: [n, c, 1, 1],
        },
        LayerDesc::ChannelPoolMean | LayerDesc::ChannelPoolMax => LayerCount {
            mult_adds: (n * h * w) as u64,
            params: 0,
            out_shape: [n, 1, h, w],
        },
        LayerDesc::UpsampleNearest2 => LayerCount {
            mult_adds: 0,
            params: 0,
            out_shape: [n, c, 2 * h, 2 * w],
        },
        LayerDesc::ConcatChannels { extra_channels } => LayerCount {
            mult_adds: 0,
            params: 0,
            out_shape: [n, c + extra_channels, h, w],
        },
    };
    Ok(count)
}

/// One row of a [`ComplexityReport`].
#[derive(Clone, Debug)]
pub struct LayerEntry {
    pub name: String,
    pub mult_adds: u64,
    pub params: u64,
}

/// Per-layer and total cost of one model at one input size.
#[derive(Clone, Debug)]
pub struct ComplexityReport {
    pub per_layer: Vec<LayerEntry>,
    pub total_mult_adds: u64,
    pub total_params: u64,
    pub input_shape: Vec<usize>,
}

impl ComplexityReport {
    pub fn mult_adds_tera(&self) -> f64 {
        self.total_mult_adds as f64 / 1e12
    }

    pub fn params_mega(&self) -> f64 {
        self.total_params as f64 / 1e6
    }
}

/// Ordered layer walk used by the architecture's `describe` methods.
#[derive(Default)]
pub struct Plan {
    entries: Vec<LayerEntry>,
}

impl Plan {
    pub fn new() -> Self {
        Plan { entries: Vec::new() }
    }

    /// Count `desc` on `input`, record it under `name`, return the output
    /// shape for chaining.
    pub fn push(&mut self, name: impl Into<String>, desc: LayerDesc, input: Shape4) -> Result<Shape4> {
        let c = count_layer(&desc, input)?;
        self.entries.push(LayerEntry {
            name: name.into(),
            mult_adds: c.mult_adds,
            params: c.params,
        });
        Ok(c.out_shape)
    }

    pub fn into_report(self, input_shape: Vec<usize>) -> ComplexityReport {
        let total_mult_adds = self.entries.iter().map(|e| e.mult_adds).sum();
        let total_params = self.entries.iter().map(|e| e.params).sum();
        ComplexityReport {
            per_layer: self.entries,
            total_mult_adds,
            total_params,
            input_shape,
        }
    }
}

/// Analytic cost of a full model forward at `H x W` (batch 1), walking the
/// exact layer sequence `forward` executes.
pub fn count_model(config: &ArchConfig, h: usize, w: usize) -> Result<ComplexityReport> {
    let model = DelNet::new(config.clone())?;
    let plan = model.plan(1, h, w)?;
    Ok(plan.into_report(vec![1, 1, h, w]))
}

/// Total learnable scalars of a configuration (input-size independent).
pub fn count_params(config: &ArchConfig) -> Result<u64> {
    let d = config.min_divisor();
    Ok(count_model(config, d, d)?.total_params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_formula_matches_hand_computation() {
        // 3x3 conv, 1 -> 16 channels, 448x448, same padding.
        let desc = LayerDesc::Conv2d { in_ch: 1, out_ch: 16, kernel: 3, stride: 1, padding: 1, dilation: 1 };
        let c = count_layer(&desc, [1, 1, 448, 448]).unwrap();
        assert_eq!(c.mult_adds, 448 * 448 * 16 * 9);
        assert_eq!(c.params, 16 * 9 + 16);
        assert_eq!(c.out_shape, [1, 16, 448, 448]);
    }

    #[test]
    fn pointwise_conv_on_unit_spatial() {
        let c = 32usize;
        let desc = LayerDesc::Conv2d { in_ch: c, out_ch: c, kernel: 1, stride: 1, padding: 0, dilation: 1 };
        let got = count_layer(&desc, [1, c, 1, 1]).unwrap();
        assert_eq!(got.mult_adds, (c * c) as u64);
        assert_eq!(got.params, (c * c + c) as u64);
    }

    #[test]
    fn empty_batch_costs_nothing() {
        let desc = LayerDesc::Conv2d { in_ch: 4, out_ch: 8, kernel: 3, stride: 1, padding: 1, dilation: 1 };
        let got = count_layer(&desc, [0, 4, 16, 16]).unwrap();
        assert_eq!(got.mult_adds, 0);
        assert_eq!(count_layer(&LayerDesc::Sigmoid, [0, 4, 16, 16]).unwrap().mult_adds, 0);
    }

    #[test]
    fn conv_macs_scale_linearly_in_spatial_extent() {
        let desc = LayerDesc::Conv2d { in_ch: 8, out_ch: 8, kernel: 3, stride: 1, padding: 1, dilation: 1 };
        let a = count_layer(&desc, [1, 8, 64, 32]).unwrap().mult_adds;
        let b = count_layer(&desc, [1, 8, 128, 32]).unwrap().mult_adds;
        assert_eq!(2 * a, b);
    }
}
