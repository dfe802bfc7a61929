//! Structural building blocks. Each block knows three things: the parameters
//! it owns (`collect`), how to run itself on a tape (`apply`), and the layer
//! walk it contributes to the analytic cost plan (`describe`). `apply` and
//! `describe` must stay in lockstep op for op; the instrumented-versus-analytic
//! equality test enforces this.

use super::{ArchConfig, Binding, Init, ParamSpec};
use crate::complexity::{LayerDesc, Plan, Shape4};
use crate::error::{Error, Result};
use crate::ops::{ChannelPoolMode, ConvSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

// Fan-in init gains by layer role (variance units). Convs feeding a PReLU use
// the rectifier-corrected gain; linear positions use 1; convs that end a
// residual branch are damped so activation variance stays bounded through the
// block stack at init; the head is damped so the pre-clamp output starts
// inside the representable range.
const GAIN_PRELU: f64 = 2.0 / (1.0 + 0.25 * 0.25);
const GAIN_LINEAR: f64 = 1.0;
const RESIDUAL_DAMP: f64 = 0.1;
const HEAD_DAMP: f64 = 0.25;

pub(super) struct Conv {
    name: String,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    spec: ConvSpec,
    init_gain: f64,
}

impl Conv {
    pub(super) fn same(name: String, in_ch: usize, out_ch: usize, kernel: usize, dilation: usize) -> Self {
        Conv {
            name,
            in_ch,
            out_ch,
            kernel,
            spec: ConvSpec::same(kernel, dilation),
            init_gain: GAIN_LINEAR,
        }
    }

    pub(super) fn strided(name: String, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Conv {
            name,
            in_ch,
            out_ch,
            kernel,
            spec: ConvSpec::same(kernel, 1).with_stride(2),
            init_gain: GAIN_LINEAR,
        }
    }

    fn with_gain(mut self, gain: f64) -> Self {
        self.init_gain = gain;
        self
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub(super) fn collect(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: self.weight_name(),
            shape: vec![self.out_ch, self.in_ch, self.kernel, self.kernel],
            init: Init::FanInNormal {
                fan_in: self.in_ch * self.kernel * self.kernel,
                gain: self.init_gain,
            },
        });
        out.push(ParamSpec {
            name: self.bias_name(),
            shape: vec![self.out_ch],
            init: Init::Zeros,
        });
    }

    pub(super) fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let w = bind.var(&self.weight_name())?;
        let b = bind.var(&self.bias_name())?;
        tape.conv2d(x, w, b, self.spec)
    }

    pub(super) fn describe(&self, plan: &mut Plan, input: Shape4) -> Result<Shape4> {
        plan.push(
            self.name.clone(),
            LayerDesc::Conv2d {
                in_ch: self.in_ch,
                out_ch: self.out_ch,
                kernel: self.kernel,
                stride: self.spec.stride,
                padding: self.spec.padding,
                dilation: self.spec.dilation,
            },
            input,
        )
    }
}

pub(super) struct Prelu {
    name: String,
    channels: usize,
}

impl Prelu {
    pub(super) fn new(name: String, channels: usize) -> Self {
        Prelu { name, channels }
    }

    fn slope_name(&self) -> String {
        format!("{}.slope", self.name)
    }

    pub(super) fn collect(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: self.slope_name(),
            shape: vec![self.channels],
            init: Init::Const(0.25),
        });
    }

    pub(super) fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let s = bind.var(&self.slope_name())?;
        tape.prelu(x, s)
    }

    pub(super) fn describe(&self, plan: &mut Plan, input: Shape4) -> Result<Shape4> {
        plan.push(self.name.clone(), LayerDesc::PRelu { channels: self.channels }, input)
    }
}

/// Residual processing block: conv-PReLU-conv plus, when attention is on, a
/// squeeze-style channel gate and a channel-pooled spatial gate whose outputs
/// are summed before the skip.
pub(super) struct ProcBlock {
    conv1: Conv,
    act: Prelu,
    conv2: Conv,
    attention: Option<BlockAttention>,
    width: usize,
    name: String,
}

struct BlockAttention {
    ca: Conv,
    sa: Conv,
}

impl ProcBlock {
    pub(super) fn new(name: String, width: usize, with_attention: bool) -> Self {
        ProcBlock {
            conv1: Conv::same(format!("{name}.conv1"), width, width, 3, 1).with_gain(GAIN_PRELU),
            act: Prelu::new(format!("{name}.prelu"), width),
            conv2: Conv::same(format!("{name}.conv2"), width, width, 3, 1).with_gain(RESIDUAL_DAMP),
            attention: with_attention.then(|| BlockAttention {
                ca: Conv::same(format!("{name}.ca.conv"), width, width, 1, 1),
                sa: Conv::same(format!("{name}.sa.conv"), 2, 1, 3, 1),
            }),
            width,
            name,
        }
    }

    pub(super) fn collect(&self, out: &mut Vec<ParamSpec>) {
        self.conv1.collect(out);
        self.act.collect(out);
        self.conv2.collect(out);
        if let Some(at) = &self.attention {
            at.ca.collect(out);
            at.sa.collect(out);
        }
    }

    fn check_width(&self, channels: usize) -> Result<()> {
        if channels != self.width {
            return Err(Error::shape(
                "block",
                &[channels],
                &[self.width],
                format!("{} expects {} channels", self.name, self.width),
            ));
        }
        Ok(())
    }

    pub(super) fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        self.check_width(tape.value(x).shape()[1])?;
        let t = self.conv1.apply(tape, bind, x)?;
        let t = self.act.apply(tape, bind, t)?;
        let t = self.conv2.apply(tape, bind, t)?;
        let y = match &self.attention {
            None => t,
            Some(at) => {
                let pooled = tape.global_avg_pool(t)?;
                let ca_map = at.ca.apply(tape, bind, pooled)?;
                let ca_map = tape.sigmoid(ca_map);
                let ca_t = tape.scale_channels(t, ca_map)?;

                let mean = tape.channel_pool(t, ChannelPoolMode::Mean)?;
                let max = tape.channel_pool(t, ChannelPoolMode::Max)?;
                let stacked = tape.concat_channels(&[mean, max])?;
                let sa_map = at.sa.apply(tape, bind, stacked)?;
                let sa_map = tape.sigmoid(sa_map);
                let sa_t = tape.scale_spatial(t, sa_map)?;

                tape.add(ca_t, sa_t)?
            }
        };
        tape.add(x, y)
    }

    pub(super) fn describe(&self, plan: &mut Plan, input: Shape4) -> Result<Shape4> {
        let t = self.conv1.describe(plan, input)?;
        let t = self.act.describe(plan, t)?;
        let t = self.conv2.describe(plan, t)?;
        if let Some(at) = &self.attention {
            let pooled = plan.push(format!("{}.ca.gap", self.name), LayerDesc::GlobalAvgPool, t)?;
            let ca_map = at.ca.describe(plan, pooled)?;
            plan.push(format!("{}.ca.sigmoid", self.name), LayerDesc::Sigmoid, ca_map)?;
            plan.push(format!("{}.ca.scale", self.name), LayerDesc::ScaleChannels, t)?;

            let mean = plan.push(format!("{}.sa.mean", self.name), LayerDesc::ChannelPoolMean, t)?;
            plan.push(format!("{}.sa.max", self.name), LayerDesc::ChannelPoolMax, t)?;
            let stacked = plan.push(
                format!("{}.sa.concat", self.name),
                LayerDesc::ConcatChannels { extra_channels: 1 },
                mean,
            )?;
            let sa_map = at.sa.describe(plan, stacked)?;
            plan.push(format!("{}.sa.sigmoid", self.name), LayerDesc::Sigmoid, sa_map)?;
            plan.push(format!("{}.sa.scale", self.name), LayerDesc::ScaleSpatial, t)?;

            plan.push(format!("{}.combine", self.name), LayerDesc::Add, t)?;
        }
        plan.push(format!("{}.skip", self.name), LayerDesc::Add, t)
    }
}

/// Enhancement block of the flat chain: parallel dilated branches, a 1x1
/// merge, a conv pair with a local skip, a channel gate, and the block skip.
pub(super) struct EamBlock {
    branches: Vec<(Conv, Prelu)>,
    merge: Conv,
    pair1: Conv,
    pair_act: Prelu,
    pair2: Conv,
    ca: Conv,
    width: usize,
    name: String,
}

impl EamBlock {
    pub(super) fn new(name: String, width: usize, dilations: &[usize]) -> Self {
        let branches = dilations
            .iter()
            .enumerate()
            .map(|(j, &d)| {
                (
                    Conv::same(format!("{name}.branch{j}.conv"), width, width, 3, d).with_gain(GAIN_PRELU),
                    Prelu::new(format!("{name}.branch{j}.prelu"), width),
                )
            })
            .collect();
        EamBlock {
            branches,
            merge: Conv::same(format!("{name}.merge"), width * dilations.len(), width, 1, 1).with_gain(RESIDUAL_DAMP),
            pair1: Conv::same(format!("{name}.pair1"), width, width, 3, 1).with_gain(GAIN_PRELU),
            pair_act: Prelu::new(format!("{name}.pair.prelu"), width),
            pair2: Conv::same(format!("{name}.pair2"), width, width, 3, 1).with_gain(RESIDUAL_DAMP),
            ca: Conv::same(format!("{name}.ca.conv"), width, width, 1, 1),
            width,
            name,
        }
    }

    pub(super) fn collect(&self, out: &mut Vec<ParamSpec>) {
        for (c, p) in &self.branches {
            c.collect(out);
            p.collect(out);
        }
        self.merge.collect(out);
        self.pair1.collect(out);
        self.pair_act.collect(out);
        self.pair2.collect(out);
        self.ca.collect(out);
    }

    pub(super) fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        if tape.value(x).shape()[1] != self.width {
            return Err(Error::shape(
                "eam_block",
                &[tape.value(x).shape()[1]],
                &[self.width],
                format!("{} expects {} channels", self.name, self.width),
            ));
        }
        let mut outs = Vec::with_capacity(self.branches.len());
        for (conv, act) in &self.branches {
            let b = conv.apply(tape, bind, x)?;
            outs.push(act.apply(tape, bind, b)?);
        }
        let stacked = tape.concat_channels(&outs)?;
        let merged = self.merge.apply(tape, bind, stacked)?;

        let u = self.pair1.apply(tape, bind, merged)?;
        let u = self.pair_act.apply(tape, bind, u)?;
        let u = self.pair2.apply(tape, bind, u)?;
        let local = tape.add(merged, u)?;

        let pooled = tape.global_avg_pool(local)?;
        let gate = self.ca.apply(tape, bind, pooled)?;
        let gate = tape.sigmoid(gate);
        let gated = tape.scale_channels(local, gate)?;

        tape.add(x, gated)
    }

    pub(super) fn describe(&self, plan: &mut Plan, input: Shape4) -> Result<Shape4> {
        let mut branch_out = input;
        for (conv, act) in &self.branches {
            let b = conv.describe(plan, input)?;
            branch_out = act.describe(plan, b)?;
        }
        let stacked = plan.push(
            format!("{}.concat", self.name),
            LayerDesc::ConcatChannels {
                extra_channels: (self.branches.len() - 1) * self.width,
            },
            branch_out,
        )?;
        let merged = self.merge.describe(plan, stacked)?;

        let u = self.pair1.describe(plan, merged)?;
        let u = self.pair_act.describe(plan, u)?;
        let u = self.pair2.describe(plan, u)?;
        let local = plan.push(format!("{}.local_skip", self.name), LayerDesc::Add, u)?;

        let pooled = plan.push(format!("{}.ca.gap", self.name), LayerDesc::GlobalAvgPool, local)?;
        let gate = self.ca.describe(plan, pooled)?;
        plan.push(format!("{}.ca.sigmoid", self.name), LayerDesc::Sigmoid, gate)?;
        plan.push(format!("{}.ca.scale", self.name), LayerDesc::ScaleChannels, local)?;

        plan.push(format!("{}.skip", self.name), LayerDesc::Add, local)
    }
}

struct DecLevel {
    up: Conv,
    merge: Conv,
    blocks: Vec<ProcBlock>,
}

pub(super) struct Model {
    stem: Conv,
    stem_act: Prelu,
    eam: Vec<EamBlock>,
    enc: Vec<Vec<ProcBlock>>,
    down: Vec<Conv>,
    dec: Vec<DecLevel>,
    head: Conv,
    pub(super) config: ArchConfig,
}

impl Model {
    pub(super) fn new(config: ArchConfig) -> Self {
        let widths = &config.unet_widths;
        let levels = config.unet_levels;
        let sca = config.variant.includes_sca();

        let eam = if config.variant.includes_eam() {
            (0..config.eam_count)
                .map(|i| EamBlock::new(format!("eam.{i}"), config.stem_width, &config.eam_dilations))
                .collect()
        } else {
            Vec::new()
        };

        let enc = (0..levels)
            .map(|l| {
                (0..config.sca_per_level)
                    .map(|s| ProcBlock::new(format!("enc{l}.block{s}"), widths[l], sca))
                    .collect()
            })
            .collect();

        let down = (0..levels - 1)
            .map(|l| Conv::strided(format!("down{l}"), widths[l], widths[l + 1], 3))
            .collect();

        let dec = (0..levels - 1)
            .map(|l| DecLevel {
                up: Conv::same(format!("dec{l}.up"), widths[l + 1], widths[l], 3, 1),
                merge: Conv::same(format!("dec{l}.merge"), 2 * widths[l], widths[l], 3, 1),
                blocks: (0..config.sca_per_level)
                    .map(|s| ProcBlock::new(format!("dec{l}.block{s}"), widths[l], sca))
                    .collect(),
            })
            .collect();

        Model {
            stem: Conv::same("stem.conv".into(), 1, config.stem_width, 3, 1).with_gain(GAIN_PRELU),
            stem_act: Prelu::new("stem.prelu".into(), config.stem_width),
            eam,
            enc,
            down,
            dec,
            head: Conv::same("head.conv".into(), widths[0], 3, 3, 1).with_gain(HEAD_DAMP),
            config,
        }
    }

    pub(super) fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        self.stem.collect(out);
        self.stem_act.collect(out);
        for b in &self.eam {
            b.collect(out);
        }
        for (l, level) in self.enc.iter().enumerate() {
            for b in level {
                b.collect(out);
            }
            if l + 1 < self.enc.len() {
                self.down[l].collect(out);
            }
        }
        for level in self.dec.iter().rev() {
            level.up.collect(out);
            level.merge.collect(out);
            for b in &level.blocks {
                b.collect(out);
            }
        }
        self.head.collect(out);
    }

    pub(super) fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, raw: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(raw).dims4("forward")?;
        if c != 1 {
            return Err(Error::invalid("forward", format!("raw input must have 1 channel, got {c}")));
        }
        self.config.validate_input(h, w)?;
        let (lo, hi) = (tape.value(raw).min_value(), tape.value(raw).max_value());
        if lo < T::zero() || hi > T::one() {
            return Err(Error::invalid(
                "forward",
                format!("raw values must lie in [0,1], found range [{lo}, {hi}]"),
            ));
        }

        let mut cur = self.stem.apply(tape, bind, raw)?;
        cur = self.stem_act.apply(tape, bind, cur)?;
        for b in &self.eam {
            cur = b.apply(tape, bind, cur)?;
        }

        let levels = self.enc.len();
        let mut skips = Vec::with_capacity(levels - 1);
        for l in 0..levels {
            for b in &self.enc[l] {
                cur = b.apply(tape, bind, cur)?;
            }
            if l + 1 < levels {
                skips.push(cur);
                cur = self.down[l].apply(tape, bind, cur)?;
            }
        }
        for l in (0..levels - 1).rev() {
            let up = tape.upsample_nearest2(cur)?;
            cur = self.dec[l].up.apply(tape, bind, up)?;
            cur = tape.concat_channels(&[skips[l], cur])?;
            cur = self.dec[l].merge.apply(tape, bind, cur)?;
            for b in &self.dec[l].blocks {
                cur = b.apply(tape, bind, cur)?;
            }
        }

        let out = self.head.apply(tape, bind, cur)?;
        Ok(tape.clamp(out, 0.0, 1.0))
    }

    pub(super) fn describe(&self, n: usize, h: usize, w: usize) -> Result<Plan> {
        self.config.validate_input(h, w)?;
        let mut plan = Plan::new();
        let mut cur = self.stem.describe(&mut plan, [n, 1, h, w])?;
        cur = self.stem_act.describe(&mut plan, cur)?;
        for b in &self.eam {
            cur = b.describe(&mut plan, cur)?;
        }

        let levels = self.enc.len();
        let mut skips = Vec::with_capacity(levels - 1);
        for l in 0..levels {
            for b in &self.enc[l] {
                cur = b.describe(&mut plan, cur)?;
            }
            if l + 1 < levels {
                skips.push(cur);
                cur = self.down[l].describe(&mut plan, cur)?;
            }
        }
        for l in (0..levels - 1).rev() {
            let up = plan.push(format!("dec{l}.up.nearest"), LayerDesc::UpsampleNearest2, cur)?;
            cur = self.dec[l].up.describe(&mut plan, up)?;
            cur = plan.push(
                format!("dec{l}.concat"),
                LayerDesc::ConcatChannels { extra_channels: cur[1] },
                skips[l],
            )?;
            cur = self.dec[l].merge.describe(&mut plan, cur)?;
            for b in &self.dec[l].blocks {
                cur = b.describe(&mut plan, cur)?;
            }
        }

        let out = self.head.describe(&mut plan, cur)?;
        plan.push("head.clamp", LayerDesc::Clamp, out)?;
        Ok(plan)
    }
}
