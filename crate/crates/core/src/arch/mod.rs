//! The RAW-to-sRGB model: a stem convolution, a flat chain of enhancement
//! attention blocks at full resolution, a modified UNet whose levels are built
//! from spatial-and-channel attention blocks, and a 3-channel output head
//! clamped to [0,1]. Ablation variants drop the attention paths or the flat
//! chain.

mod blocks;
pub mod io;

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::complexity::Plan;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub use io::{load_config, load_params, save_config, save_params};

/// Which structural pieces are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// UNet backbone only: residual conv blocks without attention, no flat chain.
    UNet,
    /// UNet backbone with attention blocks.
    UNetSca,
    /// UNet backbone plus the flat enhancement chain, no attention in the UNet.
    UNetEam,
    /// Everything.
    DelNet,
}

impl Variant {
    pub fn includes_sca(self) -> bool {
        matches!(self, Variant::UNetSca | Variant::DelNet)
    }

    pub fn includes_eam(self) -> bool {
        matches!(self, Variant::UNetEam | Variant::DelNet)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::UNet => "unet",
            Variant::UNetSca => "unet+sca",
            Variant::UNetEam => "unet+eam",
            Variant::DelNet => "delnet",
        }
    }

    pub const ALL: [Variant; 4] = [Variant::UNet, Variant::UNetSca, Variant::UNetEam, Variant::DelNet];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unet" => Ok(Variant::UNet),
            "unet+sca" | "unet_sca" => Ok(Variant::UNetSca),
            "unet+eam" | "unet_eam" => Ok(Variant::UNetEam),
            "delnet" | "del-net" => Ok(Variant::DelNet),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected unet, unet+sca, unet+eam or delnet)"
            ))),
        }
    }
}

/// Full structural description of one model instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub variant: Variant,
    /// Channels produced by the stem convolution; must equal `unet_widths[0]`.
    pub stem_width: usize,
    /// Blocks in the flat enhancement chain (used by +EAM variants).
    pub eam_count: usize,
    /// Dilation of each parallel branch inside an enhancement block.
    pub eam_dilations: Vec<usize>,
    pub unet_levels: usize,
    /// Channel width per level, strictly increasing with depth.
    pub unet_widths: Vec<usize>,
    /// Processing blocks per encoder/decoder level.
    pub sca_per_level: usize,
}

impl Default for ArchConfig {
    /// The calibrated default: parameter count and full-resolution mult-adds
    /// sit within the published complexity budget for this architecture
    /// family (about 2.7M parameters, about 0.5 TMAC at 12MP).
    fn default() -> Self {
        ArchConfig {
            variant: Variant::DelNet,
            stem_width: 10,
            eam_count: 2,
            eam_dilations: vec![1, 2, 3],
            unet_levels: 5,
            unet_widths: vec![10, 20, 40, 80, 288],
            sca_per_level: 1,
        }
    }
}

impl ArchConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.unet_levels == 0 || self.unet_widths.len() != self.unet_levels {
            return Err(Error::Config(format!(
                "unet_widths must list one width per level ({} levels, {} widths)",
                self.unet_levels,
                self.unet_widths.len()
            )));
        }
        if self.unet_widths.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Config(format!(
                "unet_widths must be strictly increasing, got {:?}",
                self.unet_widths
            )));
        }
        if self.unet_widths[0] == 0 {
            return Err(Error::Config("widths must be at least 1".into()));
        }
        if self.stem_width != self.unet_widths[0] {
            return Err(Error::Config(format!(
                "stem_width ({}) must equal unet_widths[0] ({}) so the flat chain feeds the first level directly",
                self.stem_width, self.unet_widths[0]
            )));
        }
        if self.sca_per_level == 0 {
            return Err(Error::Config("sca_per_level must be at least 1".into()));
        }
        if self.variant.includes_eam() {
            if self.eam_count == 0 {
                return Err(Error::Config("eam_count must be at least 1 for +EAM variants".into()));
            }
            if self.eam_dilations.is_empty() || self.eam_dilations.contains(&0) {
                return Err(Error::Config(format!(
                    "eam_dilations must be non-empty positive integers, got {:?}",
                    self.eam_dilations
                )));
            }
        }
        Ok(())
    }

    /// Input extents must be divisible by this (2^(levels-1)).
    pub fn min_divisor(&self) -> usize {
        1 << (self.unet_levels - 1)
    }

    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        let d = self.min_divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::shape(
                "forward",
                &[h, w],
                &[d, d],
                format!("input extents must be divisible by {d} for {} levels", self.unet_levels),
            ));
        }
        Ok(())
    }
}

/// How one parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with std `sqrt(gain / fan_in)`: fan-in scaling with a
    /// variance gain chosen per layer role (2/(1+a^2) ahead of a PReLU with
    /// slope a, 1 for linear positions, damped on residual-branch outputs so
    /// deep stacks stay bounded at init).
    FanInNormal { fan_in: usize, gain: f64 },
    Zeros,
    Const(f64),
}

/// Name, shape and initializer of one learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Named, ordered collection of learnable tensors for one configuration.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Scalar> {
    entries: IndexMap<String, Tensor<T>>,
    /// Seed used at initialization, when known.
    pub init_seed: Option<u64>,
}

impl<T: Scalar> ModelParams<T> {
    pub(crate) fn from_entries(entries: IndexMap<String, Tensor<T>>, init_seed: Option<u64>) -> Self {
        ModelParams { entries, init_seed }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total number of learnable scalars.
    pub fn total_scalars(&self) -> u64 {
        self.entries.values().map(|t| t.numel() as u64).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            init_seed: self.init_seed,
        }
    }

    /// Swap one tensor, keeping name and shape.
    pub fn replace(&mut self, name: &str, t: Tensor<T>) {
        assert_eq!(
            self.entries[name].shape(),
            t.shape(),
            "replacement for {name} must keep its shape"
        );
        self.entries[name] = t;
    }

    /// Check that the parameter names exactly match what `config` expects.
    pub fn validate_for(&self, config: &ArchConfig) -> Result<()> {
        let net = DelNet::new(config.clone())?;
        let specs = net.param_specs();
        let expected: IndexMap<&str, &ParamSpec> = specs.iter().map(|s| (s.name.as_str(), s)).collect();
        let missing: Vec<String> = expected
            .keys()
            .filter(|n| !self.entries.contains_key(**n))
            .map(|n| n.to_string())
            .collect();
        let extra: Vec<String> = self
            .entries
            .keys()
            .filter(|n| !expected.contains_key(n.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::ParamNameMismatch { missing, extra });
        }
        for (name, t) in &self.entries {
            let spec = expected[name.as_str()];
            if spec.shape != t.shape() {
                return Err(Error::shape(
                    "validate_params",
                    &spec.shape,
                    t.shape(),
                    format!("tensor {name} has the wrong shape"),
                ));
            }
        }
        Ok(())
    }
}

/// Tape variables for every parameter of a bound model.
pub struct Binding {
    vars: HashMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("binding", format!("no parameter named {name:?}")))
    }

    /// Bind explicit (name, var) pairs; used when parameters are placed on
    /// the tape by the caller (gradient checking does this).
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Binding {
            vars: pairs.into_iter().collect(),
        }
    }
}

/// Put every parameter on a tape; `trainable` marks them as gradient leaves.
pub fn bind_params<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, trainable: bool) -> Binding {
    let mut vars = HashMap::with_capacity(params.len());
    for (name, t) in params.iter() {
        let leaf = if trainable { t.clone().with_grad() } else { t.clone().detached() };
        vars.insert(name.clone(), tape.leaf(leaf));
    }
    Binding { vars }
}

/// A validated, buildable model.
pub struct DelNet {
    model: blocks::Model,
}

impl DelNet {
    pub fn new(config: ArchConfig) -> Result<Self> {
        config.validate()?;
        Ok(DelNet {
            model: blocks::Model::new(config),
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.model.config
    }

    /// Every learnable tensor, in a stable order for a fixed configuration.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        self.model.collect_params(&mut specs);
        specs
    }

    /// He-initialized conv weights, zero biases, 0.25 slopes; bitwise
    /// deterministic for a fixed seed.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ModelParams<T> {
        init_from_specs(&self.param_specs(), seed)
    }

    /// Run the model on a `[N,1,H,W]` raw image already placed on the tape.
    ///
    /// Rejects inputs outside [0,1] and extents not divisible by
    /// `2^(levels-1)`; returns a `[N,3,H,W]` sRGB image clamped to [0,1].
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, binding: &Binding, raw: Var) -> Result<Var> {
        self.model.apply(tape, binding, raw)
    }

    /// The analytic layer walk matching [`DelNet::forward`] op for op.
    pub fn plan(&self, n: usize, h: usize, w: usize) -> Result<Plan> {
        self.model.describe(n, h, w)
    }
}

/// Build a model and initialize its parameters in one step.
pub fn init_params<T: Scalar>(config: &ArchConfig, seed: u64) -> Result<ModelParams<T>> {
    Ok(DelNet::new(config.clone())?.init_params(seed))
}

fn init_from_specs<T: Scalar>(specs: &[ParamSpec], seed: u64) -> ModelParams<T> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut entries = IndexMap::new();
    for spec in specs {
        let numel: usize = spec.shape.iter().product();
        let t = match spec.init {
            Init::FanInNormal { fan_in, gain } => {
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("valid std");
                let data: Vec<T> = (0..numel).map(|_| T::of(normal.sample(&mut rng))).collect();
                Tensor::new(spec.shape.clone(), data).expect("spec shape is valid")
            }
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Const(c) => Tensor::full(&spec.shape, T::of(c)),
        };
        entries.insert(spec.name.clone(), t);
    }
    ModelParams { entries, init_seed: Some(seed) }
}

/// A standalone residual attention block (the UNet's processing unit),
/// exposed for direct testing and gradient checking.
pub struct ScaBlock {
    inner: blocks::ProcBlock,
}

impl ScaBlock {
    /// Block with both attention paths.
    pub fn new(name: &str, width: usize) -> Self {
        ScaBlock {
            inner: blocks::ProcBlock::new(name.to_string(), width, true),
        }
    }

    /// Ablation form: plain residual conv pair without attention.
    pub fn plain(name: &str, width: usize) -> Self {
        ScaBlock {
            inner: blocks::ProcBlock::new(name.to_string(), width, false),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.inner.collect(&mut out);
        out
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ModelParams<T> {
        init_from_specs(&self.param_specs(), seed)
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        self.inner.apply(tape, bind, x)
    }

    pub fn describe(&self, plan: &mut Plan, input: crate::complexity::Shape4) -> Result<crate::complexity::Shape4> {
        self.inner.describe(plan, input)
    }
}

/// A standalone enhancement block from the flat chain, exposed for direct
/// testing and gradient checking.
pub struct EamBlock {
    inner: blocks::EamBlock,
}

impl EamBlock {
    pub fn new(name: &str, width: usize, dilations: &[usize]) -> Self {
        EamBlock {
            inner: blocks::EamBlock::new(name.to_string(), width, dilations),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.inner.collect(&mut out);
        out
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ModelParams<T> {
        init_from_specs(&self.param_specs(), seed)
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        self.inner.apply(tape, bind, x)
    }

    pub fn describe(&self, plan: &mut Plan, input: crate::complexity::Shape4) -> Result<crate::complexity::Shape4> {
        self.inner.describe(plan, input)
    }
}

/// Inference convenience: run one raw image through the model on a private
/// tape and return the sRGB output tensor.
pub fn forward_tensor<T: Scalar>(
    config: &ArchConfig,
    params: &ModelParams<T>,
    raw: &Tensor<T>,
) -> Result<Tensor<T>> {
    let net = DelNet::new(config.clone())?;
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, params, false);
    let input = tape.leaf(raw.clone().detached());
    let out = net.forward(&mut tape, &binding, input)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ArchConfig {
        ArchConfig {
            variant: Variant::DelNet,
            stem_width: 4,
            eam_count: 1,
            eam_dilations: vec![1, 2],
            unet_levels: 2,
            unet_widths: vec![4, 6],
            sca_per_level: 1,
        }
    }

    #[test]
    fn config_validation_catches_bad_widths() {
        let mut c = tiny_config();
        c.unet_widths = vec![4, 4];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.stem_width = 8;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.eam_count = 0;
        assert!(c.validate().is_err());
        c.variant = Variant::UNetSca;
        assert!(c.validate().is_ok(), "eam fields ignored without the flat chain");
    }

    #[test]
    fn init_is_deterministic_and_slopes_are_quarter() {
        let c = tiny_config();
        let a: ModelParams<f32> = init_params(&c, 7).unwrap();
        let b: ModelParams<f32> = init_params(&c, 7).unwrap();
        let other: ModelParams<f32> = init_params(&c, 8).unwrap();
        assert_eq!(a.len(), b.len());
        let mut some_weight_differs = false;
        for ((n1, t1), (n2, t2)) in a.iter().zip(b.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2, "seeded init must be bitwise reproducible ({n1})");
            if t1 != other.get(n1).unwrap() {
                some_weight_differs = true;
            }
        }
        assert!(some_weight_differs, "different seeds must give different weights");
        for (name, t) in a.iter() {
            if name.ends_with(".slope") {
                assert!(t.data().iter().all(|&v| v == 0.25), "{name} should start at 0.25");
            }
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} should start at zero");
            }
        }
    }

    #[test]
    fn forward_shape_contract_and_output_range() {
        let c = tiny_config();
        let params: ModelParams<f32> = init_params(&c, 3).unwrap();
        let mut raw = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
        for (i, v) in raw.data_mut().iter_mut().enumerate() {
            *v = (i as f32 * 0.37).sin().abs().min(1.0);
        }
        let out = forward_tensor(&c, &params, &raw).unwrap();
        assert_eq!(out.shape(), &[1, 3, 8, 8]);
        assert!(out.min_value() >= 0.0 && out.max_value() <= 1.0);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let c = tiny_config();
        let params: ModelParams<f32> = init_params(&c, 3).unwrap();
        // Odd extent: not divisible by 2^(levels-1).
        let raw = Tensor::<f32>::zeros(&[1, 1, 7, 8]);
        assert!(forward_tensor(&c, &params, &raw).is_err());
        // Out-of-range values must be rejected, not clamped.
        let raw = Tensor::<f32>::full(&[1, 1, 8, 8], 1.5);
        assert!(forward_tensor(&c, &params, &raw).is_err());
    }

    #[test]
    fn unet_variant_has_no_flat_chain_parameters() {
        let c = tiny_config().with_variant(Variant::UNet);
        let params: ModelParams<f32> = init_params(&c, 1).unwrap();
        assert!(params.names().all(|n| !n.starts_with("eam.")));
        assert!(params.names().all(|n| !n.contains(".ca.") && !n.contains(".sa.")));
    }

    #[test]
    fn blocks_preserve_shape_on_random_extents() {
        let mut tape = Tape::<f32>::new();
        for (width, h, w) in [(3usize, 5usize, 9usize), (5, 8, 6), (2, 4, 4)] {
            let sca = ScaBlock::new("s", width);
            let eam = EamBlock::new("e", width, &[1, 2]);
            let sp = sca.init_params::<f32>(1);
            let ep = eam.init_params::<f32>(1);
            let x = tape.leaf(Tensor::full(&[1, width, h, w], 0.3));
            let sb = bind_params(&mut tape, &sp, false);
            let eb = bind_params(&mut tape, &ep, false);
            let y1 = sca.apply(&mut tape, &sb, x).unwrap();
            let y2 = eam.apply(&mut tape, &eb, x).unwrap();
            assert_eq!(tape.value(y1).shape(), &[1, width, h, w]);
            assert_eq!(tape.value(y2).shape(), &[1, width, h, w]);
        }
        // Width mismatch is a structured error.
        let sca = ScaBlock::new("s", 4);
        let sp = sca.init_params::<f32>(1);
        let sb = bind_params(&mut tape, &sp, false);
        let x = tape.leaf(Tensor::full(&[1, 3, 4, 4], 0.3));
        assert!(matches!(sca.apply(&mut tape, &sb, x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn eam_impulse_response_spans_at_least_nine_taps() {
        // Dilations (1,2): branch radius 2, plus two 3x3 convs behind the
        // merge give radius 4, so the residual contribution of a centred
        // delta impulse must cover a 9x9 box.
        let width = 3;
        let eam = EamBlock::new("e", width, &[1, 2]);
        let params = eam.init_params::<f64>(5);
        let mut tape = Tape::<f64>::new();
        let bind = bind_params(&mut tape, &params, false);
        let mut impulse = Tensor::<f64>::zeros(&[1, width, 17, 17]);
        impulse.data_mut()[8 * 17 + 8] = 1.0; // channel 0, centre pixel
        let x = tape.leaf(impulse.clone());
        let y = eam.apply(&mut tape, &bind, x).unwrap();

        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0usize, usize::MAX, 0usize);
        for c in 0..width {
            for yy in 0..17 {
                for xx in 0..17 {
                    let residual = tape.value(y).at4(0, c, yy, xx) - impulse.at4(0, c, yy, xx);
                    if residual.abs() > 1e-12 {
                        y0 = y0.min(yy);
                        y1 = y1.max(yy);
                        x0 = x0.min(xx);
                        x1 = x1.max(xx);
                    }
                }
            }
        }
        assert!(
            y1 - y0 + 1 >= 9 && x1 - x0 + 1 >= 9,
            "impulse response box {}x{} should span at least 9x9",
            y1 - y0 + 1,
            x1 - x0 + 1
        );
    }

    #[test]
    fn zero_weights_make_blocks_identities_end_to_end() {
        // With every learnable tensor zeroed the whole network collapses to
        // stem -> head, both zero, so the output is exactly zero.
        let c = tiny_config();
        let net = DelNet::new(c.clone()).unwrap();
        let mut params: ModelParams<f64> = net.init_params(0);
        let names: Vec<String> = params.names().cloned().collect();
        for n in names {
            let shape = params.get(&n).unwrap().shape().to_vec();
            params.replace(&n, Tensor::zeros(&shape));
        }
        let raw = Tensor::<f64>::full(&[1, 1, 8, 8], 0.5);
        let out = forward_tensor(&c, &params, &raw).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
