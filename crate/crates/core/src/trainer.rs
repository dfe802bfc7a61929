//! Desk-scale training: AdamW with decoupled weight decay, a deterministic
//! batch loop with flip augmentation, loss logging and checkpointing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::arch::{self, ArchConfig, DelNet, ModelParams};
use crate::data::{augment_flip, TrainPair};
use crate::error::{Error, Result};
use crate::loss::{loss_total, LossBreakdown, LossConfig};
use crate::tape::Tape;
use crate::tensor::{read_tensor_body, write_tensor_body, Cursor, Scalar, Tensor};

/// Gradients keyed by parameter name.
pub type GradMap<T> = IndexMap<String, Tensor<T>>;

/// Optimizer hyper-parameters. Defaults: lr 1e-4, betas 0.9/0.999,
/// eps 1e-8, no weight decay (the decay strength is a free knob).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moments plus the step count.
pub struct OptimState<T: Scalar> {
    pub config: OptimConfig,
    pub step: u64,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ModelParams<T>, config: OptimConfig) -> Self {
        let m = params.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
        let v = params.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
        OptimState { config, step: 0, m, v }
    }
}

/// One AdamW step: bias-corrected Adam update plus decoupled weight decay
/// `theta <- theta - lr*wd*theta` applied separately from the gradient term.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &GradMap<T>,
    state: &mut OptimState<T>,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let cfg = state.config;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (lr, b1, b2) = (T::of(cfg.lr), T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_m_b1, one_m_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
    let eps = T::of(cfg.eps);
    let decay = T::of(1.0 - cfg.lr * cfg.weight_decay);

    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::invalid("adamw_step", format!("missing gradient for parameter {name:?}")))?;
        let theta = params.get(&name).expect("param exists");
        if g.shape() != theta.shape() {
            return Err(Error::shape("adamw_step", theta.shape(), g.shape(), format!("gradient shape for {name}")));
        }
        let mut new_theta = theta.clone();
        let m = state.m.get_mut(&name).expect("moment exists");
        let v = state.v.get_mut(&name).expect("moment exists");
        let md = m.data_mut();
        let vd = v.data_mut();
        let td = new_theta.data_mut();
        for i in 0..td.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + one_m_b1 * gi;
            vd[i] = b2 * vd[i] + one_m_b2 * gi * gi;
            let m_hat = md[i] * inv_bc1;
            let v_hat = vd[i] * inv_bc2;
            let mut x = td[i];
            if cfg.weight_decay != 0.0 {
                x = x * decay;
            }
            td[i] = x - lr * m_hat / (v_hat.sqrt() + eps);
        }
        params.replace(&name, new_theta);
    }
    Ok(())
}

/// Knobs of one training run.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    /// Random horizontal/vertical flips per sample.
    pub augment: bool,
    /// Write weights/config/optimizer state every this many steps.
    pub checkpoint_every: Option<usize>,
    /// Destination for checkpoints and the loss log.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 200,
            batch_size: 2,
            seed: 0,
            optim: OptimConfig::default(),
            augment: true,
            checkpoint_every: None,
            out_dir: None,
        }
    }
}

/// Final parameters and the per-step loss breakdown.
pub struct TrainOutcome<T: Scalar> {
    pub params: ModelParams<T>,
    pub curve: Vec<LossBreakdown>,
}

fn stack_batch<T: Scalar>(pairs: &[TrainPair]) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = pairs[0].raw.extents();
    let n = pairs.len();
    let mut raw = Vec::with_capacity(n * h * w);
    let mut target = Vec::with_capacity(n * 3 * h * w);
    for p in pairs {
        if p.raw.extents() != (h, w) {
            return Err(Error::shape(
                "train",
                p.raw.data.shape(),
                &[1, 1, h, w],
                "all training pairs must share one extent",
            ));
        }
        raw.extend(p.raw.data.data().iter().map(|&v| T::of(v as f64)));
        target.extend(p.target.data().iter().map(|&v| T::of(v as f64)));
    }
    Ok((
        Tensor::new(vec![n, 1, h, w], raw)?,
        Tensor::new(vec![n, 3, h, w], target)?,
    ))
}

/// Deterministic training loop: fixed shuffle order and augmentation draws
/// for a fixed seed, per-step loss breakdown, optional checkpoints. Aborts
/// with the offending step index if the loss goes non-finite.
pub fn train<T: Scalar>(
    arch_config: &ArchConfig,
    loss_config: &LossConfig<T>,
    dataset: &[TrainPair],
    opts: &TrainOptions,
) -> Result<TrainOutcome<T>> {
    if dataset.is_empty() {
        return Err(Error::invalid("train", "dataset is empty"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("train", "batch size must be at least 1"));
    }
    let net = DelNet::new(arch_config.clone())?;
    let mut params: ModelParams<T> = net.init_params(opts.seed);
    let mut state = OptimState::new(&params, opts.optim);
    // Separate stream from parameter init so batch order and init are
    // independently reproducible.
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            if order.is_empty() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled above");
            let pair = &dataset[idx];
            if opts.augment {
                let h = rng.random_bool(0.5);
                let v = rng.random_bool(0.5);
                batch.push(augment_flip(pair, h, v));
            } else {
                batch.push(pair.clone());
            }
        }
        let (raw, target) = stack_batch::<T>(&batch)?;

        let mut tape = Tape::new();
        let binding = arch::bind_params(&mut tape, &params, true);
        let raw_var = tape.leaf(raw);
        let target_var = tape.leaf(target);
        let pred = net.forward(&mut tape, &binding, raw_var)?;
        let (total, breakdown) = loss_total(&mut tape, target_var, pred, loss_config)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Training {
                step,
                what: format!("non-finite loss {:?}", breakdown),
            });
        }
        tape.backward(total)?;

        let mut grads: GradMap<T> = IndexMap::with_capacity(params.len());
        for name in params.names() {
            let var = binding.var(name)?;
            grads.insert(name.clone(), tape.grad_or_zeros(var));
        }
        drop(tape);
        adamw_step(&mut params, &grads, &mut state)?;
        curve.push(breakdown);

        if let (Some(every), Some(dir)) = (opts.checkpoint_every, opts.out_dir.as_ref()) {
            if every > 0 && (step + 1) % every == 0 {
                write_checkpoint(dir, &format!("step_{:06}", step + 1), arch_config, &params, &state)?;
            }
        }
    }

    if let Some(dir) = opts.out_dir.as_ref() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_loss_log(&dir.join("train_log.csv"), &curve)?;
    }

    Ok(TrainOutcome { params, curve })
}

/// One structured text record per step: `step,total,l1,ssim,perceptual`.
pub fn write_loss_log(path: &Path, curve: &[LossBreakdown]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(out, "step,total,l1,ssim,perceptual")?;
        for (i, b) in curve.iter().enumerate() {
            writeln!(out, "{},{:.9},{:.9},{:.9},{:.9}", i, b.total, b.l1, b.ms_ssim, b.perceptual)?;
        }
        out.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Write `<name>.dlw`, `<name>.cfg` and `<name>.dlo` into `dir`.
pub fn write_checkpoint<T: Scalar>(
    dir: &Path,
    name: &str,
    config: &ArchConfig,
    params: &ModelParams<T>,
    state: &OptimState<T>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    arch::save_params(params, &dir.join(format!("{name}.dlw")))?;
    arch::save_config(config, &dir.join(format!("{name}.cfg")))?;
    save_optim_state(state, &dir.join(format!("{name}.dlo")))?;
    Ok(())
}

pub const DLO1_MAGIC: &[u8; 4] = b"DLO1";
pub const DLO1_VERSION: u32 = 1;

/// Optimizer state container: magic `DLO1`, u32 version, u64 step count,
/// u32 tensor count, then named moment tensors (`m.*` and `v.*`).
pub fn save_optim_state<T: Scalar>(state: &OptimState<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        out.write_all(DLO1_MAGIC)?;
        out.write_all(&DLO1_VERSION.to_le_bytes())?;
        out.write_all(&state.step.to_le_bytes())?;
        out.write_all(&(2 * state.m.len() as u32).to_le_bytes())?;
        for (prefix, map) in [("m", &state.m), ("v", &state.v)] {
            for (name, tensor) in map {
                let full = format!("{prefix}.{name}");
                out.write_all(&(full.len() as u16).to_le_bytes())?;
                out.write_all(full.as_bytes())?;
                write_tensor_body(tensor, &mut out)?;
            }
        }
        out.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Load optimizer state saved by [`save_optim_state`]; the moment tensors
/// must cover exactly the parameters of `params`.
pub fn load_optim_state<T: Scalar>(
    path: &Path,
    params: &ModelParams<T>,
    config: OptimConfig,
) -> Result<OptimState<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor::new(BufReader::new(file));
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic, path, "DLO1")?;
    if &magic != DLO1_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            format: "DLO1",
            offset: 0,
            what: format!("bad magic {magic:?}"),
        });
    }
    let ver_at = cur.offset;
    let version = cur.read_u32(path, "DLO1")?;
    if version != DLO1_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            format: "DLO1",
            offset: ver_at,
            what: format!("unsupported version {version}"),
        });
    }
    let step = cur.read_u64(path, "DLO1")?;
    let count = cur.read_u32(path, "DLO1")?;
    let mut m: IndexMap<String, Tensor<T>> = IndexMap::new();
    let mut v: IndexMap<String, Tensor<T>> = IndexMap::new();
    for _ in 0..count {
        let at = cur.offset;
        let name_len = cur.read_u16(path, "DLO1")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes, path, "DLO1")?;
        let full = String::from_utf8(name_bytes).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            format: "DLO1",
            offset: at,
            what: "tensor name is not UTF-8".into(),
        })?;
        let tensor: Tensor<T> = read_tensor_body(&mut cur, path, "DLO1")?;
        if let Some(rest) = full.strip_prefix("m.") {
            m.insert(rest.to_string(), tensor);
        } else if let Some(rest) = full.strip_prefix("v.") {
            v.insert(rest.to_string(), tensor);
        } else {
            return Err(Error::Format {
                path: path.to_path_buf(),
                format: "DLO1",
                offset: at,
                what: format!("unexpected tensor name {full:?}"),
            });
        }
    }
    let missing: Vec<String> = params
        .names()
        .filter(|n| !m.contains_key(*n) || !v.contains_key(*n))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::ParamNameMismatch { missing, extra: vec![] });
    }
    Ok(OptimState { config, step, m, v })
}
