//! Command-line surface for the learned ISP pipeline: inference, toy-scale
//! training, evaluation, complexity reports, gradient checking, ablation
//! tables and synthetic data generation.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use delnet_core::arch::{self, ArchConfig, DelNet, ModelParams, Variant};
use delnet_core::complexity::{count_model, ComplexityReport};
use delnet_core::data::{self, CfaPattern, Dataset, TrainPair};
use delnet_core::error::Error;
use delnet_core::loss::LossConfig;
use delnet_core::metrics;
use delnet_core::trainer::{self, OptimConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "delnet", version, about = "Learned RAW-to-sRGB camera pipeline tools")]
struct Cli {
    /// Cap internal parallelism at N threads.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw mosaic into an sRGB PNG.
    Infer(InferArgs),
    /// Train on a dataset or on synthetic pairs.
    Train(TrainArgs),
    /// Evaluate a model on a dataset and emit a metrics CSV.
    Eval(EvalArgs),
    /// Print the analytic per-layer complexity report.
    Complexity(ComplexityArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Build every ablation variant and print the comparison table.
    Ablate(AblateArgs),
    /// Write a synthetic dataset.
    SynthData(SynthDataArgs),
}

/// Architecture selection: a config document (or `default`) with flag
/// overrides on top.
#[derive(Args, Clone)]
struct ArchArgs {
    /// Config document path, or `default` for the calibrated configuration.
    #[arg(long, default_value = "default")]
    config: String,
    /// Variant override: unet, unet+sca, unet+eam or delnet.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    stem_width: Option<usize>,
    #[arg(long)]
    eam_count: Option<usize>,
    /// Comma-separated branch dilations, e.g. 1,2,3.
    #[arg(long)]
    eam_dilations: Option<String>,
    /// Comma-separated widths per level, e.g. 10,20,40,80,288.
    #[arg(long)]
    unet_widths: Option<String>,
    #[arg(long)]
    sca_per_level: Option<usize>,
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>, Error> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{what}: expected comma-separated integers, got {s:?}")))
        })
        .collect()
}

impl ArchArgs {
    fn resolve(&self) -> Result<ArchConfig, Error> {
        let mut config = if self.config == "default" {
            ArchConfig::default()
        } else {
            arch::load_config(Path::new(&self.config))?
        };
        if let Some(v) = &self.variant {
            config.variant = v.parse()?;
        }
        if let Some(w) = &self.unet_widths {
            config.unet_widths = parse_usize_list(w, "--unet-widths")?;
            config.unet_levels = config.unet_widths.len();
            if self.stem_width.is_none() {
                config.stem_width = config.unet_widths[0];
            }
        }
        if let Some(s) = self.stem_width {
            config.stem_width = s;
        }
        if let Some(e) = self.eam_count {
            config.eam_count = e;
        }
        if let Some(d) = &self.eam_dilations {
            config.eam_dilations = parse_usize_list(d, "--eam-dilations")?;
        }
        if let Some(s) = self.sca_per_level {
            config.sca_per_level = s;
        }
        config.validate()?;
        Ok(config)
    }
}

fn parse_extent(s: &str) -> Result<(usize, usize), Error> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("expected HxW, got {s:?}")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("expected HxW integers, got {s:?}")))
    };
    Ok((parse(h)?, parse(w)?))
}

#[derive(Args)]
struct InferArgs {
    /// Raw mosaic: single-channel PNG or DLT1 tensor.
    #[arg(long)]
    raw: PathBuf,
    /// Weights file; when absent the model runs with seeded random weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "rggb")]
    cfa: String,
    /// Reinterpret raw container values at this bit depth (e.g. 10).
    #[arg(long)]
    bit_depth: Option<u32>,
    /// Seed for random weights when no weights file is given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root (raw/ and rgb/ subdirectories).
    #[arg(long, conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Train on this many synthetic pairs instead of a dataset.
    #[arg(long)]
    synth: Option<usize>,
    /// Synthetic pair extent, HxW.
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Disable flip augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Write a checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Output directory for weights, loss log and checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "rggb")]
    cfa: String,
    #[arg(long)]
    bit_depth: Option<u32>,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset root (raw/ and rgb/ subdirectories).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Metrics CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "rggb")]
    cfa: String,
    #[arg(long)]
    bit_depth: Option<u32>,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args)]
struct ComplexityArgs {
    /// Input extent, HxW.
    #[arg(long, default_value = "2976x4000")]
    input: String,
    /// Skip the per-layer table and print totals only.
    #[arg(long)]
    totals_only: bool,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// Input extent for the mult-adds column, HxW.
    #[arg(long, default_value = "2976x4000")]
    input: String,
    /// Also run a forward pass per variant at this extent, HxW.
    #[arg(long, default_value = "64x64")]
    check_forward: String,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Infer(args) => cmd_infer(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Complexity(args) => cmd_complexity(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::SynthData(args) => cmd_synth_data(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_weights_for(config: &ArchConfig, weights: &Path) -> Result<ModelParams<f32>, Error> {
    let params = arch::load_params(weights)?;
    params.validate_for(config)?;
    Ok(params)
}

fn cmd_infer(args: InferArgs) -> Result<(), Error> {
    let config = args.arch.resolve()?;
    let cfa: CfaPattern = args.cfa.parse()?;
    let raw = data::load_raw(&args.raw, cfa, args.bit_depth)?.data;
    let params = match &args.weights {
        Some(path) => load_weights_for(&config, path)?,
        None => {
            eprintln!("note: no weights given, using random initialization (seed {})", args.seed);
            arch::init_params(&config, args.seed)?
        }
    };
    let out = arch::forward_tensor(&config, &params, &raw)?;
    data::write_image(&out, &args.out)?;
    println!("wrote {} ({}x{})", args.out.display(), out.shape()[2], out.shape()[3]);
    Ok(())
}

fn load_dataset_pairs(root: &Path, cfa: CfaPattern, bits: Option<u32>) -> Result<Vec<TrainPair>, Error> {
    let ds = Dataset::scan(root, cfa, bits)?;
    if ds.is_empty() {
        return Err(Error::Config(format!("no pairs found under {}", root.display())));
    }
    (0..ds.len()).map(|i| ds.load(i)).collect()
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let config = args.arch.resolve()?;
    let cfa: CfaPattern = args.cfa.parse()?;
    let pairs: Vec<TrainPair> = match (&args.data, args.synth) {
        (Some(root), _) => load_dataset_pairs(root, cfa, args.bit_depth)?,
        (None, Some(n)) => {
            let (h, w) = parse_extent(&args.size)?;
            (0..n).map(|i| data::synth_pair(args.seed.wrapping_add(i as u64), h, w)).collect()
        }
        (None, None) => return Err(Error::Config("pass --data <root> or --synth <count>".into())),
    };
    let opts = TrainOptions {
        steps: args.steps,
        batch_size: args.batch_size,
        seed: args.seed,
        optim: OptimConfig {
            lr: args.lr,
            weight_decay: args.weight_decay,
            ..OptimConfig::default()
        },
        augment: !args.no_augment,
        checkpoint_every: args.checkpoint_every,
        out_dir: Some(args.out_dir.clone()),
    };
    let loss_config = LossConfig::<f32>::with_seed(args.seed);
    let outcome = trainer::train(&config, &loss_config, &pairs, &opts)?;

    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    arch::save_params(&outcome.params, &args.out_dir.join("final.dlw"))?;
    arch::save_config(&config, &args.out_dir.join("final.cfg"))?;
    if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
        println!(
            "trained {} steps on {} pairs: loss {:.6} -> {:.6}",
            outcome.curve.len(),
            pairs.len(),
            first.total,
            last.total
        );
    } else {
        println!("trained 0 steps; wrote initial parameters");
    }
    println!("wrote {}", args.out_dir.join("final.dlw").display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let config = args.arch.resolve()?;
    let cfa: CfaPattern = args.cfa.parse()?;
    let params = load_weights_for(&config, &args.weights)?;
    let ds = Dataset::scan(&args.data, cfa, args.bit_depth)?;
    if ds.is_empty() {
        return Err(Error::Config(format!("no pairs found under {}", args.data.display())));
    }
    let net = DelNet::new(config.clone())?;
    let mut rows = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let pair = ds.load(i)?;
        let pred = {
            let mut tape = delnet_core::Tape::new();
            let binding = arch::bind_params(&mut tape, &params, false);
            let rv = tape.leaf(pair.raw.data.clone());
            let out = net.forward(&mut tape, &binding, rv)?;
            tape.value(out).clone()
        };
        let report = metrics::evaluate(&pair.target, &pred)?;
        rows.push((pair.id.clone(), report));
    }
    let n = rows.len() as f64;
    let mean = metrics::MetricReport {
        psnr: rows.iter().map(|(_, r)| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|(_, r)| r.ssim).sum::<f64>() / n,
        ms_ssim: rows.iter().map(|(_, r)| r.ms_ssim).sum::<f64>() / n,
        delta_e00: rows.iter().map(|(_, r)| r.delta_e00).sum::<f64>() / n,
    };
    let mut csv = String::from("filename,psnr,ssim,ms_ssim,delta_e00\n");
    for (id, r) in &rows {
        csv.push_str(&format!("{id},{:.6},{:.6},{:.6},{:.6}\n", r.psnr, r.ssim, r.ms_ssim, r.delta_e00));
    }
    csv.push_str(&format!(
        "mean,{:.6},{:.6},{:.6},{:.6}\n",
        mean.psnr, mean.ssim, mean.ms_ssim, mean.delta_e00
    ));
    match &args.out {
        Some(path) => {
            std::fs::write(path, csv).map_err(|e| Error::io(path, e))?;
            println!("wrote {} ({} images)", path.display(), rows.len());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn print_report(report: &ComplexityReport, per_layer: bool) {
    if per_layer {
        println!("{:<28} {:>16} {:>12}", "layer", "mult_adds", "params");
        for e in &report.per_layer {
            println!("{:<28} {:>16} {:>12}", e.name, e.mult_adds, e.params);
        }
        println!();
    }
    println!(
        "input {}x{}: total mult-adds {} ({:.4} x 10^12), total params {} ({:.4} x 10^6)",
        report.input_shape[2],
        report.input_shape[3],
        report.total_mult_adds,
        report.mult_adds_tera(),
        report.total_params,
        report.params_mega()
    );
}

fn cmd_complexity(args: ComplexityArgs) -> Result<(), Error> {
    let config = args.arch.resolve()?;
    let (h, w) = parse_extent(&args.input)?;
    let report = count_model(&config, h, w)?;
    print_report(&report, !args.totals_only);
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), Error> {
    let results = delnet_core::gradcheck::run_full_suite(args.seed);
    let mut failed = 0usize;
    for r in &results {
        println!("{r}");
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::invalid("gradcheck", format!("{failed} checks failed")));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), Error> {
    let base = args.arch.resolve()?;
    let (h, w) = parse_extent(&args.input)?;
    let (fh, fw) = parse_extent(&args.check_forward)?;
    println!(
        "{:<10} {:>16} {:>12} {:>14} {:>12}  forward {}x{}",
        "variant", "mult_adds", "x10^12", "params", "x10^6", fh, fw
    );
    for variant in Variant::ALL {
        let config = base.clone().with_variant(variant);
        let report = count_model(&config, h, w)?;
        let params = arch::init_params::<f32>(&config, 0)?;
        let raw = data::synth_pair(0, fh, fw).raw.data;
        let out = arch::forward_tensor(&config, &params, &raw)?;
        let ok = out.shape() == [1, 3, fh, fw];
        println!(
            "{:<10} {:>16} {:>12.4} {:>14} {:>12.4}  {}",
            variant.to_string(),
            report.total_mult_adds,
            report.mult_adds_tera(),
            report.total_params,
            report.params_mega(),
            if ok { "ok" } else { "FAILED" }
        );
        if !ok {
            return Err(Error::invalid("ablate", format!("{variant} forward produced {:?}", out.shape())));
        }
    }
    Ok(())
}

fn cmd_synth_data(args: SynthDataArgs) -> Result<(), Error> {
    let (h, w) = parse_extent(&args.size)?;
    data::write_synth_dataset(&args.out, args.count, h, w, args.seed)?;
    println!("wrote {} pairs ({}x{}) under {}", args.count, h, w, args.out.display());
    Ok(())
}
