//! `sbanet`: data generation, training, evaluation, gradient checks and
//! ablation runs.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sbanet_autograd::{TensorError, PRIMITIVES};
use sbanet_core::ablation::{ablation_csv, plan, run_plan, PLANS};
use sbanet_core::checkpoint::{read_checkpoint, write_checkpoint};
use sbanet_core::data::{read_dataset, write_dataset, DatasetHeader, SceneSpec};
use sbanet_core::gradcheck::{self, GradcheckOptions, MODULES};
use sbanet_core::metrics::CSV_HEADER;
use sbanet_core::model::mask_logits;
use sbanet_core::trainer::{evaluate, evaluate_with, train, AdamW, TrainOptions};
use sbanet_core::{CoreError, Model, ModelConfig};

const SEED_ENV: &str = "SBANET_SEED";

#[derive(Parser)]
#[command(name = "sbanet", version, about = "Referring segmentation with bidirectional alignment on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train a model and write its checkpoint, loss logs and train-set metrics.
    Train {
        /// JSON model config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Overrides SBANET_SEED and the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 5e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0.01)]
        weight_decay: f64,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Print the metrics CSV of a checkpoint (or a stub predictor) on a dataset.
    Eval {
        #[arg(long, required_unless_present = "stub")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, conflicts_with = "ckpt")]
        stub: Option<Stub>,
    },
    /// Train and evaluate every variant of an ablation plan.
    Ablate {
        #[arg(long)]
        plan: String,
        /// Training set.
        #[arg(long)]
        data: PathBuf,
        /// Test set; the training set is reused when absent.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Base config the variants switch flags on.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Comma-separated seeds; each variant runs once per seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Also write the plan (variants, flags, notes) as JSON.
        #[arg(long)]
        plan_json: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
        /// Negate the backward rule of this primitive.
        #[arg(long)]
        inject_fault: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stub {
    /// Predicts the ground truth.
    Perfect,
    /// Predicts background everywhere.
    Background,
}

/// Message plus process exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Display) -> Self {
        Self { code: 1, msg: msg.to_string() }
    }

    fn numeric(msg: impl Display) -> Self {
        Self { code: 3, msg: msg.to_string() }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::Config(_) | CoreError::Tensor(TensorError::Usage(_)) => 1,
            CoreError::Numeric(_) | CoreError::Tensor(TensorError::Eval(_)) => 3,
            _ => 2,
        };
        Self { code, msg: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    CoreError::io(path, e).into()
}

fn load_config(path: Option<&Path>) -> CliResult<ModelConfig> {
    match path {
        None => Ok(ModelConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
            ModelConfig::from_json(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))
        }
    }
}

/// Flag, then environment, then config.
fn resolve_seed(flag: Option<u64>, config: u64) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Failure::usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(config),
    }
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn cmd_gen(seed: u64, n: usize, out: &Path, size: usize) -> CliResult {
    if n == 0 {
        return Err(Failure::usage("--n must be at least 1"));
    }
    let spec = SceneSpec::with_size(size);
    spec.validate().map_err(Failure::usage)?;
    let samples = sbanet_core::data::generate_dataset(seed, n, &spec)?;
    write_dataset(out, &samples)?;
    let header = DatasetHeader { count: samples.len(), height: size, width: size, max_len: spec.max_len };
    println!("wrote {} samples ({}×{}, {} bytes) to {}", header.count, size, size, header.file_bytes(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    epochs: usize,
    batch: usize,
    seed: Option<u64>,
    optim: AdamW,
    max_steps: Option<usize>,
) -> CliResult {
    let mut cfg = load_config(config)?;
    cfg.seed = resolve_seed(seed, cfg.seed)?;
    let samples = read_dataset(data)?;
    if samples.is_empty() {
        return Err(CoreError::Data(format!("{} holds no samples", data.display())).into());
    }
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let (model, mut store) = Model::build(&cfg)?;
    let opts = TrainOptions { epochs, batch, optim, seed: cfg.seed, max_steps };
    let log = train(&model, &mut store, &samples, &opts)?;
    write_checkpoint(&out.join("model.sbck"), &cfg, &store)?;
    write_file(&out.join("train_steps.csv"), &log.steps_csv())?;
    write_file(&out.join("train_epochs.csv"), &log.epochs_csv())?;
    let report = evaluate(&model, &store, &samples)?;
    write_file(&out.join("metrics.csv"), &format!("{CSV_HEADER}\n{}\n", report.csv_row()))?;
    println!(
        "{} steps, seed {}, config {}, train mIoU {:.4}, {:.1}s",
        log.losses.len(),
        cfg.seed,
        log.config_hash,
        report.miou,
        log.wall_time_s
    );
    Ok(())
}

fn cmd_eval(ckpt: Option<&Path>, data: &Path, stub: Option<Stub>) -> CliResult {
    let samples = read_dataset(data)?;
    let report = match (stub, ckpt) {
        (Some(Stub::Perfect), _) => evaluate_with(&samples, |s| Ok(mask_logits(&s.mask, 1.0)))?,
        (Some(Stub::Background), _) => evaluate_with(&samples, |s| Ok(vec![0.0; 2 * s.mask.len()]))?,
        (None, Some(path)) => {
            let (cfg, store) = read_checkpoint(path)?;
            let model = Model::attach(&cfg, &store)?;
            evaluate(&model, &store, &samples)?
        }
        (None, None) => return Err(Failure::usage("either --ckpt or --stub is required")),
    };
    println!("{CSV_HEADER}\n{}", report.csv_row());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    name: &str,
    data: &Path,
    test: Option<&Path>,
    out: &Path,
    config: Option<&Path>,
    epochs: usize,
    batch: usize,
    seeds: &[u64],
    plan_json: Option<&Path>,
) -> CliResult {
    if !PLANS.contains(&name) {
        return Err(Failure::usage(format!("unknown plan {name:?}; expected one of {}", PLANS.join(", "))));
    }
    let base = load_config(config)?;
    let p = plan(name, &base)?;
    if let Some(path) = plan_json {
        write_file(path, &serde_json::to_string_pretty(&p).expect("plan serializes"))?;
    }
    let train_set = read_dataset(data)?;
    let test_set = match test {
        Some(t) => read_dataset(t)?,
        None => train_set.clone(),
    };
    let seeds = if seeds.is_empty() { vec![resolve_seed(None, base.seed)?] } else { seeds.to_vec() };
    let opts = TrainOptions { epochs, batch, ..TrainOptions::default() };
    let mut rows = Vec::new();
    for &seed in &seeds {
        rows.extend(run_plan(&p, &train_set, &test_set, &opts, seed, |r| {
            eprintln!("{} seed {}: mIoU {:.4} oIoU {:.4}", r.variant, r.seed, r.report.miou, r.report.oiou);
        })?);
    }
    write_file(out, &ablation_csv(&p, &rows))?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(module: &str, fault: Option<&str>, seed: u64) -> CliResult {
    if module != "all" && !MODULES.contains(&module) {
        return Err(Failure::usage(format!("unknown module {module:?}; expected one of all, {}", MODULES.join(", "))));
    }
    let sign_flip = match fault {
        None => None,
        Some(op) => Some(*PRIMITIVES.iter().find(|p| **p == op).ok_or_else(|| {
            Failure::usage(format!("unknown primitive {op:?}; expected one of {}", PRIMITIVES.join(", ")))
        })?),
    };
    let results = gradcheck::run(module, &GradcheckOptions { sign_flip, seed, ..GradcheckOptions::default() })?;
    for r in &results {
        println!("{}", r.line());
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| format!("{}/{}", r.module, r.name)).collect();
    if failed.is_empty() {
        println!("{} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure::numeric(format!("{} of {} checks failed: {}", failed.len(), results.len(), failed.join(", "))))
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Gen { seed, n, out, size } => cmd_gen(seed, n, &out, size),
        Command::Train { config, data, out, epochs, batch, seed, lr, weight_decay, max_steps } => {
            let optim = AdamW { lr, weight_decay, ..AdamW::default() };
            cmd_train(config.as_deref(), &data, &out, epochs, batch, seed, optim, max_steps)
        }
        Command::Eval { ckpt, data, stub } => cmd_eval(ckpt.as_deref(), &data, stub),
        Command::Ablate { plan, data, test, out, config, epochs, batch, seeds, plan_json } => {
            cmd_ablate(&plan, &data, test.as_deref(), &out, config.as_deref(), epochs, batch, &seeds, plan_json.as_deref())
        }
        Command::Gradcheck { module, inject_fault, seed } => cmd_gradcheck(&module, inject_fault.as_deref(), seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
