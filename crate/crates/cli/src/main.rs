//! Command-line front end: training, attacks, evaluation, optimality
//! verification, cost benchmarking, and dataset generation.
//!
//! Exit codes: 0 success, 1 config or runtime error (the message names the
//! offending field), 2 usage error.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{CliConfig, DatasetSource};
use yopo_core::adversary::{pgd_attack_chunked, AttackConfig};
use yopo_core::data::{write_idx_bytes, Dataset, SyntheticKind, SyntheticSpec};
use yopo_core::dynamics::{Activation, Checkpoint, Network};
use yopo_core::hamiltonian::{verify_pmp, LossFunction, Regularizer, VerifyConfig};
use yopo_core::instrumentation::{expected_per_minibatch, PropCounter};
use yopo_core::numerics::Rng;
use yopo_core::training::{evaluate, train, Method, TrainConfig};
use yopo_core::{Direction, InitKind, Perturbation};

/// Errors that reach the user; everything maps to exit code 1.
#[derive(Debug)]
pub enum CliError {
    Config { field: String, message: String },
    Runtime(String),
}

impl CliError {
    fn config(field: &str, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        CliError::Runtime(message.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config { field, message } => write!(f, "config error in `{field}`: {message}"),
            CliError::Runtime(message) => write!(f, "error: {message}"),
        }
    }
}

impl From<yopo_core::Error> for CliError {
    fn from(e: yopo_core::Error) -> Self {
        match e {
            yopo_core::Error::Config { field, message } => CliError::Config {
                field: field.to_string(),
                message,
            },
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "yopo",
    version,
    about = "Adversarial training as a differential game: decoupled adversary updates with exact propagation accounting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and emit a checkpoint, run report, and metrics CSV.
    Train(Box<TrainArgs>),
    /// Attack a checkpointed network and emit perturbations plus accuracy.
    Attack(AttackArgs),
    /// Evaluate clean and robust accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Sample the layerwise optimality conditions of a trained checkpoint.
    VerifyPmp(VerifyArgs),
    /// Run a method/parameter grid and audit propagation counts.
    Bench(BenchArgs),
    /// Dataset utilities.
    Data(DataCommand),
}

#[derive(Args, Clone)]
struct DatasetArgs {
    /// Dataset JSON file (as produced by `data gen --format json`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// IDX image file (pairs with --idx-labels).
    #[arg(long, requires = "idx_labels")]
    idx_images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long, requires = "idx_images")]
    idx_labels: Option<PathBuf>,
    /// Synthetic dataset kind (two_gaussians | two_moons).
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    examples: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
}

impl DatasetArgs {
    fn to_source(&self) -> Result<Option<DatasetSource>, CliError> {
        if let Some(path) = &self.data {
            return Ok(Some(DatasetSource::Json { path: path.clone() }));
        }
        if let (Some(images), Some(labels)) = (&self.idx_images, &self.idx_labels) {
            return Ok(Some(DatasetSource::Idx {
                images: images.clone(),
                labels: labels.clone(),
            }));
        }
        if let Some(kind) = &self.synthetic {
            let kind = parse_synthetic_kind(kind)?;
            return Ok(Some(DatasetSource::Synthetic(SyntheticSpec {
                kind,
                dim: self.dim.unwrap_or(10),
                examples: self.examples.unwrap_or(1000),
                margin: self.margin.unwrap_or(2.0),
                noise: self.noise.unwrap_or(0.5),
                seed: self.data_seed.unwrap_or(0),
            })));
        }
        Ok(None)
    }
}

fn parse_synthetic_kind(s: &str) -> Result<SyntheticKind, CliError> {
    match s {
        "two_gaussians" => Ok(SyntheticKind::TwoGaussians),
        "two_moons" => Ok(SyntheticKind::TwoMoons),
        other => Err(CliError::config(
            "synthetic",
            format!("unknown kind `{other}` (expected two_gaussians | two_moons)"),
        )),
    }
}

fn parse_direction(s: &str) -> Result<Direction, CliError> {
    match s {
        "sign" => Ok(Direction::Sign),
        "raw_gradient" => Ok(Direction::RawGradient),
        other => Err(CliError::config(
            "direction",
            format!("unknown direction `{other}` (expected sign | raw_gradient)"),
        )),
    }
}

fn parse_init(s: &str) -> Result<InitKind, CliError> {
    match s {
        "zero" => Ok(InitKind::Zero),
        "uniform" => Ok(InitKind::Uniform),
        other => Err(CliError::config(
            "init",
            format!("unknown init `{other}` (expected zero | uniform)"),
        )),
    }
}

fn parse_activation(s: &str) -> Result<Activation, CliError> {
    match s {
        "tanh" => Ok(Activation::Tanh),
        "softplus" => Ok(Activation::Softplus),
        "relu" => Ok(Activation::Relu),
        other => Err(CliError::config(
            "activation",
            format!("unknown activation `{other}` (expected tanh | softplus | relu)"),
        )),
    }
}

fn parse_loss(s: &str) -> Result<LossFunction, CliError> {
    match s {
        "softmax_cross_entropy" => Ok(LossFunction::SoftmaxCrossEntropy),
        "squared_error" => Ok(LossFunction::SquaredError),
        other => Err(CliError::config(
            "loss",
            format!("unknown loss `{other}` (expected softmax_cross_entropy | squared_error)"),
        )),
    }
}

/// Output directory resolution: flag, then config file, then the
/// `YOPO_OUT_DIR` environment variable, then `out`.
fn resolve_out_dir(flag: &Option<PathBuf>, from_config: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| from_config.clone())
        .or_else(|| std::env::var_os("YOPO_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("creating {}: {e}", dir.display())))?;
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::runtime(format!("serializing {name}: {e}")))?;
    std::fs::write(&path, text)
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("creating {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, text)
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}

fn load_checkpoint(path: &Path) -> Result<(Network, Checkpoint), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::runtime(format!("reading {}: {e}", path.display())))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| CliError::runtime(format!("parsing {}: {e}", path.display())))?;
    let net = Network::from_checkpoint(&ckpt)?;
    Ok((net, ckpt))
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    delayed_update: Option<bool>,
    /// sign | raw_gradient
    #[arg(long)]
    direction: Option<String>,
    /// zero | uniform
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    project_each_step: Option<bool>,
    /// softmax_cross_entropy | squared_error
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    eval_attack_steps: Option<usize>,
    #[arg(long)]
    eval_attack_step_size: Option<f64>,
    /// Hidden widths of the MLP, e.g. `32,32`.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// tanh | softplus | relu
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    net_seed: Option<u64>,
    /// Start from an existing checkpoint instead of a fresh network.
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Held-out dataset JSON for per-epoch evaluation.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl TrainArgs {
    fn to_cli_config(&self) -> Result<CliConfig, CliError> {
        Ok(CliConfig {
            method: self.method.clone(),
            m: self.m,
            n: self.n,
            r: self.r,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            lr_schedule: None,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            epsilon: self.epsilon,
            lambda: self.lambda,
            seed: self.seed,
            delayed_update: self.delayed_update,
            direction: self.direction.as_deref().map(parse_direction).transpose()?,
            init: self.init.as_deref().map(parse_init).transpose()?,
            project_each_step: self.project_each_step,
            loss: self.loss.as_deref().map(parse_loss).transpose()?,
            eval_attack_steps: self.eval_attack_steps,
            eval_attack_step_size: self.eval_attack_step_size,
            hidden: self.hidden.clone(),
            activation: self.activation.as_deref().map(parse_activation).transpose()?,
            net_seed: self.net_seed,
            init_checkpoint: self.init_checkpoint.clone(),
            dataset: self.dataset.to_source()?,
            eval_dataset: self.eval_data.clone().map(|path| DatasetSource::Json { path }),
            out_dir: self.out_dir.clone(),
        })
    }
}

#[derive(Serialize)]
struct TrainEnvelope<'a> {
    resolved_config: &'a CliConfig,
    report: &'a yopo_core::RunReport,
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let base = match &args.config {
        Some(path) => CliConfig::from_file(path)?,
        None => CliConfig::default(),
    };
    let mut resolved = base.merge(args.to_cli_config()?);
    let train_cfg: TrainConfig = resolved.to_train_config()?;

    let source = resolved
        .dataset
        .clone()
        .ok_or_else(|| CliError::config("dataset", "no dataset given (file flags, --synthetic, or config)"))?;
    let train_ds = source.load()?;
    let eval_ds = resolved
        .eval_dataset
        .as_ref()
        .map(DatasetSource::load)
        .transpose()?;

    // Fill the resolved echo with the defaults that actually applied.
    resolved.net_seed = Some(resolved.net_seed.unwrap_or(train_cfg.seed));
    resolved.hidden = Some(resolved.hidden.clone().unwrap_or_else(|| vec![32, 32]));
    resolved.activation = Some(resolved.activation.unwrap_or(Activation::Tanh));

    let net_seed = resolved.net_seed.expect("just filled");
    let net0 = match &resolved.init_checkpoint {
        Some(path) => load_checkpoint(path)?.0,
        None => {
            let mut dims = vec![train_ds.input_dim()];
            dims.extend(resolved.hidden.as_ref().expect("just filled"));
            dims.push(train_ds.num_classes);
            let mut rng = Rng::new(net_seed);
            Network::random_mlp(&dims, resolved.activation.expect("just filled"), &mut rng)?
        }
    };

    let (net, report) = train(&train_cfg, &train_ds, eval_ds.as_ref(), &net0)?;

    let out = resolve_out_dir(&args.out_dir, &resolved.out_dir);
    let ckpt = net.to_checkpoint(vec![net_seed, train_cfg.seed]);
    write_json(&out, "checkpoint.json", &ckpt)?;
    write_json(
        &out,
        "run_report.json",
        &TrainEnvelope {
            resolved_config: &resolved,
            report: &report,
        },
    )?;
    write_text(&out, "metrics.csv", &report.metrics_csv())?;

    let last = report.epochs.last();
    println!(
        "trained {} for {} epochs: clean {:.4} robust {:.4} | full props {} first-layer {} | audit {}",
        train_cfg.method,
        train_cfg.epochs,
        last.map_or(f64::NAN, |e| e.clean_acc),
        last.map_or(f64::NAN, |e| e.robust_acc),
        report.counter.full_forward,
        report.counter.first_layer_forward,
        if report.audit.all_pass { "ok" } else { "MISMATCH" }
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    #[arg(long, default_value = "sign")]
    direction: String,
    #[arg(long, default_value = "zero")]
    init: String,
    #[arg(long, default_value_t = true)]
    project_each_step: bool,
    #[arg(long, default_value = "softmax_cross_entropy")]
    loss: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct AttackReport<'a> {
    resolved_config: ResolvedAttack<'a>,
    clean_acc: f64,
    attacked_acc: f64,
}

#[derive(Serialize)]
struct ResolvedAttack<'a> {
    checkpoint: &'a Path,
    attack: &'a AttackConfig,
    loss: LossFunction,
    seed: u64,
}

fn cmd_attack(args: &AttackArgs) -> Result<(), CliError> {
    let (net, _) = load_checkpoint(&args.checkpoint)?;
    let source = args
        .dataset
        .to_source()?
        .ok_or_else(|| CliError::config("dataset", "no dataset given"))?;
    let ds = source.load()?;
    let loss = parse_loss(&args.loss)?;
    let cfg = AttackConfig {
        steps: args.steps,
        step_size: args.step_size.unwrap_or(args.epsilon / 4.0),
        epsilon: args.epsilon,
        direction: parse_direction(&args.direction)?,
        init: parse_init(&args.init)?,
        project_each_step: args.project_each_step,
    };
    let mut rng = Rng::new(args.seed);
    let mut counter = PropCounter::new();
    let eta = pgd_attack_chunked(&net, &loss, &ds.inputs, &ds.labels, &cfg, &mut rng, &mut counter, 512)?;

    let clean = evaluate(&net, &ds, &loss, None, args.seed)?;
    let x_adv = eta.apply(&ds.inputs)?;
    let attacked_ds = Dataset::new(x_adv, ds.labels.clone(), ds.num_classes, ds.normalization)?;
    let attacked = evaluate(&net, &attacked_ds, &loss, None, args.seed)?;

    let out = resolve_out_dir(&args.out_dir, &None);
    write_json(&out, "perturbations.json", &eta)?;
    write_json(
        &out,
        "attack_report.json",
        &AttackReport {
            resolved_config: ResolvedAttack {
                checkpoint: &args.checkpoint,
                attack: &cfg,
                loss,
                seed: args.seed,
            },
            clean_acc: clean.clean_acc,
            attacked_acc: attacked.clean_acc,
        },
    )?;
    println!(
        "attacked {} examples: clean {:.4} -> attacked {:.4} (artifacts in {})",
        ds.len(),
        clean.clean_acc,
        attacked.clean_acc,
        out.display()
    );
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    dataset: DatasetArgs,
    /// none | pgd
    #[arg(long, default_value = "pgd")]
    attack: String,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    #[arg(long, default_value = "softmax_cross_entropy")]
    loss: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalEnvelope<'a> {
    resolved_config: ResolvedEval<'a>,
    clean_acc: f64,
    robust_acc: f64,
}

#[derive(Serialize)]
struct ResolvedEval<'a> {
    checkpoint: &'a Path,
    attack: Option<&'a AttackConfig>,
    loss: LossFunction,
    seed: u64,
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let (net, _) = load_checkpoint(&args.checkpoint)?;
    let source = args
        .dataset
        .to_source()?
        .ok_or_else(|| CliError::config("dataset", "no dataset given"))?;
    let ds = source.load()?;
    let loss = parse_loss(&args.loss)?;
    let attack = match args.attack.as_str() {
        "none" => None,
        "pgd" => Some(AttackConfig {
            steps: args.steps,
            step_size: args.step_size.unwrap_or(args.epsilon / 4.0),
            epsilon: args.epsilon,
            direction: Direction::Sign,
            init: InitKind::Zero,
            project_each_step: true,
        }),
        other => {
            return Err(CliError::config(
                "attack",
                format!("unknown attack `{other}` (expected none | pgd)"),
            ))
        }
    };
    let report = evaluate(&net, &ds, &loss, attack.as_ref(), args.seed)?;
    let out = resolve_out_dir(&args.out_dir, &None);
    write_json(
        &out,
        "eval_report.json",
        &EvalEnvelope {
            resolved_config: ResolvedEval {
                checkpoint: &args.checkpoint,
                attack: attack.as_ref(),
                loss,
                seed: args.seed,
            },
            clean_acc: report.clean_acc,
            robust_acc: report.robust_acc,
        },
    )?;
    println!(
        "clean {:.4} robust {:.4} (report in {})",
        report.clean_acc,
        report.robust_acc,
        out.display()
    );
    Ok(())
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Perturbation JSON from the attack command; zeros when omitted.
    #[arg(long)]
    eta: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0.1)]
    radius: f64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long, default_value = "softmax_cross_entropy")]
    loss: String,
    /// l2 weight-regularizer coefficient; 0 disables it.
    #[arg(long, default_value_t = 0.0)]
    reg_lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct VerifyEnvelope<'a> {
    resolved_config: ResolvedVerify<'a>,
    report: &'a yopo_core::PmpReport,
}

#[derive(Serialize)]
struct ResolvedVerify<'a> {
    checkpoint: &'a Path,
    samples: usize,
    radius: f64,
    tolerance: f64,
    epsilon: f64,
    loss: LossFunction,
    reg_lambda: f64,
    seed: u64,
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let (net, _) = load_checkpoint(&args.checkpoint)?;
    let source = args
        .dataset
        .to_source()?
        .ok_or_else(|| CliError::config("dataset", "no dataset given"))?;
    let ds = source.load()?;
    let loss = parse_loss(&args.loss)?;
    let eta = match &args.eta {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::runtime(format!("reading {}: {e}", path.display())))?;
            serde_json::from_str::<Perturbation>(&text)
                .map_err(|e| CliError::runtime(format!("parsing {}: {e}", path.display())))?
        }
        None => Perturbation::zeros(ds.len(), ds.input_dim(), args.epsilon),
    };
    let reg = if args.reg_lambda > 0.0 {
        Regularizer::L2Weight {
            coefficient: args.reg_lambda,
        }
    } else {
        Regularizer::None
    };
    let report = verify_pmp(
        &net,
        &ds.inputs,
        &ds.labels,
        &eta,
        &loss,
        &reg,
        &VerifyConfig {
            samples: args.samples,
            radius: args.radius,
            tolerance: args.tolerance,
            seed: args.seed,
        },
    )?;
    let out = resolve_out_dir(&args.out_dir, &None);
    write_json(
        &out,
        "pmp_report.json",
        &VerifyEnvelope {
            resolved_config: ResolvedVerify {
                checkpoint: &args.checkpoint,
                samples: args.samples,
                radius: args.radius,
                tolerance: args.tolerance,
                epsilon: args.epsilon,
                loss,
                reg_lambda: args.reg_lambda,
                seed: args.seed,
            },
            report: &report,
        },
    )?;
    println!(
        "weight-side violation rate {:.4}, adversary violations {}/{} (report in {})",
        report.weight_violation_rate(),
        report.adversary.violations,
        report.adversary.samples,
        out.display()
    );
    Ok(())
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated methods, e.g. `pgd,yopo`.
    #[arg(long)]
    methods: String,
    /// Semicolon-separated parameter sets paired with the methods, each a
    /// comma-separated list of m/n/r assignments, e.g. `r=5;m=5,n=3`.
    #[arg(long)]
    grid: String,
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha1: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Steps of the robust evaluation run after each training; 0 skips it.
    #[arg(long, default_value_t = 10)]
    eval_steps: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
struct GridParams {
    m: Option<usize>,
    n: Option<usize>,
    r: Option<usize>,
}

fn parse_grid(methods: &str, grid: &str) -> Result<Vec<(Method, GridParams)>, CliError> {
    let methods: Vec<Method> = methods
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse().map_err(CliError::from))
        .collect::<Result<_, _>>()?;
    if methods.is_empty() {
        return Err(CliError::config("methods", "no methods given"));
    }
    let entries: Vec<GridParams> = grid
        .split(';')
        .map(|entry| {
            let mut params = GridParams::default();
            for pair in entry.split(',').filter(|s| !s.trim().is_empty()) {
                let (key, value) = pair
                    .split_once('=')
                    .ok_or_else(|| CliError::config("grid", format!("expected k=v, got `{pair}`")))?;
                let value: usize = value.trim().parse().map_err(|_| {
                    CliError::config("grid", format!("`{value}` is not an integer"))
                })?;
                match key.trim() {
                    "m" => params.m = Some(value),
                    "n" => params.n = Some(value),
                    "r" => params.r = Some(value),
                    other => {
                        return Err(CliError::config(
                            "grid",
                            format!("unknown parameter `{other}` (expected m, n, or r)"),
                        ))
                    }
                }
            }
            Ok(params)
        })
        .collect::<Result<_, _>>()?;
    if entries.len() == 1 {
        return Ok(methods.into_iter().map(|m| (m, entries[0])).collect());
    }
    if entries.len() != methods.len() {
        return Err(CliError::config(
            "grid",
            format!("{} methods but {} grid entries", methods.len(), entries.len()),
        ));
    }
    Ok(methods.into_iter().zip(entries).collect())
}

pub const BENCH_CSV_HEADER: &str = "method,m,n,r,minibatches,expected_full,observed_full,\
expected_first,observed_first,audit_pass,clean_acc,robust_acc,wall_ms";

#[derive(Serialize)]
struct BenchRow {
    method: String,
    m: Option<usize>,
    n: Option<usize>,
    r: Option<usize>,
    minibatches: u64,
    expected_full: u64,
    observed_full: u64,
    expected_first: u64,
    observed_first: u64,
    audit_pass: bool,
    clean_acc: f64,
    robust_acc: f64,
    wall_ms: f64,
}

#[derive(Serialize)]
struct BenchEnvelope<'a> {
    resolved_config: ResolvedBench<'a>,
    rows: &'a [BenchRow],
}

#[derive(Serialize)]
struct ResolvedBench<'a> {
    methods: &'a str,
    grid: &'a str,
    dataset: &'a DatasetSource,
    epochs: usize,
    batch_size: usize,
    epsilon: f64,
    alpha1: f64,
    alpha2: f64,
    seed: u64,
    eval_steps: usize,
}

fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    let runs = parse_grid(&args.methods, &args.grid)?;
    let source = args.dataset.to_source()?.unwrap_or({
        DatasetSource::Synthetic(SyntheticSpec {
            kind: SyntheticKind::TwoGaussians,
            dim: 10,
            examples: 512,
            margin: 2.0,
            noise: 0.6,
            seed: 1000,
        })
    });
    let ds = source.load()?;
    let mut net_rng = Rng::new(args.seed ^ 0xBE9C);
    let net0 = Network::random_mlp(
        &[ds.input_dim(), 32, 32, ds.num_classes],
        Activation::Relu,
        &mut net_rng,
    )?;

    let mut rows = Vec::new();
    for (method, params) in runs {
        let mut cfg = TrainConfig::new(method);
        cfg.m = params.m;
        cfg.n = params.n;
        cfg.r = params.r;
        cfg.batch_size = args.batch_size;
        cfg.epochs = args.epochs;
        cfg.epsilon = args.epsilon;
        cfg.alpha1 = args.alpha1;
        cfg.alpha2 = args.alpha2;
        cfg.seed = args.seed;
        cfg.eval_attack_steps = 0;
        let started = Instant::now();
        let (net, report) = train(&cfg, &ds, None, &net0)?;
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        let eval_attack = if args.eval_steps > 0 {
            Some(AttackConfig::signed(
                args.eval_steps,
                args.epsilon / 4.0,
                args.epsilon,
            ))
        } else {
            None
        };
        let eval = evaluate(
            &net,
            &ds,
            &LossFunction::SoftmaxCrossEntropy,
            eval_attack.as_ref(),
            args.seed,
        )?;
        let per_mb = expected_per_minibatch(&cfg);
        rows.push(BenchRow {
            method: method.to_string(),
            m: params.m,
            n: params.n,
            r: params.r,
            minibatches: report.minibatches,
            expected_full: per_mb[0] * report.minibatches,
            observed_full: report.counter.full_forward,
            expected_first: per_mb[2] * report.minibatches,
            observed_first: report.counter.first_layer_forward,
            audit_pass: report.audit.all_pass,
            clean_acc: eval.clean_acc,
            robust_acc: eval.robust_acc,
            wall_ms,
        });
    }

    let mut csv = String::from(BENCH_CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.method,
            row.m.map_or(String::new(), |v| v.to_string()),
            row.n.map_or(String::new(), |v| v.to_string()),
            row.r.map_or(String::new(), |v| v.to_string()),
            row.minibatches,
            row.expected_full,
            row.observed_full,
            row.expected_first,
            row.observed_first,
            row.audit_pass,
            row.clean_acc,
            row.robust_acc,
            row.wall_ms
        ));
    }
    let out = resolve_out_dir(&args.out_dir, &None);
    write_text(&out, "bench.csv", &csv)?;
    write_json(
        &out,
        "bench.json",
        &BenchEnvelope {
            resolved_config: ResolvedBench {
                methods: &args.methods,
                grid: &args.grid,
                dataset: &source,
                epochs: args.epochs,
                batch_size: args.batch_size,
                epsilon: args.epsilon,
                alpha1: args.alpha1,
                alpha2: args.alpha2,
                seed: args.seed,
                eval_steps: args.eval_steps,
            },
            rows: &rows,
        },
    )?;
    for row in &rows {
        println!(
            "{:>12}: full {}/{} first {}/{} audit {} | clean {:.4} robust {:.4} | {:.0} ms",
            row.method,
            row.observed_full,
            row.expected_full,
            row.observed_first,
            row.expected_first,
            if row.audit_pass { "ok" } else { "MISMATCH" },
            row.clean_acc,
            row.robust_acc,
            row.wall_ms
        );
    }
    println!("bench artifacts in {}", out.display());
    Ok(())
}

#[derive(Args)]
struct DataCommand {
    #[command(subcommand)]
    action: DataAction,
}

#[derive(Subcommand)]
enum DataAction {
    /// Generate a synthetic dataset as JSON or an IDX pair.
    Gen(GenArgs),
}

#[derive(Args)]
struct GenArgs {
    /// two_gaussians | two_moons
    #[arg(long, default_value = "two_gaussians")]
    kind: String,
    #[arg(long, default_value_t = 10)]
    dim: usize,
    #[arg(long, default_value_t = 1000)]
    examples: usize,
    #[arg(long, default_value_t = 2.0)]
    margin: f64,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// json | idx
    #[arg(long, default_value = "json")]
    format: String,
    /// Output path prefix.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct GenEcho<'a> {
    spec: &'a SyntheticSpec,
    format: &'a str,
    files: Vec<PathBuf>,
}

fn cmd_data_gen(args: &GenArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        kind: parse_synthetic_kind(&args.kind)?,
        dim: args.dim,
        examples: args.examples,
        margin: args.margin,
        noise: args.noise,
        seed: args.seed,
    };
    let ds = yopo_core::data::gen_synthetic(&spec)?;
    let parent = args.out.parent().map(Path::to_path_buf).unwrap_or_default();
    if !parent.as_os_str().is_empty() {
        std::fs::create_dir_all(&parent)
            .map_err(|e| CliError::runtime(format!("creating {}: {e}", parent.display())))?;
    }
    let mut files = Vec::new();
    match args.format.as_str() {
        "json" => {
            let path = args.out.with_extension("json");
            let text = serde_json::to_string(&ds)
                .map_err(|e| CliError::runtime(format!("serializing dataset: {e}")))?;
            std::fs::write(&path, text)
                .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))?;
            files.push(path);
        }
        "idx" => {
            // Quantize inputs to bytes over their global min/max range.
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for x in &ds.inputs {
                for &v in x.data() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            let span = (hi - lo).max(f64::MIN_POSITIVE);
            let mut payload = Vec::with_capacity(ds.len() * ds.input_dim());
            for x in &ds.inputs {
                for &v in x.data() {
                    payload.push(((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
            let images = write_idx_bytes(&[ds.len(), ds.input_dim()], &payload)?;
            let labels: Vec<u8> = ds.labels.iter().map(|&y| y as u8).collect();
            let labels = write_idx_bytes(&[ds.len()], &labels)?;
            let img_path = PathBuf::from(format!("{}-images.idx", args.out.display()));
            let lbl_path = PathBuf::from(format!("{}-labels.idx", args.out.display()));
            std::fs::write(&img_path, images)
                .map_err(|e| CliError::runtime(format!("writing {}: {e}", img_path.display())))?;
            std::fs::write(&lbl_path, labels)
                .map_err(|e| CliError::runtime(format!("writing {}: {e}", lbl_path.display())))?;
            files.push(img_path);
            files.push(lbl_path);
        }
        other => {
            return Err(CliError::config(
                "format",
                format!("unknown format `{other}` (expected json | idx)"),
            ))
        }
    }
    let echo_path = PathBuf::from(format!("{}.gen.json", args.out.display()));
    let text = serde_json::to_string_pretty(&GenEcho {
        spec: &spec,
        format: &args.format,
        files: files.clone(),
    })
    .map_err(|e| CliError::runtime(format!("serializing echo: {e}")))?;
    std::fs::write(&echo_path, text)
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", echo_path.display())))?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    println!("wrote {}", echo_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Eval(args) => cmd_eval(args),
        Command::VerifyPmp(args) => cmd_verify(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Data(cmd) => match &cmd.action {
            DataAction::Gen(args) => cmd_data_gen(args),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}
