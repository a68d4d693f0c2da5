//! `robopt` command line: synthetic data, privacy arithmetic, single
//! optimizer runs and scenario sweeps.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, LevelFilter};
use serde::Deserialize;

use robopt::data_synth::{self, CovariateLaw, ModelTag, NoiseSpec};
use robopt::losses::LossModel;
use robopt::optimizers::{reference_minimum, run as run_optimizer, Algorithm, ConstraintSet, GradSource, OptimizerConfig};
use robopt::privacy_accountant::{NoiseVariant, PrivacySpec};
use robopt::scenarios::{export_csv, run_scenario, scenario, ScenarioId};
use robopt::Vector;

const USAGE_EXIT: i32 = 2;
const RUNTIME_EXIT: i32 = 1;

#[derive(Parser, Debug)]
#[command(name = "robopt", version, about = "Private and heavy-tail robust first-order optimization")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Base seed; falls back to ROBOPT_SEED, then 0.
    #[arg(long, global = true, env = "ROBOPT_SEED")]
    seed: Option<u64>,

    /// Output file; standard output when omitted (required by `synth`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    log_level: LogLevel,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum LogLevel {
    Off,
    Error,
    Warn,
    Info,
    Debug,
}

impl From<LogLevel> for LevelFilter {
    fn from(l: LogLevel) -> Self {
        match l {
            LogLevel::Off => LevelFilter::Off,
            LogLevel::Error => LevelFilter::Error,
            LogLevel::Warn => LevelFilter::Warn,
            LogLevel::Info => LevelFilter::Info,
            LogLevel::Debug => LevelFilter::Debug,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (CSV plus JSON sidecar).
    Synth(SynthArgs),
    /// Noise variance and composition budget of a private optimizer.
    Privacy(PrivacyArgs),
    /// Run one optimizer on a dataset and write its trajectory.
    Run(RunArgs),
    /// Run a simulation protocol and write the results table.
    Scenario(ScenarioArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// linear, glm-logistic or separable.
    #[arg(long)]
    model: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    /// Student-t degrees of freedom of the linear-model noise.
    #[arg(long, default_value_t = 3.0)]
    df: f64,
    /// Half-width of the uniform covariate box (logistic model); 1/sqrt(p) by default.
    #[arg(long)]
    half_width: Option<f64>,
    /// JSON file with optional `covariates`, `noise` and `theta_star` (linear model).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PrivacyArgs {
    /// accelerated, classic, sgd or chunked-gd.
    #[arg(long)]
    variant: String,
    /// l2 Lipschitz constant of the per-sample loss.
    #[arg(long = "L2")]
    lipschitz: f64,
    /// Samples averaged per gradient.
    #[arg(long)]
    n: usize,
    /// Number of noisy gradient steps.
    #[arg(long = "T")]
    steps: usize,
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    delta: f64,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// fw-classic, fw-accel, fw-accel-private, fw-classic-private, pgd,
    /// nesterov-sc, nesterov-smooth or dp-sgd.
    #[arg(long)]
    algo: String,
    /// Dataset CSV written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// F1 to F7.
    #[arg(long)]
    id: String,
    /// Fraction of the catalogued sample sizes; scenario default when omitted.
    #[arg(long)]
    scale: Option<f64>,
    /// Seeds as a list and/or ranges, e.g. `1,2,3` or `1-20`.
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// JSON object merged onto the catalogued parameters.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SynthConfig {
    covariates: Option<CovariateLaw>,
    noise: Option<NoiseSpec>,
    theta_star: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    loss: LossModel,
    #[serde(default = "all_space")]
    constraint: ConstraintSet,
    #[serde(default = "exact")]
    source: GradSource,
    steps: usize,
    #[serde(default)]
    step_size: Option<f64>,
    #[serde(default)]
    momentum: Option<f64>,
    #[serde(default)]
    grad_floor: Option<f64>,
    #[serde(default)]
    smoothness: Option<f64>,
    #[serde(default)]
    strong_convexity: Option<f64>,
    #[serde(default)]
    theta0: Option<Vec<f64>>,
    #[serde(default)]
    theta1: Option<Vec<f64>>,
    #[serde(default)]
    chunking: robopt::optimizers::Chunking,
    /// Solve for the minimum over the constraint to report excess loss.
    #[serde(default = "yes")]
    reference: bool,
}

fn all_space() -> ConstraintSet {
    ConstraintSet::AllSpace
}

fn exact() -> GradSource {
    GradSource::Exact
}

fn yes() -> bool {
    true
}

/// Failure surfaced to the user, with its exit status.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<robopt::Error> for Failure {
    fn from(e: robopt::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Parse `argv` (program name first), run the command and return the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => USAGE_EXIT,
            };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level.into())
        .format_timestamp(None)
        .try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            USAGE_EXIT
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            RUNTIME_EXIT
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    if let Some(out) = &cli.out {
        check_parent(out)?;
    }
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Synth(a) => synth(a, seed, cli.out.as_deref()),
        Command::Privacy(a) => privacy(a, cli.out.as_deref()),
        Command::Run(a) => run_one(a, seed, cli.out.as_deref()),
        Command::Scenario(a) => run_sweep(a, cli.out.as_deref()),
    }
}

fn check_parent(out: &Path) -> Result<(), Failure> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => return Ok(()),
    };
    if parent.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("output directory {} does not exist", parent.display())))
    }
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure::Runtime(format!("creating {}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("parsing {}: {e}", path.display())))
}

fn synth(a: &SynthArgs, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let out = out.ok_or_else(|| usage("synth needs --out <path>"))?;
    let tag: ModelTag = a.model.parse().map_err(|e: robopt::Error| usage(e.to_string()))?;
    let cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    let theta_star = match &cfg.theta_star {
        Some(t) => Vector::from_row_slice(t),
        None => Vector::from_element(a.p, 1.0),
    };
    let half_width = a.half_width.unwrap_or(1.0 / (a.p as f64).sqrt());
    let ds = match tag {
        ModelTag::Linear => data_synth::gen_linear_heavy_tailed(
            a.n,
            a.p,
            &theta_star,
            &cfg.covariates.unwrap_or(CovariateLaw::Identity),
            cfg.noise.unwrap_or(NoiseSpec::StudentT { nu: a.df }),
            seed,
        )?,
        ModelTag::GlmLogistic => data_synth::gen_logistic_glm(a.n, a.p, &theta_star, half_width, seed)?,
        ModelTag::Separable => data_synth::gen_separable(a.n, a.p, seed)?,
    };
    data_synth::write_csv(&ds, out)?;
    info!("wrote {} rows to {}", ds.n(), out.display());
    Ok(())
}

fn privacy(a: &PrivacyArgs, out: Option<&Path>) -> Result<(), Failure> {
    let variant: NoiseVariant = a.variant.parse().map_err(|e: robopt::Error| usage(e.to_string()))?;
    let spec = PrivacySpec {
        epsilon: a.eps,
        delta: a.delta,
        steps: a.steps,
        lipschitz: a.lipschitz,
        n: a.n,
    };
    let report = spec.report(variant)?;
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(robopt::Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn run_one(a: &RunArgs, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let algorithm: Algorithm = a.algo.parse().map_err(|e: robopt::Error| usage(e.to_string()))?;
    let cfg: RunConfig = read_json(&a.config)?;
    let data = data_synth::read_csv(&a.data).map_err(|e| e.context(format!("reading {}", a.data.display())))?;
    let mut opt = OptimizerConfig::new(algorithm, cfg.steps);
    opt.step_size = cfg.step_size;
    opt.momentum = cfg.momentum;
    opt.grad_floor = cfg.grad_floor;
    opt.smoothness = cfg.smoothness;
    opt.strong_convexity = cfg.strong_convexity;
    opt.theta0 = cfg.theta0;
    opt.theta1 = cfg.theta1;
    opt.chunking = cfg.chunking;
    opt.seed = seed;
    if cfg.reference {
        let (loss, _) = reference_minimum(&data, &cfg.loss, &cfg.constraint)?;
        opt.reference_loss = Some(loss);
    }
    let tr = run_optimizer(&data, &cfg.loss, &cfg.constraint, &opt, &cfg.source)?;
    info!("{} finished {} steps, final loss {}", algorithm, cfg.steps, tr.final_metrics().loss);
    let mut w = sink(out)?;
    tr.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

/// `1,2,5-8` -> [1, 2, 5, 6, 7, 8].
fn parse_seeds(s: &str) -> Result<Vec<u64>, Failure> {
    let bad = || usage(format!("cannot parse seeds `{s}`; use e.g. 1,2,3 or 1-20"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn run_sweep(a: &ScenarioArgs, out: Option<&Path>) -> Result<(), Failure> {
    let id: ScenarioId = a.id.parse().map_err(|e: robopt::Error| usage(e.to_string()))?;
    let mut spec = scenario(id);
    if let Some(p) = &a.config {
        let patch: serde_json::Value = read_json(p)?;
        spec = spec.merge_json(&patch).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(s) = &a.seeds {
        spec.seeds = parse_seeds(s)?;
    }
    let scale = a.scale.unwrap_or(id.desk_scale());
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(usage(format!("--scale must lie in (0, 1], got {scale}")));
    }
    info!("{id}: {} cells at scale {scale}", spec.cells().len());
    let table = run_scenario(&spec, scale, a.jobs.max(1))?;
    match out {
        Some(p) => export_csv(&table, p)?,
        None => {
            let mut w = sink(None)?;
            table.write_csv(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}
