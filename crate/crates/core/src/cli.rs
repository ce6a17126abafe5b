//! Command-line entry point: `train`, `sample`, `eval` and `sweep`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Samples;
use crate::error::{Error, Result};
use crate::eval::{filter_sweep, write_report_csv, SampleRecord};
use crate::guidance::Guided;
use crate::model::{Cond, VelocityModel};
use crate::par::{self, Execution};
use crate::svg;
use crate::train::{train_with, write_loss_csv};
use crate::uq::{self, CovOption, UqSample};

pub const THREADS_ENV: &str = "UAFLOW_THREADS";
pub const REVISION: &str = env!("UAFLOW_GIT_REV");
const MANIFEST_FORMAT: &str = "uaflow-manifest";
const MANIFEST_VERSION: u32 = 1;
/// Mixed into the run seed for the reference set used by `eval`.
const REAL_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Parser)]
#[command(name = "uaflow", version, about = "Uncertainty-aware flow matching on toy data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes model.json, loss.csv, loss.svg and manifest.json.
    Train(TrainArgs),
    /// Sample with uncertainty (and optional guidance); writes samples, uncertainty and manifest.
    Sample(SampleArgs),
    /// Filter samples by uncertainty and score them against reference data.
    Eval(EvalArgs),
    /// Sample over a grid of guidance strengths, one output directory per cell.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CovKind {
    Zero,
    Jvp,
    Mc,
}

#[derive(Debug, Clone, Args)]
pub struct GuidanceFlags {
    /// Uncertainty-guidance weight (0 disables it).
    #[arg(long)]
    pub w: Option<f64>,
    /// Upper bound for the adaptive CFG scale (0 disables CFG).
    #[arg(long, conflicts_with = "fixed_lambda")]
    pub lambda_max: Option<f64>,
    /// Standard CFG with a constant scale.
    #[arg(long)]
    pub fixed_lambda: Option<f64>,
    /// Covariance term of the variance propagation.
    #[arg(long, value_enum)]
    pub cov: Option<CovKind>,
    /// Probe (jvp) or sample (mc) count.
    #[arg(long)]
    pub probes: Option<usize>,
    /// Update the variance every k steps.
    #[arg(long)]
    pub cadence: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Number of samples (overrides sample.count).
    #[arg(short, long)]
    pub n: Option<usize>,
    /// Fixed class for all samples.
    #[arg(long)]
    pub class: Option<usize>,
    #[command(flatten)]
    pub guidance: GuidanceFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(short, long)]
    pub manifest: PathBuf,
    /// Reference points as CSV (one point per row); drawn from the configured dataset if absent.
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// Filtering ratios, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub eval_size: Option<usize>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 10.0, 30.0, 50.0])]
    pub ws: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 1.0, 2.0, 5.0, 10.0, 20.0])]
    pub lambda_maxes: Vec<f64>,
    #[arg(short, long)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub sample: Vec<f64>,
    pub score: f64,
    /// CSV holding this sample's per-step guidance scale (rows keyed by index).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_trace: Option<String>,
    /// CSV holding this sample's element-wise variance (rows keyed by index).
    pub uncertainty: String,
}

/// Everything needed to reproduce a run; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub revision: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub files: Vec<String>,
    pub records: Vec<ManifestRecord>,
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            command: command.into(),
            config: config.clone(),
            seed: config.seed,
            revision: REVISION.into(),
            checkpoint: None,
            files: Vec::new(),
            records: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::InvalidArgument(format!(
                "{}: not a {MANIFEST_FORMAT} v{MANIFEST_VERSION} file",
                path.display()
            )));
        }
        Ok(m)
    }

    fn save(&self, dir: &Path) -> Result<PathBuf> {
        for f in &self.files {
            if !dir.join(f).exists() {
                return Err(Error::InvalidArgument(format!("manifest references missing file {f}")));
            }
        }
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

/// Exit status for an error: 2 for configuration/usage, 3 for numeric failures.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_numeric() {
        3
    } else {
        match err {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::UnknownClass { .. }
            | Error::DimensionMismatch { .. } => 2,
            _ => 1,
        }
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configure_threads() -> Result<()> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(vec![format!("{THREADS_ENV} must be a positive integer, got {v:?}")]))?;
            par::init_threads(Some(n));
            Ok(())
        }
        Err(_) => Ok(()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Sample(a) => cmd_sample(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
    }
}

fn draw_training_set(cfg: &RunConfig) -> Result<Samples> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    cfg.dataset.source.draw(cfg.dataset.train_size, &mut rng)
}

/// Reference set for evaluation, independent of the training draw.
pub fn draw_reference_set(cfg: &RunConfig) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ REAL_SEED_SALT);
    Ok(cfg.dataset.source.draw(cfg.dataset.real_size, &mut rng)?.points)
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.train.seed = cfg.seed;
    std::fs::create_dir_all(&args.out)?;
    let data = draw_training_set(&cfg)?;
    let model = VelocityModel::new(cfg.model_spec(), cfg.seed)?;
    let outcome = train_with(model, &data, &cfg.train, Execution::Parallel)?;
    let mut manifest = RunManifest::new("train", &cfg);
    outcome.ema.save(&args.out.join("model.json"))?;
    write_loss_csv(&args.out.join("loss.csv"), &outcome.curve)?;
    let curve: Vec<(f64, f64)> = outcome.curve.iter().map(|r| (r.step as f64, r.total)).collect();
    let plot = svg::line_plot("training loss", "step", "loss", &[svg::Series { name: "total".into(), points: curve }]);
    svg::write(&args.out.join("loss.svg"), &plot)?;
    manifest.checkpoint = Some("model.json".into());
    manifest.files = vec!["model.json".into(), "loss.csv".into(), "loss.svg".into()];
    manifest.timings.insert("total_seconds".into(), start.elapsed().as_secs_f64());
    let path = manifest.save(&args.out)?;
    log::info!("trained {} steps in {:.1}s", cfg.train.steps, start.elapsed().as_secs_f64());
    println!("{}", path.display());
    Ok(path)
}

/// Fold command-line guidance flags into the config, rejecting combinations
/// the model cannot honour.
pub fn apply_guidance_flags(cfg: &mut RunConfig, flags: &GuidanceFlags, classes: usize) -> Result<()> {
    let mut errs = Vec::new();
    if let Some(w) = flags.w {
        cfg.guidance.w = w;
        cfg.guidance.cg_enabled = w > 0.0;
    }
    if let Some(l) = flags.lambda_max {
        if classes == 0 {
            errs.push("--lambda-max needs a class-conditional model".to_string());
        }
        cfg.guidance.lambda_max = l;
        cfg.guidance.cfg_enabled = true;
        cfg.guidance.fixed_lambda = None;
    }
    if let Some(l) = flags.fixed_lambda {
        if classes == 0 {
            errs.push("--fixed-lambda needs a class-conditional model".to_string());
        }
        cfg.guidance.fixed_lambda = Some(l);
        cfg.guidance.cfg_enabled = true;
    }
    let count = flags.probes;
    match flags.cov {
        Some(CovKind::Zero) => {
            if count.is_some() {
                errs.push("--probes has no effect with --cov zero".to_string());
            }
            cfg.uq.cov = CovOption::Zero;
        }
        Some(CovKind::Jvp) => cfg.uq.cov = CovOption::HutchinsonJvp { probes: count.unwrap_or(1) },
        Some(CovKind::Mc) => cfg.uq.cov = CovOption::MonteCarlo { samples: count.unwrap_or(10) },
        None => match (&mut cfg.uq.cov, count) {
            (_, None) => {}
            (CovOption::HutchinsonJvp { probes }, Some(n)) => *probes = n,
            (CovOption::MonteCarlo { samples }, Some(n)) => *samples = n,
            (CovOption::Zero, Some(_)) => errs.push("--probes has no effect with the zero covariance option".to_string()),
        },
    }
    if let Some(k) = flags.cadence {
        cfg.uq.cadence = k;
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    cfg.validate()
}

pub fn cmd_sample(args: &SampleArgs) -> Result<PathBuf> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(n) = args.n {
        cfg.sample.count = n;
    }
    if let Some(c) = args.class {
        cfg.sample.class = Some(c);
    }
    let model = VelocityModel::load(&args.checkpoint)?;
    if model.spec().dim != cfg.dataset.source.dim() {
        return Err(Error::DimensionMismatch { expected: cfg.dataset.source.dim(), got: model.spec().dim });
    }
    apply_guidance_flags(&mut cfg, &args.guidance, model.spec().num_classes)?;
    let checkpoint = std::fs::canonicalize(&args.checkpoint)?;
    run_sampling(&cfg, &model, &checkpoint.display().to_string(), &args.out)
}

fn run_sampling(cfg: &RunConfig, model: &VelocityModel, checkpoint: &str, out: &Path) -> Result<PathBuf> {
    let start = Instant::now();
    std::fs::create_dir_all(out)?;
    let classes = model.spec().num_classes;
    if let Some(c) = cfg.sample.class {
        if c >= classes {
            return Err(Error::UnknownClass { id: c, classes });
        }
    }
    let sampler = cfg.sample.sampler();
    let samples = uq::generate_with(
        |i| Guided::new(model, cfg.sample.cond_for(i, classes), cfg.guidance),
        &sampler,
        &cfg.uq,
        cfg.sample.count,
        cfg.seed,
        Execution::Parallel,
    )?;
    let sample_secs = start.elapsed().as_secs_f64();
    let guided = samples.iter().any(|s| s.lambdas.iter().any(Option::is_some));
    let labels: Vec<Option<usize>> = (0..samples.len())
        .map(|i| match cfg.sample.cond_for(i, classes) {
            Cond::Class(c) => Some(c),
            Cond::Null => None,
        })
        .collect();

    let mut files = vec!["samples.csv".to_string(), "uncertainty.csv".to_string(), "samples.svg".to_string()];
    std::fs::write(out.join("samples.csv"), samples_csv(&samples, &labels))?;
    std::fs::write(out.join("uncertainty.csv"), uncertainty_csv(&samples))?;
    let pts: Vec<(f64, f64, f64)> = samples
        .iter()
        .map(|s| (s.sample[0], s.sample.get(1).copied().unwrap_or(0.0), s.score))
        .collect();
    svg::write(&out.join("samples.svg"), &svg::scatter_plot("samples coloured by uncertainty", &pts))?;
    if guided {
        std::fs::write(out.join("lambda.csv"), lambda_csv(&samples, &sampler))?;
        std::fs::write(out.join("sigma_corr.csv"), sigma_corr_csv(&samples, &sampler))?;
        files.push("lambda.csv".into());
        files.push("sigma_corr.csv".into());
    }
    let floored: usize = samples.iter().map(|s| s.floored).sum();
    if floored > 0 {
        log::warn!("variance floored at zero {floored} times");
    }

    let mut manifest = RunManifest::new("sample", cfg);
    manifest.checkpoint = Some(checkpoint.to_string());
    manifest.files = files;
    manifest.records = samples
        .iter()
        .zip(&labels)
        .map(|(s, &label)| ManifestRecord {
            index: s.index,
            label,
            sample: s.sample.clone(),
            score: s.score,
            lambda_trace: guided.then(|| "lambda.csv".to_string()),
            uncertainty: "uncertainty.csv".into(),
        })
        .collect();
    manifest.timings.insert("sampling_seconds".into(), sample_secs);
    manifest.timings.insert("total_seconds".into(), start.elapsed().as_secs_f64());
    let path = manifest.save(out)?;
    println!("{}", path.display());
    Ok(path)
}

fn samples_csv(samples: &[UqSample], labels: &[Option<usize>]) -> String {
    let dim = samples.first().map_or(0, |s| s.sample.len());
    let mut s = String::from("index,label");
    for i in 0..dim {
        let _ = write!(s, ",x_{i}");
    }
    s.push_str(",score\n");
    for (r, label) in samples.iter().zip(labels) {
        let _ = write!(s, "{},{}", r.index, label.map(|l| l.to_string()).unwrap_or_default());
        for v in &r.sample {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{}", r.score);
    }
    s
}

fn uncertainty_csv(samples: &[UqSample]) -> String {
    let dim = samples.first().map_or(0, |s| s.var.len());
    let mut s = String::from("index");
    for i in 0..dim {
        let _ = write!(s, ",var_{i}");
    }
    s.push('\n');
    for r in samples {
        let _ = write!(s, "{}", r.index);
        for v in &r.var {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn lambda_csv(samples: &[UqSample], sampler: &crate::sample::SamplerConfig) -> String {
    let mut s = String::from("index,step,t,lambda_opt,lambda_used\n");
    for r in samples {
        for (k, l) in r.lambdas.iter().enumerate() {
            if let Some(l) = l {
                let _ = writeln!(s, "{},{k},{},{},{}", r.index, sampler.time(k), l.lambda_opt, l.lambda_used);
            }
        }
    }
    s
}

fn sigma_corr_csv(samples: &[UqSample], sampler: &crate::sample::SamplerConfig) -> String {
    let corr = uq::sigma_correlation_by_step(samples);
    let med = uq::lambda_median_by_step(samples);
    let mut s = String::from("step,t,pearson,median_lambda\n");
    for (k, (c, m)) in corr.iter().zip(&med).enumerate() {
        let fmt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{k},{},{},{}", sampler.time(k), fmt(c), fmt(m));
    }
    s
}

/// Parse a headerless or headed CSV of points.
pub fn read_points_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(p) => points.push(p),
            Err(_) if n == 0 => {}
            Err(e) => {
                return Err(Error::InvalidArgument(format!("{}: line {}: {e}", path.display(), n + 1)));
            }
        }
    }
    Ok(points)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let manifest = RunManifest::load(&args.manifest)?;
    if manifest.records.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: manifest has no sample records", args.manifest.display())));
    }
    let mut sweep = manifest.config.eval.clone();
    sweep.seed = manifest.seed;
    if let Some(r) = &args.ratios {
        sweep.ratios = r.clone();
    }
    if let Some(n) = args.eval_size {
        sweep.eval_size = n;
    }
    let real = match &args.real {
        Some(p) => read_points_csv(p)?,
        None => draw_reference_set(&manifest.config)?,
    };
    let records: Vec<SampleRecord> = manifest
        .records
        .iter()
        .map(|r| SampleRecord { index: r.index, sample: r.sample.clone(), score: r.score, label: r.label })
        .collect();
    let reports = filter_sweep(&records, &real, &sweep, Execution::Parallel)?;
    std::fs::create_dir_all(&args.out)?;
    let csv = args.out.join("report.csv");
    write_report_csv(&csv, &reports)?;
    let summary = serde_json::json!({ "sweep": sweep, "reports": reports });
    std::fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&summary)?)?;
    let series = |name: &str, f: fn(&crate::eval::EvalReport) -> f64| svg::Series {
        name: name.into(),
        points: reports.iter().map(|r| (r.ratio, f(r))).collect(),
    };
    let plot = svg::line_plot(
        "metrics vs. filtering ratio",
        "filtering ratio",
        "value",
        &[series("precision", |r| r.precision), series("recall", |r| r.recall)],
    );
    svg::write(&args.out.join("filtering.svg"), &plot)?;
    let energy = svg::line_plot(
        "energy distance vs. filtering ratio",
        "filtering ratio",
        "energy distance",
        &[series("energy_distance", |r| r.energy_distance)],
    );
    svg::write(&args.out.join("energy.svg"), &energy)?;
    log::info!("evaluated {} ratios in {:.1}s", reports.len(), start.elapsed().as_secs_f64());
    println!("{}", csv.display());
    Ok(csv)
}

/// Directory name for one sweep cell.
pub fn sweep_cell_name(w: f64, lambda_max: f64) -> String {
    format!("w{w}_lmax{lambda_max}")
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<PathBuf>> {
    let base = RunConfig::load(&args.config)?;
    let model = VelocityModel::load(&args.checkpoint)?;
    let classes = model.spec().num_classes;
    let checkpoint = std::fs::canonicalize(&args.checkpoint)?.display().to_string();
    std::fs::create_dir_all(&args.out)?;
    let mut grid = String::from("w,lambda_max,manifest\n");
    let mut out = Vec::new();
    for &w in &args.ws {
        for &lmax in &args.lambda_maxes {
            let mut cfg = base.clone();
            if let Some(n) = args.n {
                cfg.sample.count = n;
            }
            let flags = GuidanceFlags {
                w: Some(w),
                lambda_max: (classes > 0).then_some(lmax),
                fixed_lambda: None,
                cov: None,
                probes: None,
                cadence: None,
            };
            if classes == 0 && lmax != 0.0 {
                return Err(Error::Config(vec!["sweeping lambda_max needs a class-conditional model".into()]));
            }
            apply_guidance_flags(&mut cfg, &flags, classes)?;
            let name = sweep_cell_name(w, lmax);
            let path = run_sampling(&cfg, &model, &checkpoint, &args.out.join(&name))?;
            let _ = writeln!(grid, "{w},{lmax},{name}/manifest.json");
            out.push(path);
        }
    }
    std::fs::write(args.out.join("grid.csv"), grid)?;
    Ok(out)
}
