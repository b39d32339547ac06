//! Commands behind the `msr` binary.

pub mod ablate;
pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use msr_core::checkpoint::{load_checkpoint, save_checkpoint};
use msr_core::fourier::ScaleFactor;
use msr_core::gradcheck::{grad_check, BlockId, GradReport, DEFAULT_TOLERANCE};
use msr_core::metrics::{self, MetricReport, SampleMetrics, ERROR_SATURATION};
use msr_core::model::{Network, Variant};
use msr_core::phantom::{build_dataset, load_split, write_dataset, DatasetSpec, SamplePair, Split};
use msr_core::tensor::{Tensor, Shape};
use msr_core::train::{fit, predict};
use msr_core::{Error, Result};
use ndarray::Array2;
use serde::Serialize;
use serde_json::{json, Value};

use crate::ablate::{run_ablation, AblationOptions};
use crate::config::{Profile, RunConfig};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "msr", version, about = "Multi-contrast MR super-resolution experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired-contrast dataset.
    GenData(GenDataArgs),
    /// Train one model from a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train and compare the ablation variants.
    Ablate(AblateArgs),
    /// Check reverse-mode gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print a canonical run config for a profile and variant.
    PrintConfig(PrintConfigArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub count: usize,
    /// Height and width of the HR images.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    pub size: Vec<usize>,
    #[arg(long)]
    pub scale: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Independent seed for the auxiliary intensity mapping.
    #[arg(long)]
    pub aux_seed: Option<u64>,
    /// Train/val/test proportions.
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VAL", "TEST"])]
    pub ratios: Option<Vec<usize>>,
    #[arg(long, default_value_t = 6)]
    pub shapes: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Export per-stage attention maps.
    #[arg(long)]
    pub diagnostics: bool,
    /// Score the ground truth against itself (debugging aid).
    #[arg(long)]
    pub gt_as_prediction: bool,
    /// Absolute error shown as full white in error maps.
    #[arg(long, default_value_t = ERROR_SATURATION)]
    pub saturation: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    #[arg(long, num_args = 1.., default_values_t = [0u64])]
    pub seeds: Vec<u64>,
    /// Subset of variants (default: all five).
    #[arg(long, num_args = 1..)]
    pub variants: Option<Vec<String>>,
    /// Overrides the profile's step budget.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `all` or a comma-separated list of block names.
    #[arg(long, default_value = "all")]
    pub blocks: String,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct PrintConfigArgs {
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    #[arg(long, default_value = "full")]
    pub variant: String,
}

/// Exit status for an error category: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Shape(_) | Error::Data(_) | Error::Parse { .. } | Error::Io { .. } | Error::Json { .. } => 3,
        Error::Domain(_) | Error::Numeric(_) => 4,
    }
}

/// The machine-readable form of an error printed on stderr.
pub fn error_json(e: &Error) -> Value {
    json!({ "error": { "kind": e.kind(), "message": e.to_string(), "exit_code": exit_code(e) } })
}

/// What a command prints and how the process should exit.
#[derive(Debug)]
pub struct Outcome {
    pub stdout: Value,
    pub exit: i32,
}

impl Outcome {
    fn ok(stdout: Value) -> Self {
        Outcome { stdout, exit: 0 }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serialises")
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::GenData(a) => gen_data(&a).map(Outcome::ok),
        Command::Train(a) => train(&a.config, &a.data, &a.out).map(Outcome::ok),
        Command::Eval(a) => eval(&a).map(|r| Outcome::ok(to_value(&r.aggregate))),
        Command::Ablate(a) => ablate(&a).map(Outcome::ok),
        Command::Gradcheck(a) => {
            let reports = gradcheck(&a.blocks, a.tolerance)?;
            let passed = reports.iter().all(|r| r.passed);
            Ok(Outcome {
                stdout: json!({ "passed": passed, "blocks": reports }),
                exit: if passed { 0 } else { 4 },
            })
        }
        Command::PrintConfig(a) => {
            let cfg = RunConfig::profile(a.profile, a.variant.parse()?);
            Ok(Outcome::ok(to_value(&cfg)))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_pretty<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("report serialises");
    text.push('\n');
    write_text(path, &text)
}

pub fn gen_data(a: &GenDataArgs) -> Result<Value> {
    let [h, w] = a.size[..] else {
        return Err(Error::config("--size takes two values: H W"));
    };
    let mut spec = DatasetSpec::new(a.seed, a.count, (h, w), ScaleFactor::new(a.scale)?);
    spec.n_shapes = a.shapes;
    spec.aux_seed = a.aux_seed;
    if let Some(r) = &a.ratios {
        spec.ratios = [r[0], r[1], r[2]];
    }
    spec.validate()?;
    let ds = build_dataset(&spec)?;
    create_dir(&a.out)?;
    let manifests = write_dataset(&ds, &a.out)?;
    Ok(json!({
        "out": a.out,
        "train": manifests[0].entries.len(),
        "val": manifests[1].entries.len(),
        "test": manifests[2].entries.len(),
    }))
}

/// Trains from a config file, writing the canonical config, the JSON-lines
/// log and the best-validation checkpoint under `out`.
pub fn train(config: &Path, data: &Path, out: &Path) -> Result<Value> {
    let cfg = RunConfig::load(config)?;
    let train = load_split(data, Split::Train)?;
    let val = load_split(data, Split::Val)?;
    check_scale(&cfg, &train)?;
    create_dir(out)?;
    write_text(&out.join(RUN_FILE), &cfg.canonical())?;
    let log_path = out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let result = fit(&cfg.model, &train, &val, &cfg.train, |rec| {
        let line = serde_json::to_string(rec).expect("log record serialises");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
    })?;
    save_checkpoint(&out.join(CHECKPOINT_DIR), &cfg.model, &result.best)?;
    let last = result.log.last().expect("fit logs at least one epoch");
    Ok(json!({
        "checkpoint": out.join(CHECKPOINT_DIR),
        "best_epoch": result.best_epoch,
        "epochs": result.log.len(),
        "steps": last.step,
        "final_loss": last.loss,
    }))
}

fn check_scale(cfg: &RunConfig, samples: &[SamplePair]) -> Result<()> {
    match samples.first() {
        Some(s) if s.scale != cfg.model.scale => Err(Error::config(format!(
            "model scale {} does not match dataset scale {}",
            cfg.model.scale.get(),
            s.scale.get()
        ))),
        _ => Ok(()),
    }
}

/// Channel mean of one item of an `(N, C, H, W)` tensor.
fn channel_mean(t: &Tensor<f32>, n: usize) -> Array2<f64> {
    let Shape([_, c, h, w]) = t.shape();
    let mut acc = Array2::<f64>::zeros((h, w));
    for ch in 0..c {
        acc.zip_mut_with(&t.image(n, ch), |a, &v| *a += f64::from(v));
    }
    acc / c as f64
}

/// Scores the test split and exports reconstructions, error maps and,
/// on request, attention maps as PNG.
pub fn eval(a: &EvalArgs) -> Result<MetricReport> {
    let (model_cfg, store) = load_checkpoint::<f32>(&a.checkpoint)?;
    let net = Network::new(&model_cfg)?;
    let test = load_split(&a.data, Split::Test)?;
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let images = a.out.join("images");
    create_dir(&images)?;

    let preds = if a.gt_as_prediction {
        test.iter().map(|s| s.x_tar.clone()).collect()
    } else {
        predict(&net, &store, &test, 4)?
    };
    let mut rows = Vec::with_capacity(test.len());
    for (s, p) in test.iter().zip(&preds) {
        rows.push(SampleMetrics::compute(s.id.clone(), p, &s.x_tar)?);
        metrics::save_png(p, &images.join(format!("{}_sr.png", s.id)))?;
        let err = metrics::error_map(p, &s.x_tar, a.saturation)?;
        metrics::save_png(&err, &images.join(format!("{}_error.png", s.id)))?;
    }

    if a.diagnostics {
        let mut worst = 0.0f64;
        let mut stages = 0;
        for s in &test {
            let x_aux = Tensor::stack_images(&[&s.x_aux])?;
            let y_tar = Tensor::stack_images(&[&s.y_tar])?;
            let out = net.infer(&store, &x_aux, &y_tar, true)?;
            let diag = out.diagnostics.expect("diagnostics requested");
            stages = diag.attention.len();
            for (l, pair) in diag.attention.iter().enumerate() {
                worst = worst.max(f64::from(pair.max_complement_error()));
                let (ah, al) = (channel_mean(&pair.a_h, 0), channel_mean(&pair.a_l, 0));
                worst = worst.max((&ah + &al).iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max));
                metrics::save_png(&ah, &images.join(format!("{}_ah{l}.png", s.id)))?;
                metrics::save_png(&al, &images.join(format!("{}_al{l}.png", s.id)))?;
            }
        }
        write_pretty(
            &a.out.join("diagnostics.json"),
            &json!({ "stages": stages, "max_complement_error": worst }),
        )?;
    }

    let report = MetricReport::new(rows)?;
    write_pretty(&a.out.join(REPORT_FILE), &report)?;
    Ok(report)
}

pub fn ablate(a: &AblateArgs) -> Result<Value> {
    let variants = match &a.variants {
        Some(names) => names.iter().map(|n| n.parse()).collect::<Result<Vec<Variant>>>()?,
        None => Variant::ALL.to_vec(),
    };
    let report = run_ablation(&AblationOptions {
        data: a.data.clone(),
        profile: a.profile,
        seeds: a.seeds.clone(),
        variants,
        steps: a.steps,
    })?;
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_pretty(out, &report)?;
    }
    Ok(to_value(&report))
}

/// Runs the named gradient checks (`all` for every registered block).
pub fn gradcheck(blocks: &str, tolerance: f64) -> Result<Vec<GradReport>> {
    let ids: Vec<BlockId> = if blocks.trim() == "all" {
        BlockId::ALL.to_vec()
    } else {
        blocks.split(',').map(|b| b.trim().parse()).collect::<Result<_>>()?
    };
    if !(tolerance > 0.0) {
        return Err(Error::config("tolerance must be positive"));
    }
    ids.into_iter().map(|id| grad_check(id, tolerance)).collect()
}
