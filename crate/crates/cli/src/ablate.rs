//! Ablation runs over variants and seeds.

use std::path::PathBuf;

use msr_core::fourier::zero_fill_upsample;
use msr_core::metrics::{paired_t_test, MetricReport, SampleMetrics, TTest};
use msr_core::model::{Network, Variant};
use msr_core::phantom::{load_split, SamplePair, Split};
use msr_core::train::{evaluate, fit};
use msr_core::{Error, Result};
use serde::Serialize;

use crate::config::{Profile, RunConfig};

#[derive(Debug, Clone)]
pub struct AblationOptions {
    pub data: PathBuf,
    pub profile: Profile,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub steps: Option<usize>,
}

/// Test-set scores of one variant trained with one seed.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: usize,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantMean {
    pub variant: Variant,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

/// Paired test of `a` against `b` over every (seed, test sample) pair.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub a: Variant,
    pub b: Variant,
    pub metric: &'static str,
    pub mean_difference: f64,
    pub test: TTest,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub steps: Option<usize>,
    pub seeds: Vec<u64>,
    pub zero_fill: MetricReport,
    pub rows: Vec<AblationRow>,
    pub means: Vec<VariantMean>,
    pub comparisons: Vec<Comparison>,
}

impl AblationReport {
    pub fn mean(&self, variant: Variant) -> Option<&VariantMean> {
        self.means.iter().find(|m| m.variant == variant)
    }
}

/// Scores zero-filled k-space upsampling of each LR target.
pub fn zero_fill_report(samples: &[SamplePair]) -> Result<MetricReport> {
    let rows = samples
        .iter()
        .map(|s| {
            let up = zero_fill_upsample(&s.y_tar.mapv(f64::from), s.scale)?;
            SampleMetrics::compute(s.id.clone(), &up, &s.x_tar.mapv(f64::from))
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::new(rows)
}

fn concat(rows: &[&AblationRow], pick: impl Fn(&MetricReport) -> Vec<f64>) -> Vec<f64> {
    rows.iter().flat_map(|r| pick(&r.report)).collect()
}

pub fn run_ablation(opts: &AblationOptions) -> Result<AblationReport> {
    if opts.seeds.is_empty() || opts.variants.is_empty() {
        return Err(Error::config("ablation needs at least one seed and one variant"));
    }
    let train = load_split(&opts.data, Split::Train)?;
    let val = load_split(&opts.data, Split::Val)?;
    let test = load_split(&opts.data, Split::Test)?;
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }

    let mut rows = Vec::new();
    for &variant in &opts.variants {
        for &seed in &opts.seeds {
            let mut cfg = RunConfig::profile(opts.profile, variant);
            cfg.train.seed = seed;
            if opts.steps.is_some() {
                cfg.train.steps = opts.steps;
            }
            cfg.validate()?;
            let result = fit(&cfg.model, &train, &val, &cfg.train, |_| Ok(()))?;
            let net = Network::new(&cfg.model)?;
            let report = evaluate(&net, &result.best, &test, cfg.train.batch_size)?;
            rows.push(AblationRow { variant, seed, best_epoch: result.best_epoch, report });
        }
    }

    let means = opts
        .variants
        .iter()
        .map(|&variant| {
            let of: Vec<_> = rows.iter().filter(|r| r.variant == variant).collect();
            let k = of.len() as f64;
            VariantMean {
                variant,
                psnr: of.iter().map(|r| r.report.aggregate.psnr).sum::<f64>() / k,
                ssim: of.iter().map(|r| r.report.aggregate.ssim).sum::<f64>() / k,
                nmse: of.iter().map(|r| r.report.aggregate.nmse).sum::<f64>() / k,
            }
        })
        .collect();

    let mut comparisons = Vec::new();
    let pair = (Variant::Full, Variant::Ab1);
    if opts.variants.contains(&pair.0) && opts.variants.contains(&pair.1) {
        let a: Vec<_> = rows.iter().filter(|r| r.variant == pair.0).collect();
        let b: Vec<_> = rows.iter().filter(|r| r.variant == pair.1).collect();
        for (metric, pick) in [
            ("psnr", MetricReport::psnr_vector as fn(&MetricReport) -> Vec<f64>),
            ("ssim", MetricReport::ssim_vector),
        ] {
            let (va, vb) = (concat(&a, pick), concat(&b, pick));
            let mean_difference = va.iter().zip(&vb).map(|(x, y)| x - y).sum::<f64>() / va.len() as f64;
            comparisons.push(Comparison {
                a: pair.0,
                b: pair.1,
                metric,
                mean_difference,
                test: paired_t_test(&va, &vb)?,
            });
        }
    }

    Ok(AblationReport {
        steps: opts.steps,
        seeds: opts.seeds.clone(),
        zero_fill: zero_fill_report(&test)?,
        rows,
        means,
        comparisons,
    })
}
