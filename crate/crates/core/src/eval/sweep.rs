//! Rescorer quality as a function of the text-only mixing ratio.

use serde::{Deserialize, Serialize};

use super::metrics::relative_reduction;
use super::pipeline::{evaluate_pipeline, DecodedUtterance, PipelineReport, RescorerSelector, Selector, BASELINE};
use crate::corpus::{Domain, PairedExample, TextExample};
use crate::error::{Error, Result};
use crate::first_pass::{FirstPassModel, HAvgMode};
use crate::rescorer::{train_rescorer, JointTrainConfig, Rescorer, RescorerConfig, SelectConfig, TrainMode};

pub const DEFAULT_RATIOS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 0.96];
const SYSTEM: &str = "BS+RS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
    /// Rescorer seeds per ratio, counted up from the training seed.
    pub seeds: usize,
    /// Domain whose mean WER picks the best ratio.
    pub target_domain: Domain,
    /// Also train every nonzero ratio with the empirical `h_avg`.
    pub compare_empirical: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_RATIOS.to_vec(),
            seeds: 3,
            target_domain: Domain::B,
            compare_empirical: false,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("ratios: {r} is outside [0, 1]")));
        }
        if self.ratios.first() != Some(&0.0) {
            return Err(Error::Config("ratios: must start with the 0 baseline".into()));
        }
        if self.ratios.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("ratios: must be strictly increasing".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds: must be at least 1".into()));
        }
        Ok(())
    }
}

/// WER pooled over all domains and split per domain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerDomain {
    pub all: f64,
    pub a: Option<f64>,
    pub b: Option<f64>,
}

impl PerDomain {
    pub fn get(&self, domain: Option<Domain>) -> Option<f64> {
        match domain {
            None => Some(self.all),
            Some(Domain::A) => self.a,
            Some(Domain::B) => self.b,
        }
    }

    fn from_report(report: &PipelineReport, system: &str) -> Self {
        Self {
            all: report.wer(system, None).unwrap_or(f64::NAN),
            a: report.wer(system, Some(Domain::A)),
            b: report.wer(system, Some(Domain::B)),
        }
    }

    fn mean(items: &[PerDomain]) -> Self {
        let n = items.len() as f64;
        let avg = |f: &dyn Fn(&PerDomain) -> Option<f64>| -> Option<f64> {
            items.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
        };
        Self {
            all: items.iter().map(|p| p.all).sum::<f64>() / n,
            a: avg(&|p| p.a),
            b: avg(&|p| p.b),
        }
    }

    /// Percent reduction of `self` relative to `baseline`; `None` where the
    /// baseline is missing or zero.
    fn reduction_from(&self, baseline: &PerDomain) -> PerDomainReduction {
        let rel = |b: Option<f64>, n: Option<f64>| b.zip(n).and_then(|(b, n)| relative_reduction(b, n).ok());
        PerDomainReduction {
            all: rel(Some(baseline.all), Some(self.all)),
            a: rel(baseline.a, self.a),
            b: rel(baseline.b, self.b),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerDomainReduction {
    pub all: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
}

impl PerDomainReduction {
    pub fn get(&self, domain: Option<Domain>) -> Option<f64> {
        match domain {
            None => self.all,
            Some(Domain::A) => self.a,
            Some(Domain::B) => self.b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub seed: u64,
    pub wer: PerDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub h_avg_mode: HAvgMode,
    pub runs: Vec<SweepRun>,
    pub mean_wer: PerDomain,
    /// Against the r=0 row's mean WER.
    pub rel_reduction: PerDomainReduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub target_domain: Domain,
    /// First-pass top hypothesis WER on the same test set.
    pub first_pass_wer: PerDomain,
    /// One row per ratio with the configured `h_avg` mode, ratios ascending.
    pub rows: Vec<SweepRow>,
    /// Nonzero ratios retrained with the empirical `h_avg`, when requested.
    pub empirical_rows: Vec<SweepRow>,
    /// Ratio with the lowest mean target-domain WER; the earlier ratio wins ties.
    pub best_ratio: f64,
    /// Whether `best_ratio` lies strictly between the smallest and largest ratio.
    pub best_is_interior: bool,
    /// Whether the largest ratio does worse than r=0 on the target domain;
    /// `None` for a single-row sweep.
    pub highest_ratio_underperforms: Option<bool>,
}

impl SweepReport {
    pub fn row(&self, ratio: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.ratio == ratio)
    }
}

/// Everything a sweep needs besides its own settings.
pub struct SweepInputs<'a> {
    pub first_pass: &'a FirstPassModel,
    pub paired: &'a [PairedExample],
    pub text: &'a [TextExample],
    pub rescorer: RescorerConfig,
    /// Base training settings; `ratio` and `seed` are overridden per run.
    pub train: &'a JointTrainConfig,
    /// Decoded test set shared by every run.
    pub test: &'a [DecodedUtterance],
    pub select: SelectConfig,
}

/// Trains one rescorer per (ratio, seed) against the same first pass and
/// scores each on the same n-best lists. The r=0 runs use standard training.
pub fn mixing_sweep(inputs: &SweepInputs<'_>, config: &SweepConfig) -> Result<SweepReport> {
    config.validate()?;
    let mut rows = Vec::with_capacity(config.ratios.len());
    for &ratio in &config.ratios {
        rows.push(sweep_row(inputs, config, ratio, inputs.train.h_avg_mode)?);
    }
    let baseline_wer = rows[0].mean_wer;
    for row in &mut rows {
        row.rel_reduction = row.mean_wer.reduction_from(&baseline_wer);
    }
    let mut empirical_rows = Vec::new();
    if config.compare_empirical && inputs.train.h_avg_mode != HAvgMode::Empirical {
        for &ratio in config.ratios.iter().filter(|&&r| r > 0.0) {
            let mut row = sweep_row(inputs, config, ratio, HAvgMode::Empirical)?;
            row.rel_reduction = row.mean_wer.reduction_from(&baseline_wer);
            empirical_rows.push(row);
        }
    }

    let target = Some(config.target_domain);
    let score = |r: &SweepRow| r.mean_wer.get(target).unwrap_or(f64::INFINITY);
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |best, (i, r)| if score(r) < score(&rows[best]) { i } else { best });
    let first_pass_wer = PerDomain::from_report(&evaluate_pipeline(inputs.test, &[])?, BASELINE);
    Ok(SweepReport {
        target_domain: config.target_domain,
        first_pass_wer,
        best_ratio: rows[best].ratio,
        best_is_interior: best > 0 && best + 1 < rows.len(),
        highest_ratio_underperforms: (rows.len() > 1).then(|| score(&rows[rows.len() - 1]) > score(&rows[0])),
        rows,
        empirical_rows,
    })
}

fn sweep_row(inputs: &SweepInputs<'_>, config: &SweepConfig, ratio: f64, mode: HAvgMode) -> Result<SweepRow> {
    let mut runs = Vec::with_capacity(config.seeds);
    for k in 0..config.seeds as u64 {
        let seed = inputs.train.seed.wrapping_add(k);
        let train = JointTrainConfig {
            ratio,
            seed,
            h_avg_mode: mode,
            ..*inputs.train
        };
        let train_mode = if ratio == 0.0 { TrainMode::Standard } else { TrainMode::Joint };
        let (ckpt, _) = train_rescorer(
            inputs.first_pass,
            inputs.paired,
            inputs.text,
            inputs.rescorer,
            &train,
            train_mode,
        )?;
        let rescorer = Rescorer::from_checkpoint(inputs.rescorer, inputs.first_pass.vocab, &ckpt)?;
        let selector = RescorerSelector {
            rescorer: &rescorer,
            config: inputs.select,
        };
        let report = evaluate_pipeline(inputs.test, &[(SYSTEM, &selector as &dyn Selector)])?;
        runs.push(SweepRun {
            seed,
            wer: PerDomain::from_report(&report, SYSTEM),
        });
    }
    let mean_wer = PerDomain::mean(&runs.iter().map(|r| r.wer).collect::<Vec<_>>());
    Ok(SweepRow {
        ratio,
        h_avg_mode: mode,
        runs,
        mean_wer,
        rel_reduction: PerDomainReduction::default(),
    })
}
