//! SDR-improvement evaluation over a set of mixtures.
//!
//! Per example, outputs are matched to targets by exhaustive permutation
//! search, SDRi is computed per target, and the example's SDRi is the mean
//! over its targets. Aggregates are the mean and median of example SDRi.
//!
//! # Report format
//!
//! A single JSON document with fields in this order: `mode`, `config`,
//! `aggregation`, `num_examples`, `mean_sdr_db`, `mean_sdri_db`,
//! `median_sdri_db`, `records`, `oracle`. Each record holds `example_id`,
//! `permutation`, `sdr_db`, `sdri_db`, `mean_sdri_db`, with per-target
//! arrays indexed by target. `oracle` is `null` unless requested.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::MixtureExample;
use crate::metrics::{pit_assign, sdr, MetricsError};
use crate::model::{FurcaNetModel, ModelConfig, ModelError};
use crate::par::{self, Execution};
use crate::signal::Waveform;
use crate::spectral::{irm_separate, SpectralError};

pub const AGGREGATION: &str = "mean over targets per example, then mean/median over examples";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("nothing to evaluate")]
    Empty,
    #[error("example {id} has {found} sources, separator produces {expected}")]
    SourceCount {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("cannot write report {path}: {msg}")]
    Write { path: String, msg: String },
}

/// What produces the estimates.
#[derive(Clone, Copy, Debug)]
pub enum Separator<'a> {
    Model(&'a FurcaNetModel),
    /// Returns the mixture for every source: the SDRi = 0 baseline.
    Identity {
        num_sources: usize,
    },
}

impl Separator<'_> {
    fn num_sources(&self) -> usize {
        match self {
            Separator::Model(m) => m.num_sources(),
            Separator::Identity { num_sources } => *num_sources,
        }
    }

    fn separate(&self, mixture: &Waveform) -> Result<Vec<Waveform>, EvalError> {
        match self {
            Separator::Model(m) => Ok(m.separate(mixture)?),
            Separator::Identity { num_sources } => Ok(vec![mixture.clone(); *num_sources]),
        }
    }

    fn mode(&self) -> &'static str {
        match self {
            Separator::Model(_) => "model",
            Separator::Identity { .. } => "identity",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub with_irm_oracle: bool,
    pub fft_size: usize,
    pub hop: usize,
    pub execution: Execution,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            with_irm_oracle: false,
            fft_size: 256,
            hop: 128,
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example_id: String,
    /// `permutation[j]` is the target matched to output `j`.
    pub permutation: Vec<usize>,
    pub sdr_db: Vec<f64>,
    pub sdri_db: Vec<f64>,
    pub mean_sdri_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSection {
    pub method: String,
    pub fft_size: usize,
    pub hop: usize,
    pub mean_sdri_db: f64,
    pub median_sdri_db: f64,
    pub records: Vec<EvalRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub config: Option<ModelConfig>,
    pub aggregation: String,
    pub num_examples: usize,
    pub mean_sdr_db: f64,
    pub mean_sdri_db: f64,
    pub median_sdri_db: f64,
    pub records: Vec<EvalRecord>,
    pub oracle: Option<OracleSection>,
}

impl EvalReport {
    /// `(mean, median)` SDRi recomputed from the records.
    pub fn recompute_aggregates(&self) -> (f64, f64) {
        aggregate(&self.records)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n").map_err(|e| EvalError::Write {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn aggregate(records: &[EvalRecord]) -> (f64, f64) {
    let mut per_example: Vec<f64> = records.iter().map(|r| r.mean_sdri_db).collect();
    let mean = per_example.iter().sum::<f64>() / per_example.len() as f64;
    (mean, median(&mut per_example))
}

/// Scores `estimates` of one example against its targets.
pub fn score_example(
    example: &MixtureExample,
    estimates: &[Waveform],
) -> Result<EvalRecord, EvalError> {
    let pit = pit_assign(&example.sources, estimates)?;
    let s = example.sources.len();
    let mut sdr_db = vec![0.0; s];
    let mut sdri_db = vec![0.0; s];
    for (j, &i) in pit.permutation.iter().enumerate() {
        let target = &example.sources[i];
        let est = sdr(target, &estimates[j])?.sdr_db;
        let base = sdr(target, &example.mixture)?.sdr_db;
        sdr_db[i] = est;
        sdri_db[i] = est - base;
    }
    let mean_sdri_db = sdri_db.iter().sum::<f64>() / s as f64;
    Ok(EvalRecord {
        example_id: example.example_id.clone(),
        permutation: pit.permutation,
        sdr_db,
        sdri_db,
        mean_sdri_db,
    })
}

pub fn evaluate(
    separator: Separator<'_>,
    examples: &[MixtureExample],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::Empty);
    }
    let expected = separator.num_sources();
    if let Some(ex) = examples.iter().find(|e| e.sources.len() != expected) {
        return Err(EvalError::SourceCount {
            id: ex.example_id.clone(),
            expected,
            found: ex.sources.len(),
        });
    }
    let records = par::map(opts.execution, examples, |ex| {
        score_example(ex, &separator.separate(&ex.mixture)?)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let (mean_sdri_db, median_sdri_db) = aggregate(&records);
    let n_sdr: usize = records.iter().map(|r| r.sdr_db.len()).sum();
    let mean_sdr_db = records.iter().flat_map(|r| &r.sdr_db).sum::<f64>() / n_sdr as f64;

    let oracle = if opts.with_irm_oracle {
        let records = par::map(opts.execution, examples, |ex| {
            let est = irm_separate(&ex.mixture, &ex.sources, opts.fft_size, opts.hop)?;
            score_example(ex, &est)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        let (mean, median) = aggregate(&records);
        Some(OracleSection {
            method: "irm".into(),
            fft_size: opts.fft_size,
            hop: opts.hop,
            mean_sdri_db: mean,
            median_sdri_db: median,
            records,
        })
    } else {
        None
    };

    Ok(EvalReport {
        mode: separator.mode().into(),
        config: match separator {
            Separator::Model(m) => Some(m.config().clone()),
            Separator::Identity { .. } => None,
        },
        aggregation: AGGREGATION.into(),
        num_examples: examples.len(),
        mean_sdr_db,
        mean_sdri_db,
        median_sdri_db,
        records,
        oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_examples, CorpusConfig, Split};

    fn set(n: usize) -> Vec<MixtureExample> {
        let cfg = CorpusConfig {
            split: Split::Test,
            num_examples: n,
            duration_s: 0.2,
            ..CorpusConfig::default()
        };
        generate_examples(&cfg, Execution::Sequential).unwrap()
    }

    #[test]
    fn identity_baseline_scores_exactly_zero() {
        let report = evaluate(
            Separator::Identity { num_sources: 2 },
            &set(5),
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(report.mean_sdri_db, 0.0);
        assert!(report
            .records
            .iter()
            .all(|r| r.sdri_db.iter().all(|&v| v == 0.0)));
        assert!(report.oracle.is_none());
        assert_eq!(report.mode, "identity");
    }

    #[test]
    fn oracle_section_appears_only_when_requested() {
        let opts = EvalOptions {
            with_irm_oracle: true,
            ..EvalOptions::default()
        };
        let report = evaluate(Separator::Identity { num_sources: 2 }, &set(3), &opts).unwrap();
        let oracle = report.oracle.unwrap();
        assert_eq!(oracle.records.len(), 3);
        assert!(oracle.mean_sdri_db > 15.0);
    }

    #[test]
    fn aggregates_match_records() {
        let model = FurcaNetModel::build(ModelConfig::default()).unwrap();
        let report = evaluate(Separator::Model(&model), &set(4), &EvalOptions::default()).unwrap();
        let (mean, median) = report.recompute_aggregates();
        assert!((mean - report.mean_sdri_db).abs() < 1e-12);
        assert!((median - report.median_sdri_db).abs() < 1e-12);
        let direct: f64 = report.records.iter().map(|r| r.mean_sdri_db).sum::<f64>() / 4.0;
        assert!((direct - report.mean_sdri_db).abs() < 1e-12);
        assert_eq!(report.config.as_ref(), Some(model.config()));
    }

    #[test]
    fn median_handles_even_and_odd_counts() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn rejects_empty_sets_and_wrong_source_counts() {
        let opts = EvalOptions::default();
        assert!(matches!(
            evaluate(Separator::Identity { num_sources: 2 }, &[], &opts),
            Err(EvalError::Empty)
        ));
        assert!(matches!(
            evaluate(Separator::Identity { num_sources: 3 }, &set(1), &opts),
            Err(EvalError::SourceCount {
                expected: 3,
                found: 2,
                ..
            })
        ));
    }
}
