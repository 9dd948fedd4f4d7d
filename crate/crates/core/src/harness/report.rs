use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EstimateRecord, ExperimentReport, HarnessError, PolicyKind};
use crate::estimators::EstimatorKind;
use crate::stats::{mean, sample_variance, Quantiles};

/// Spread of one estimator's values for one policy across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub horizon: Option<usize>,
    pub k: Option<usize>,
    pub policy: PolicyKind,
    pub estimator: EstimatorKind,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub iqr: f64,
    pub true_value_mean: Option<f64>,
    pub mean_n_nonzero: Option<f64>,
}

const RECORD_HEADER: [&str; 14] = [
    "replicate",
    "horizon",
    "k",
    "policy",
    "estimator",
    "value",
    "true_value",
    "n_test",
    "n_nonzero",
    "ess",
    "n_matching",
    "mean_length_matching",
    "mean_length_total",
    "flags",
];

const SUMMARY_HEADER: [&str; 13] = [
    "horizon",
    "k",
    "policy",
    "estimator",
    "n",
    "mean",
    "sd",
    "q1",
    "median",
    "q3",
    "iqr",
    "true_value_mean",
    "mean_n_nonzero",
];

/// Groups records by `(horizon, k, policy, estimator)` in order of first
/// appearance.
pub fn summarize(records: &[EstimateRecord]) -> Vec<SummaryRow> {
    type Key = (Option<usize>, Option<usize>, PolicyKind, EstimatorKind);
    let mut groups: Vec<(Key, Vec<&EstimateRecord>)> = Vec::new();
    for r in records {
        let key = (r.horizon, r.k, r.policy, r.estimator);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((horizon, k, policy, estimator), members)| {
            let values: Vec<f64> = members.iter().map(|r| r.value).collect();
            let q = Quantiles::of(&values).expect("groups are non-empty");
            let truths: Vec<f64> = members.iter().filter_map(|r| r.true_value).collect();
            let nonzero: Vec<f64> = members.iter().filter_map(|r| r.n_nonzero).map(|n| n as f64).collect();
            SummaryRow {
                horizon,
                k,
                policy,
                estimator,
                n: values.len(),
                mean: mean(&values),
                sd: if values.len() > 1 { sample_variance(&values).sqrt() } else { 0.0 },
                q1: q.q1,
                median: q.median,
                q3: q.q3,
                iqr: q.iqr(),
                true_value_mean: (!truths.is_empty()).then(|| mean(&truths)),
                mean_n_nonzero: (!nonzero.is_empty()).then(|| mean(&nonzero)),
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.json`, `records.csv` and `summary.csv` into `dir`,
/// creating it if needed. The CSVs keep their header when empty.
pub fn emit_report(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<(), HarnessError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(dir.join("report.json"), json)?;
    write_csv(&dir.join("records.csv"), &RECORD_HEADER, &report.records)?;
    write_csv(&dir.join("summary.csv"), &SUMMARY_HEADER, &report.summary)?;
    Ok(())
}
