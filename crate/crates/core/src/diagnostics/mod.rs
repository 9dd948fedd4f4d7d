//! Trust checks for off-policy estimates: weight audits, effective sample
//! size, matched sequences, dose-deviation U-curves and dose histograms.

pub mod ucurve;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, TreatmentAxis};
use crate::estimators::WeightSeries;
use crate::policies::TabularPolicy;
use crate::representation::dose_bins::fit_axis_bins;
use crate::representation::DiscretizedDataset;
use crate::stats::mean;

pub use ucurve::{u_curve, Aggregation, UCurve, UCurveBin, UCurveOptions};

pub const DEFAULT_ESS_FLOOR: usize = 30;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("nothing to analyze")]
    Empty,

    #[error("policy must be deterministic")]
    NotDeterministic,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dose bins have no bin {bin} on the {axis} axis")]
    MissingBin { axis: TreatmentAxis, bin: usize },
}

/// Number of nonzero weights.
pub fn ess_count(weights: &[f64]) -> usize {
    weights.iter().filter(|&&w| w != 0.0).count()
}

/// Kish effective sample size `(Σw)² / Σw²`; zero when every weight is zero.
pub fn ess_kish(weights: &[f64]) -> f64 {
    let sum: f64 = weights.iter().sum();
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    if sq == 0.0 {
        0.0
    } else {
        sum * sum / sq
    }
}

// ── Weight audit ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightAudit {
    pub n_total: usize,
    pub n_nonzero: usize,
    pub ess_count: usize,
    pub ess_kish: f64,
    pub max_weight: f64,
    /// Nonzero weights in decade-wide bins `[10^k, 10^(k+1))`.
    pub histogram: Vec<HistogramBin>,
    pub mean_length_total: f64,
    /// `None` when no weight is nonzero.
    pub mean_length_nonzero: Option<f64>,
    pub low_ess: bool,
}

pub fn audit_weights(weights: &[WeightSeries], ess_floor: usize) -> Result<WeightAudit, DiagnosticsError> {
    if weights.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let fulls: Vec<f64> = weights.iter().map(WeightSeries::full).collect();
    let lengths: Vec<f64> = weights.iter().map(|w| w.len() as f64).collect();
    let nonzero_lengths: Vec<f64> = fulls
        .iter()
        .zip(&lengths)
        .filter(|(&w, _)| w != 0.0)
        .map(|(_, &l)| l)
        .collect();
    let n_nonzero = nonzero_lengths.len();
    Ok(WeightAudit {
        n_total: weights.len(),
        n_nonzero,
        ess_count: n_nonzero,
        ess_kish: ess_kish(&fulls),
        max_weight: fulls.iter().copied().fold(0.0, f64::max),
        histogram: log_histogram(&fulls),
        mean_length_total: mean(&lengths),
        mean_length_nonzero: (n_nonzero > 0).then(|| mean(&nonzero_lengths)),
        low_ess: n_nonzero < ess_floor,
    })
}

fn log_histogram(weights: &[f64]) -> Vec<HistogramBin> {
    let decades: Vec<i32> = weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|w| w.log10().floor() as i32)
        .collect();
    let (Some(&lo), Some(&hi)) = (decades.iter().min(), decades.iter().max()) else {
        return vec![];
    };
    (lo..=hi)
        .map(|k| HistogramBin {
            low: 10f64.powi(k),
            high: 10f64.powi(k + 1),
            count: decades.iter().filter(|&&d| d == k).count(),
        })
        .collect()
}

// ── Matched sequences ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedSequenceStats {
    pub n_matching: usize,
    pub mean_length_matching: Option<f64>,
    pub n_total: usize,
    pub mean_length_total: f64,
}

impl MatchedSequenceStats {
    pub fn fraction(&self) -> f64 {
        self.n_matching as f64 / self.n_total as f64
    }
}

/// Trajectories in which every logged action equals the policy's action.
pub fn matched_sequences(dd: &DiscretizedDataset, policy: &TabularPolicy) -> Result<MatchedSequenceStats, DiagnosticsError> {
    if !policy.is_deterministic() {
        return Err(DiagnosticsError::NotDeterministic);
    }
    if policy.n_states() != dd.n_states() || policy.n_actions() != dd.n_actions() {
        return Err(DiagnosticsError::ShapeMismatch(format!(
            "policy is {}x{}, data has {} states and {} actions",
            policy.n_states(),
            policy.n_actions(),
            dd.n_states(),
            dd.n_actions()
        )));
    }
    if dd.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let mut matching = Vec::new();
    let mut all = Vec::with_capacity(dd.len());
    for ep in dd.episodes() {
        let len = ep.len() as f64;
        all.push(len);
        if ep.states.iter().zip(ep.actions).all(|(&s, &a)| policy.argmax(s) == a) {
            matching.push(len);
        }
    }
    Ok(MatchedSequenceStats {
        n_matching: matching.len(),
        mean_length_matching: (!matching.is_empty()).then(|| mean(&matching)),
        n_total: all.len(),
        mean_length_total: mean(&all),
    })
}

// ── Dose histogram ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseHistogramReport {
    pub axis: TreatmentAxis,
    pub zero_count: usize,
    /// Equal-width bins over `(0, max dose]`.
    pub bins: Vec<HistogramBin>,
    /// Median dose of each nonzero quartile bin.
    pub quartile_medians: Vec<f64>,
    pub max_dose: f64,
}

pub fn dose_histogram(ds: &Dataset, axis: TreatmentAxis, n_bins: usize) -> Result<DoseHistogramReport, DiagnosticsError> {
    if ds.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    if n_bins == 0 {
        return Err(DiagnosticsError::InvalidParameter("need at least one histogram bin".into()));
    }
    let doses: Vec<f64> = ds.steps().map(|s| s.raw_action.dose(axis)).collect();
    let nonzero: Vec<f64> = doses.iter().copied().filter(|&d| d > 0.0).collect();
    let max_dose = nonzero.iter().copied().fold(0.0, f64::max);
    let bins = if nonzero.is_empty() {
        vec![]
    } else {
        let width = max_dose / n_bins as f64;
        let mut counts = vec![0usize; n_bins];
        for d in &nonzero {
            let i = ((d / width).ceil() as usize).clamp(1, n_bins) - 1;
            counts[i] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(i, count)| HistogramBin {
                low: width * i as f64,
                high: width * (i + 1) as f64,
                count,
            })
            .collect()
    };
    let (axis_bins, _) = fit_axis_bins(&doses, 5);
    Ok(DoseHistogramReport {
        axis,
        zero_count: doses.len() - nonzero.len(),
        bins,
        quartile_medians: axis_bins.medians()[1..].to_vec(),
        max_dose,
    })
}
