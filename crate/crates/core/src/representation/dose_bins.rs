//! Per-axis dose bins: bin 0 for a zero dose, then quantile bins over the
//! nonzero doses.
//!
//! Edges are percentiles with linear interpolation between order statistics.
//! A dose exactly on an edge falls in the lower bin, so the bin of a positive
//! dose is `1 + #{edges strictly below it}`.

use serde::{Deserialize, Serialize};

use super::RepresentationError;
use crate::data::{ActionGrid, Dataset, DiscreteAction, RawAction, TreatmentAxis, DEFAULT_BINS};
use crate::stats::{median, percentile_sorted};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AxisWire", into = "AxisWire")]
pub struct AxisBins {
    edges: Vec<f64>,
    medians: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AxisWire {
    edges: Vec<f64>,
    medians: Vec<f64>,
}

impl TryFrom<AxisWire> for AxisBins {
    type Error = RepresentationError;

    fn try_from(w: AxisWire) -> Result<Self, Self::Error> {
        AxisBins::new(w.edges, w.medians)
    }
}

impl From<AxisBins> for AxisWire {
    fn from(b: AxisBins) -> Self {
        AxisWire {
            edges: b.edges,
            medians: b.medians,
        }
    }
}

impl AxisBins {
    /// `medians` has one entry per bin: either `[0]` (zero-dose axis, no
    /// edges) or `edges.len() + 2` entries starting with 0.
    pub fn new(edges: Vec<f64>, medians: Vec<f64>) -> Result<Self, RepresentationError> {
        let bad = |m: &str| Err(RepresentationError::InvalidBins(m.into()));
        if edges.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return bad("edges must be finite and positive");
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return bad("edges must be strictly ascending");
        }
        let expected = if medians.len() == 1 { 1 } else { edges.len() + 2 };
        if medians.len() != expected || (medians.len() == 1 && !edges.is_empty()) {
            return bad("one median per bin is required");
        }
        if medians[0] != 0.0 {
            return bad("the zero-dose bin has median 0");
        }
        if medians.iter().any(|m| !(m.is_finite() && *m >= 0.0)) || medians.windows(2).any(|w| w[0] > w[1]) {
            return bad("medians must be finite and non-decreasing");
        }
        Ok(Self { edges, medians })
    }

    /// An axis on which no dose was ever given.
    pub fn zero_only() -> Self {
        Self {
            edges: vec![],
            medians: vec![0.0],
        }
    }

    pub fn n_bins(&self) -> usize {
        self.medians.len()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn medians(&self) -> &[f64] {
        &self.medians
    }

    pub fn median(&self, bin: usize) -> f64 {
        self.medians[bin]
    }

    pub fn assign(&self, dose: f64) -> Option<usize> {
        if !(dose.is_finite() && dose >= 0.0) {
            return None;
        }
        if dose == 0.0 {
            return Some(0);
        }
        if self.n_bins() == 1 {
            return None;
        }
        Some(1 + self.edges.iter().filter(|&&e| e < dose).count())
    }
}

/// Bins for both treatment axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseBins {
    pub fluid: AxisBins,
    pub vaso: AxisBins,
    #[serde(skip)]
    warnings: Vec<String>,
}

impl DoseBins {
    pub fn new(fluid: AxisBins, vaso: AxisBins) -> Self {
        Self {
            fluid,
            vaso,
            warnings: vec![],
        }
    }

    pub fn axis(&self, axis: TreatmentAxis) -> &AxisBins {
        match axis {
            TreatmentAxis::Fluid => &self.fluid,
            TreatmentAxis::Vaso => &self.vaso,
        }
    }

    pub fn grid(&self) -> ActionGrid {
        ActionGrid {
            fluid_bins: self.fluid.n_bins(),
            vaso_bins: self.vaso.n_bins(),
        }
    }

    /// Bins that were merged away while fitting, one message per axis.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn assign_axis(&self, axis: TreatmentAxis, dose: f64) -> Result<usize, RepresentationError> {
        let bins = self.axis(axis);
        bins.assign(dose).ok_or_else(|| RepresentationError::Dose {
            axis: axis.to_string(),
            dose,
            reason: if dose.is_finite() && dose > 0.0 {
                "no nonzero bins on this axis".into()
            } else {
                "dose must be finite and non-negative".into()
            },
        })
    }

    pub fn assign(&self, raw: RawAction) -> Result<DiscreteAction, RepresentationError> {
        Ok(DiscreteAction {
            fluid_bin: self.assign_axis(TreatmentAxis::Fluid, raw.fluid)?,
            vaso_bin: self.assign_axis(TreatmentAxis::Vaso, raw.vaso)?,
        })
    }

    /// Median administered dose of the bins chosen by `action`.
    pub fn median_dose(&self, axis: TreatmentAxis, bin: usize) -> f64 {
        self.axis(axis).median(bin)
    }
}

/// Fits bins on the nonzero doses of one axis, with `n_bins` total bins
/// including the zero bin. Returns a warning if bins had to be merged.
pub fn fit_axis_bins(doses: &[f64], n_bins: usize) -> (AxisBins, Option<String>) {
    let mut nonzero: Vec<f64> = doses.iter().copied().filter(|&d| d > 0.0).collect();
    if nonzero.is_empty() {
        let warning = (n_bins > 1).then(|| "no nonzero doses; axis has only the zero bin".to_string());
        return (AxisBins::zero_only(), warning);
    }
    nonzero.sort_by(f64::total_cmp);
    let wanted = n_bins.saturating_sub(2);
    let candidates: Vec<f64> = (1..=wanted)
        .map(|i| percentile_sorted(&nonzero, i as f64 / (n_bins - 1) as f64))
        .collect();

    // Keep an edge only if it leaves a nonempty bin below it and above it.
    let mut edges: Vec<f64> = Vec::with_capacity(wanted);
    for e in candidates {
        let lower = edges.last().copied().unwrap_or(0.0);
        let below = nonzero.iter().any(|&d| d > lower && d <= e);
        let above = nonzero.iter().any(|&d| d > e);
        if below && above {
            edges.push(e);
        }
    }

    let mut members: Vec<Vec<f64>> = vec![Vec::new(); edges.len() + 1];
    for &d in &nonzero {
        members[edges.iter().filter(|&&e| e < d).count()].push(d);
    }
    let mut medians = vec![0.0];
    medians.extend(members.iter().map(|m| median(m)));
    let warning = (edges.len() < wanted).then(|| {
        format!(
            "{} distinct nonzero doses support only {} of {} nonzero bins",
            count_distinct(&nonzero),
            edges.len() + 1,
            wanted + 1
        )
    });
    let bins = AxisBins::new(edges, medians).expect("fitted bins satisfy their invariants");
    (bins, warning)
}

fn count_distinct(sorted: &[f64]) -> usize {
    1 + sorted.windows(2).filter(|w| w[0] != w[1]).count()
}

pub fn fit_dose_bins(ds: &Dataset) -> Result<DoseBins, RepresentationError> {
    fit_dose_bins_with(ds, DEFAULT_BINS)
}

/// Fits `n_bins` bins per axis (zero bin included) from the dataset's doses.
pub fn fit_dose_bins_with(ds: &Dataset, n_bins: usize) -> Result<DoseBins, RepresentationError> {
    if n_bins < 2 {
        return Err(RepresentationError::InvalidParameter(format!("need at least 2 bins per axis, got {n_bins}")));
    }
    let mut warnings = Vec::new();
    let mut fit = |axis: TreatmentAxis| {
        let doses: Vec<f64> = ds.steps().map(|s| s.raw_action.dose(axis)).collect();
        let (bins, warning) = fit_axis_bins(&doses, n_bins);
        if let Some(w) = warning {
            warnings.push(format!("{axis}: {w}"));
        }
        bins
    };
    let fluid = fit(TreatmentAxis::Fluid);
    let vaso = fit(TreatmentAxis::Vaso);
    Ok(DoseBins { fluid, vaso, warnings })
}
