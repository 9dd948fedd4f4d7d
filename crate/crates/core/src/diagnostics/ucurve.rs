//! Mortality as a function of the gap between recommended and administered
//! dose.
//!
//! A step's deviation is `E_{a~π(·|s)}[median dose of a's bin] − administered
//! dose` on one treatment axis, so a positive deviation means the policy
//! recommends more than was given. Deviations are bucketed into equal-width
//! bins spanning the observed deviations, or a fixed range symmetric about
//! zero.

use serde::{Deserialize, Serialize};

use super::DiagnosticsError;
use crate::data::{Outcome, TreatmentAxis};
use crate::policies::TabularPolicy;
use crate::representation::{DiscretizedDataset, DoseBins};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// One point per patient: the mean deviation over the stay.
    #[default]
    PerPatient,
    /// One point per step, carrying the patient's outcome.
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UCurveOptions {
    pub n_bins: usize,
    pub aggregation: Aggregation,
    /// Half-width of a symmetric deviation range. By default the bins span
    /// the smallest to the largest observed deviation.
    pub range: Option<f64>,
}

impl UCurveOptions {
    pub fn new(n_bins: usize) -> Self {
        Self {
            n_bins,
            aggregation: Aggregation::PerPatient,
            range: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UCurveBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    pub deaths: usize,
    /// `None` for an empty bin.
    pub mortality: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UCurve {
    pub axis: TreatmentAxis,
    pub aggregation: Aggregation,
    pub bins: Vec<UCurveBin>,
    /// Index of the bin holding a deviation of exactly zero.
    pub zero_bin: usize,
    pub n_included: usize,
}

impl UCurve {
    /// Outermost non-empty bins on each side of the zero bin.
    pub fn extremes(&self) -> (Option<usize>, Option<usize>) {
        let left = (0..self.zero_bin).find(|&i| self.bins[i].count > 0);
        let right = (self.zero_bin + 1..self.bins.len()).rev().find(|&i| self.bins[i].count > 0);
        (left, right)
    }

    /// Zero-bin mortality strictly below the mortality of the outermost
    /// non-empty bin on both sides. False when either side is empty.
    pub fn is_u_shaped(&self) -> bool {
        let Some(centre) = self.bins[self.zero_bin].mortality else {
            return false;
        };
        match self.extremes() {
            (Some(l), Some(r)) => {
                let (ml, mr) = (self.bins[l].mortality.unwrap(), self.bins[r].mortality.unwrap());
                centre < ml && centre < mr
            }
            _ => false,
        }
    }
}

/// Per-step deviations of one trajectory.
fn deviations(
    dd: &DiscretizedDataset,
    n: usize,
    policy: &TabularPolicy,
    recommended: &[f64],
    axis: TreatmentAxis,
) -> Vec<f64> {
    let ep = dd.episode(n);
    ep.states
        .iter()
        .zip(&ep.trajectory.steps)
        .map(|(&s, step)| {
            let rec: f64 = policy.row(s).iter().zip(recommended).map(|(p, d)| p * d).sum();
            rec - step.raw_action.dose(axis)
        })
        .collect()
}

pub fn u_curve(
    dd: &DiscretizedDataset,
    policy: &TabularPolicy,
    bins: &DoseBins,
    axis: TreatmentAxis,
    opts: &UCurveOptions,
) -> Result<UCurve, DiagnosticsError> {
    if opts.n_bins == 0 {
        return Err(DiagnosticsError::InvalidParameter("need at least one deviation bin".into()));
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
    let grid = dd.grid();
    let axis_bins = bins.axis(axis);
    let mut recommended = Vec::with_capacity(grid.n_actions());
    for a in 0..grid.n_actions() {
        let bin = grid.decode(a).bin(axis);
        if bin >= axis_bins.n_bins() {
            return Err(DiagnosticsError::MissingBin { axis, bin });
        }
        recommended.push(axis_bins.median(bin));
    }

    let mut points: Vec<(f64, Outcome)> = Vec::new();
    for n in 0..dd.len() {
        let devs = deviations(dd, n, policy, &recommended, axis);
        let outcome = dd.episode(n).trajectory.outcome;
        match opts.aggregation {
            Aggregation::PerPatient => points.push((crate::stats::mean(&devs), outcome)),
            Aggregation::PerStep => points.extend(devs.into_iter().map(|d| (d, outcome))),
        }
    }

    let (lo, hi) = match opts.range {
        Some(r) if r > 0.0 && r.is_finite() => (-r, r),
        Some(r) => return Err(DiagnosticsError::InvalidParameter(format!("range must be positive, got {r}"))),
        None => {
            let lo = points.iter().fold(f64::INFINITY, |m, (d, _)| m.min(*d));
            let hi = points.iter().fold(f64::NEG_INFINITY, |m, (d, _)| m.max(*d));
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        }
    };
    let k = opts.n_bins;
    let width = (hi - lo) / k as f64;
    let index = |d: f64| (((d - lo) / width).floor().max(0.0) as usize).min(k - 1);

    let mut counts = vec![0usize; k];
    let mut deaths = vec![0usize; k];
    let mut included = 0;
    for &(d, outcome) in &points {
        if d < lo || d > hi {
            continue;
        }
        let i = index(d);
        counts[i] += 1;
        deaths[i] += usize::from(outcome == Outcome::Died);
        included += 1;
    }
    let bins = (0..k)
        .map(|i| UCurveBin {
            low: lo + width * i as f64,
            high: lo + width * (i + 1) as f64,
            count: counts[i],
            deaths: deaths[i],
            mortality: (counts[i] > 0).then(|| deaths[i] as f64 / counts[i] as f64),
        })
        .collect();
    Ok(UCurve {
        axis,
        aggregation: opts.aggregation,
        bins,
        zero_bin: index(0.0),
        n_included: included,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ActionGrid, Dataset, DiscreteAction, RawAction, RewardScheme, Step, Trajectory};
    use crate::representation::AxisBins;

    /// One-state data over a 3x1 grid with fluid medians (0, 2, 10).
    fn setup(rows: &[(usize, f64, Outcome)]) -> (DiscretizedDataset, DoseBins) {
        let trajs = rows
            .iter()
            .enumerate()
            .map(|(i, &(bin, dose, outcome))| {
                let mut step = Step::new(vec![0.0], RawAction { fluid: dose, vaso: 0.0 }, 0.0);
                step.reward = RewardScheme::default().terminal_for(outcome);
                step.state_id = Some(0);
                step.action = Some(DiscreteAction {
                    fluid_bin: bin,
                    vaso_bin: 0,
                });
                Trajectory {
                    id: format!("u{i}"),
                    outcome,
                    steps: vec![step],
                }
            })
            .collect();
        let ds = Dataset::new(trajs, vec![], RewardScheme::default()).unwrap();
        let grid = ActionGrid {
            fluid_bins: 3,
            vaso_bins: 1,
        };
        let db = DoseBins::new(AxisBins::new(vec![5.0], vec![0.0, 2.0, 10.0]).unwrap(), AxisBins::zero_only());
        (DiscretizedDataset::from_annotated(ds, 1, grid).unwrap(), db)
    }

    #[test]
    fn replica_policy_concentrates_at_zero() {
        let (dd, db) = setup(&[(1, 2.0, Outcome::Survived), (2, 10.0, Outcome::Died), (0, 0.0, Outcome::Survived)]);
        let p = TabularPolicy::deterministic(3, &[1]);
        let c = u_curve(&dd, &p, &db, TreatmentAxis::Fluid, &UCurveOptions::new(10)).unwrap();
        // Deviations: 0, −8, 2; unit-width bins over [−8, 2].
        assert_eq!(c.n_included, 3);
        assert_eq!(c.bins.iter().map(|b| b.count).sum::<usize>(), 3);
        assert_eq!(c.bins[c.zero_bin].count, 1);
        assert_eq!(c.bins[0].mortality, Some(1.0));
        assert!(c.bins.iter().any(|b| b.count == 0 && b.mortality.is_none()));
    }

    #[test]
    fn stochastic_policy_uses_expected_dose() {
        let (dd, db) = setup(&[(2, 10.0, Outcome::Died)]);
        let p = TabularPolicy::new(1, 3, vec![0.0, 0.5, 0.5]).unwrap();
        let opts = UCurveOptions {
            n_bins: 2,
            aggregation: Aggregation::PerStep,
            range: Some(8.0),
        };
        let c = u_curve(&dd, &p, &db, TreatmentAxis::Fluid, &opts).unwrap();
        // 0.5·2 + 0.5·10 − 10 = −4
        assert_eq!(c.bins[0].count, 1);
        assert_eq!(c.bins[0].low, -8.0);
    }

    #[test]
    fn u_shape_detection() {
        let (dd, db) = setup(&[
            (0, 0.0, Outcome::Died),
            (0, 0.0, Outcome::Survived),
            (1, 2.0, Outcome::Survived),
            (1, 2.0, Outcome::Survived),
            (2, 10.0, Outcome::Died),
        ]);
        let p = TabularPolicy::deterministic(3, &[1]);
        let c = u_curve(&dd, &p, &db, TreatmentAxis::Fluid, &UCurveOptions::new(5)).unwrap();
        // Deviations: +2, +2, 0, 0, −8; span [−8, 2], width 2.
        assert_eq!(c.zero_bin, 4);
        assert_eq!(c.bins[4].count, 4);
        assert_eq!(c.extremes(), (Some(0), None));
        assert!(!c.is_u_shaped());

        let opts = UCurveOptions {
            range: Some(8.0),
            ..UCurveOptions::new(5)
        };
        let c = u_curve(&dd, &p, &db, TreatmentAxis::Fluid, &opts).unwrap();
        // Range ±8, width 3.2.
        assert_eq!(c.zero_bin, 2);
        assert_eq!(c.extremes(), (Some(0), Some(3)));
        assert!(c.is_u_shaped());

        let none = TabularPolicy::deterministic(3, &[0]);
        let c = u_curve(&dd, &none, &db, TreatmentAxis::Fluid, &UCurveOptions::new(5)).unwrap();
        assert_eq!(c.extremes().1, None);
        assert!(!c.is_u_shaped());
    }
}
