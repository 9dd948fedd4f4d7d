//! Per-step importance ratios and their running products.

use serde::{Deserialize, Serialize};

use super::EstimatorError;
use crate::policies::TabularPolicy;
use crate::representation::{DiscretizedDataset, Episode};

/// Importance weights along one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSeries {
    /// `ρ_t = πe(a_t|s_t) / πb(a_t|s_t)`.
    pub ratios: Vec<f64>,
    /// `ρ_{0:t} = ρ_0 · … · ρ_t`.
    pub cumulative: Vec<f64>,
}

impl WeightSeries {
    /// Full-trajectory weight `w^H`, the last cumulative product.
    pub fn full(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(1.0)
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }
}

/// Ratios for one discretized trajectory. A logged action with zero
/// behavior probability is an error: the behavior estimate cannot have
/// produced the data.
pub fn importance_ratios(
    ep: &Episode<'_>,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
) -> Result<WeightSeries, EstimatorError> {
    let mut ratios = Vec::with_capacity(ep.len());
    let mut cumulative = Vec::with_capacity(ep.len());
    let mut running = 1.0;
    for (t, (&s, &a)) in ep.states.iter().zip(ep.actions).enumerate() {
        let pb = behavior.prob(s, a);
        if pb <= 0.0 {
            return Err(EstimatorError::ZeroBehaviorProbability {
                id: ep.trajectory.id.clone(),
                step: t,
                state: s,
                action: a,
            });
        }
        let rho = target.prob(s, a) / pb;
        running *= rho;
        ratios.push(rho);
        cumulative.push(running);
    }
    Ok(WeightSeries { ratios, cumulative })
}

pub(crate) fn check_shapes(
    dd: &DiscretizedDataset,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
) -> Result<(), EstimatorError> {
    for (name, p) in [("target", target), ("behavior", behavior)] {
        if p.n_states() != dd.n_states() || p.n_actions() != dd.n_actions() {
            return Err(EstimatorError::ShapeMismatch(format!(
                "{name} policy is {}x{}, data has {} states and {} actions",
                p.n_states(),
                p.n_actions(),
                dd.n_states(),
                dd.n_actions()
            )));
        }
    }
    Ok(())
}

/// Weight series for every trajectory, in dataset order.
pub fn compute_weights(
    dd: &DiscretizedDataset,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
) -> Result<Vec<WeightSeries>, EstimatorError> {
    check_shapes(dd, target, behavior)?;
    dd.episodes().map(|ep| importance_ratios(&ep, target, behavior)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::testing::annotated;

    #[test]
    fn on_policy_ratios_are_one() {
        let dd = annotated(&[(&[0, 1, 1], &[0, 1, 0])], 2, 2);
        let pb = TabularPolicy::new(2, 2, vec![0.3, 0.7, 0.6, 0.4]).unwrap();
        let ws = compute_weights(&dd, &pb, &pb).unwrap();
        assert_eq!(ws[0].ratios, vec![1.0; 3]);
        assert_eq!(ws[0].full(), 1.0);
    }

    #[test]
    fn mismatch_at_step_zero_zeroes_everything() {
        let dd = annotated(&[(&[0, 1], &[0, 1])], 2, 2);
        let pe = TabularPolicy::deterministic(2, &[1, 1]);
        let pb = TabularPolicy::uniform(2, 2);
        let ws = compute_weights(&dd, &pe, &pb).unwrap();
        assert_eq!(ws[0].cumulative, vec![0.0, 0.0]);
    }

    #[test]
    fn cumulative_products() {
        let dd = annotated(&[(&[0, 1], &[0, 0])], 2, 2);
        let pe = TabularPolicy::new(2, 2, vec![1.0, 0.0, 0.25, 0.75]).unwrap();
        let pb = TabularPolicy::new(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let ws = compute_weights(&dd, &pe, &pb).unwrap();
        assert_eq!(ws[0].ratios, vec![2.0, 0.5]);
        assert_eq!(ws[0].cumulative, vec![2.0, 1.0]);
    }

    #[test]
    fn zero_behavior_probability_is_an_error() {
        let dd = annotated(&[(&[0], &[1])], 1, 2);
        let pb = TabularPolicy::deterministic(2, &[0]);
        let err = compute_weights(&dd, &pb, &pb).unwrap_err();
        assert!(matches!(err, EstimatorError::ZeroBehaviorProbability { step: 0, action: 1, .. }));
    }
}
