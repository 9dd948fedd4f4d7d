//! Agreement between the treatment choices of two policies.

use super::{ClusterModel, RepresentationError};
use crate::data::Dataset;
use crate::policies::TabularPolicy;

/// Fraction of states (or, with `visit_weights`, of weighted visits) where
/// the two policies' tie-broken argmax actions coincide.
pub fn policy_agreement(
    a: &TabularPolicy,
    b: &TabularPolicy,
    visit_weights: Option<&[f64]>,
) -> Result<f64, RepresentationError> {
    if !a.same_shape(b) {
        return Err(RepresentationError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.n_states(),
            a.n_actions(),
            b.n_states(),
            b.n_actions()
        )));
    }
    let same = |s: usize| a.argmax(s) == b.argmax(s);
    match visit_weights {
        None => {
            if a.n_states() == 0 {
                return Err(RepresentationError::ZeroWeight);
            }
            let hits = (0..a.n_states()).filter(|&s| same(s)).count();
            Ok(hits as f64 / a.n_states() as f64)
        }
        Some(w) => {
            if w.len() != a.n_states() || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(RepresentationError::InvalidParameter(
                    "visit weights need one finite non-negative entry per state".into(),
                ));
            }
            let total: f64 = w.iter().sum();
            if total == 0.0 {
                return Err(RepresentationError::ZeroWeight);
            }
            let hits: f64 = (0..a.n_states()).filter(|&s| same(s)).map(|s| w[s]).sum();
            Ok(hits / total)
        }
    }
}

/// Agreement across two state representations, measured over the logged
/// steps of `reference`: each step is mapped to its state under each
/// clustering and the policies' argmax actions are compared.
pub fn step_agreement(
    reference: &Dataset,
    (cm_a, pi_a): (&ClusterModel, &TabularPolicy),
    (cm_b, pi_b): (&ClusterModel, &TabularPolicy),
) -> Result<f64, RepresentationError> {
    if pi_a.n_actions() != pi_b.n_actions() {
        return Err(RepresentationError::ShapeMismatch("action spaces differ".into()));
    }
    if pi_a.n_states() != cm_a.k() || pi_b.n_states() != cm_b.k() {
        return Err(RepresentationError::ShapeMismatch("policy does not match its clustering".into()));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for step in reference.steps() {
        let sa = cm_a.assign(step.obs.values())?;
        let sb = cm_b.assign(step.obs.values())?;
        hits += usize::from(pi_a.argmax(sa) == pi_b.argmax(sb));
        total += 1;
    }
    if total == 0 {
        return Err(RepresentationError::ZeroWeight);
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Outcome, RawAction, RewardScheme, Step, Trajectory};
    use crate::representation::{fit_kmeans, KMeansOptions};

    #[test]
    fn identical_and_disjoint() {
        let a = TabularPolicy::deterministic(3, &[0, 1, 2]);
        assert_eq!(policy_agreement(&a, &a, None).unwrap(), 1.0);
        let b = TabularPolicy::deterministic(3, &[1, 2, 0]);
        assert_eq!(policy_agreement(&a, &b, None).unwrap(), 0.0);
        let c = TabularPolicy::deterministic(3, &[0, 2, 2]);
        assert!((policy_agreement(&a, &c, None).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(policy_agreement(&a, &c, Some(&[5.0, 0.0, 1.0])).unwrap(), 1.0);
        assert!(policy_agreement(&a, &TabularPolicy::uniform(2, 3), None).is_err());
        assert!(matches!(
            policy_agreement(&a, &c, Some(&[0.0; 3])),
            Err(RepresentationError::ZeroWeight)
        ));
    }

    #[test]
    fn stochastic_rows_use_tie_broken_argmax() {
        let u = TabularPolicy::uniform(2, 4);
        let zero = TabularPolicy::deterministic(4, &[0, 0]);
        assert_eq!(policy_agreement(&u, &zero, None).unwrap(), 1.0);
    }

    #[test]
    fn step_agreement_same_representation() {
        let steps: Vec<Step> = (0..6)
            .map(|i| {
                let r = if i == 5 { 100.0 } else { 0.0 };
                Step::new(vec![i as f64], RawAction::NONE, r)
            })
            .collect();
        let ds = Dataset::new(
            vec![Trajectory {
                id: "t".into(),
                outcome: Outcome::Survived,
                steps,
            }],
            vec![],
            RewardScheme::default(),
        )
        .unwrap();
        let obs: Vec<&[f64]> = ds.steps().map(|s| s.obs.values()).collect();
        let cm = fit_kmeans(&obs, &KMeansOptions::new(2, 0)).unwrap();
        let pi = TabularPolicy::deterministic(3, &[1, 2]);
        assert_eq!(step_agreement(&ds, (&cm, &pi), (&cm, &pi)).unwrap(), 1.0);
        let flipped = TabularPolicy::deterministic(3, &[2, 1]);
        assert_eq!(step_agreement(&ds, (&cm, &pi), (&cm, &flipped)).unwrap(), 0.0);
    }
}
