//! Tabular policies, behavior-policy estimation, and baseline policies.
//!
//! Policies are row-stochastic `S × A` matrices over discretized states.
//! Deterministic policies are one-hot rows. Wherever an argmax is taken,
//! ties resolve to the lowest action index.

pub mod mdp;
pub mod planning;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::representation::DiscretizedDataset;

pub use mdp::{fit_mdp, MdpModel, UnvisitedConvention};
pub use planning::{evaluate_policy, greedy_policy, value_iteration, PlanningOptions, PolicyValue, QFunction};

pub const DEFAULT_SMOOTHING: f64 = 0.01;
const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("value iteration did not converge after {iterations} sweeps (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("gamma = 1 requires a finite horizon")]
    UndiscountedInfiniteHorizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyWire", into = "PolicyWire")]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
    deterministic: bool,
}

#[derive(Serialize, Deserialize)]
struct PolicyWire {
    n_states: usize,
    n_actions: usize,
    deterministic: bool,
    probs: Vec<Vec<f64>>,
}

impl TryFrom<PolicyWire> for TabularPolicy {
    type Error = PolicyError;

    fn try_from(w: PolicyWire) -> Result<Self, Self::Error> {
        if w.probs.len() != w.n_states || w.probs.iter().any(|r| r.len() != w.n_actions) {
            return Err(PolicyError::DimensionMismatch(format!(
                "expected {} rows of {} probabilities",
                w.n_states, w.n_actions
            )));
        }
        let p = TabularPolicy::new(w.n_states, w.n_actions, w.probs.concat())?;
        if w.deterministic && !p.deterministic {
            return Err(PolicyError::InvalidPolicy("flagged deterministic but rows are not one-hot".into()));
        }
        Ok(p)
    }
}

impl From<TabularPolicy> for PolicyWire {
    fn from(p: TabularPolicy) -> Self {
        PolicyWire {
            n_states: p.n_states,
            n_actions: p.n_actions,
            deterministic: p.deterministic,
            probs: p.probs.chunks(p.n_actions).map(<[f64]>::to_vec).collect(),
        }
    }
}

impl TabularPolicy {
    /// Builds a policy from row-major probabilities, validating each row.
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self, PolicyError> {
        if n_actions == 0 {
            return Err(PolicyError::InvalidPolicy("no actions".into()));
        }
        if probs.len() != n_states * n_actions {
            return Err(PolicyError::DimensionMismatch(format!(
                "{} probabilities for {n_states}x{n_actions}",
                probs.len()
            )));
        }
        let mut deterministic = true;
        for (s, row) in probs.chunks(n_actions).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                return Err(PolicyError::InvalidPolicy(format!("state {s}: negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(PolicyError::InvalidPolicy(format!("state {s}: row sums to {sum}")));
            }
            deterministic &= row.iter().filter(|&&p| p != 0.0).count() == 1 && row.contains(&1.0);
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
            deterministic,
        })
    }

    /// One-hot policy choosing `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            assert!(a < n_actions, "action {a} out of range");
            probs[s * n_actions + a] = 1.0;
        }
        Self {
            n_states: actions.len(),
            n_actions,
            probs,
            deterministic: true,
        }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
            deterministic: n_actions == 1,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.n_actions + action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state * self.n_actions..(state + 1) * self.n_actions]
    }

    /// Most probable action, lowest index on ties.
    pub fn argmax(&self, state: usize) -> usize {
        argmax_lowest(self.row(state))
    }

    pub fn argmax_actions(&self) -> Vec<usize> {
        (0..self.n_states).map(|s| self.argmax(s)).collect()
    }

    pub fn same_shape(&self, other: &TabularPolicy) -> bool {
        self.n_states == other.n_states && self.n_actions == other.n_actions
    }
}

pub(crate) fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

// ── Behavior policy ─────────────────────────────────────────────────────

/// Empirical behavior policy `(count(s,a) + α) / (count(s) + α·A)`.
/// Rows of unvisited states are uniform.
pub fn estimate_behavior_policy(dd: &DiscretizedDataset, smoothing: f64) -> Result<TabularPolicy, PolicyError> {
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(PolicyError::InvalidParameter(format!("smoothing must be >= 0, got {smoothing}")));
    }
    let (s_n, a_n) = (dd.n_states(), dd.n_actions());
    let mut counts = vec![0u64; s_n * a_n];
    for ep in dd.episodes() {
        for (&s, &a) in ep.states.iter().zip(ep.actions) {
            counts[s * a_n + a] += 1;
        }
    }
    let mut probs = vec![0.0; s_n * a_n];
    for s in 0..s_n {
        let row = &counts[s * a_n..(s + 1) * a_n];
        let total: u64 = row.iter().sum();
        let out = &mut probs[s * a_n..(s + 1) * a_n];
        if total == 0 {
            out.fill(1.0 / a_n as f64);
            continue;
        }
        let denom = total as f64 + smoothing * a_n as f64;
        for (o, &c) in out.iter_mut().zip(row) {
            *o = (c as f64 + smoothing) / denom;
        }
    }
    TabularPolicy::new(s_n, a_n, probs)
}

// ── Softening and baselines ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub enum Softening<'a> {
    /// `(1 − ε)·p + ε·uniform`.
    Epsilon(f64),
    /// Boltzmann over the Q-values: `softmax(Q(s,·) / temperature)`.
    Temperature { q: &'a QFunction, temperature: f64 },
}

pub fn soften_policy(policy: &TabularPolicy, mode: Softening<'_>) -> Result<TabularPolicy, PolicyError> {
    match mode {
        Softening::Epsilon(eps) => {
            if !(0.0..=1.0).contains(&eps) {
                return Err(PolicyError::InvalidParameter(format!("epsilon must lie in [0, 1], got {eps}")));
            }
            let uniform = eps / policy.n_actions as f64;
            let probs = policy.probs.iter().map(|p| (1.0 - eps) * p + uniform).collect();
            TabularPolicy::new(policy.n_states, policy.n_actions, probs)
        }
        Softening::Temperature { q, temperature } => {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(PolicyError::InvalidParameter(format!(
                    "temperature must be positive, got {temperature}"
                )));
            }
            if q.n_states() != policy.n_states || q.n_actions() != policy.n_actions {
                return Err(PolicyError::DimensionMismatch("Q-function and policy shapes differ".into()));
            }
            let mut probs = Vec::with_capacity(policy.probs.len());
            for s in 0..q.n_states() {
                let row = q.row(s);
                let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| ((v - top) / temperature).exp()).collect();
                let z: f64 = exps.iter().sum();
                probs.extend(exps.iter().map(|e| e / z));
            }
            TabularPolicy::new(policy.n_states, policy.n_actions, probs)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BaselineKind<'a> {
    /// Uniform over all actions.
    Random,
    /// Always action 0 (zero dose on every axis).
    NoAction,
    /// The behavior policy's most frequent action in each state.
    MostCommon(&'a TabularPolicy),
}

pub fn baseline_policy(kind: BaselineKind<'_>, n_states: usize, n_actions: usize) -> Result<TabularPolicy, PolicyError> {
    match kind {
        BaselineKind::Random => Ok(TabularPolicy::uniform(n_states, n_actions)),
        BaselineKind::NoAction => Ok(TabularPolicy::deterministic(n_actions, &vec![0; n_states])),
        BaselineKind::MostCommon(behavior) => {
            if behavior.n_states != n_states || behavior.n_actions != n_actions {
                return Err(PolicyError::DimensionMismatch(format!(
                    "behavior policy is {}x{}, expected {n_states}x{n_actions}",
                    behavior.n_states, behavior.n_actions
                )));
            }
            Ok(TabularPolicy::deterministic(n_actions, &behavior.argmax_actions()))
        }
    }
}

/// Total-variation distance between two rows.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::testing::annotated;

    #[test]
    fn rejects_non_stochastic_rows() {
        assert!(TabularPolicy::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(TabularPolicy::new(1, 2, vec![-0.5, 1.5]).is_err());
        assert!(TabularPolicy::new(2, 2, vec![0.5, 0.5]).is_err());
        let p = TabularPolicy::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(p.is_deterministic());
    }

    #[test]
    fn json_round_trip() {
        let p = TabularPolicy::new(2, 3, vec![0.2, 0.3, 0.5, 0.0, 1.0, 0.0]).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"probs\":[[0.2,0.3,0.5],[0.0,1.0,0.0]]"), "{text}");
        let back: TabularPolicy = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        let bad = r#"{"n_states":1,"n_actions":2,"deterministic":false,"probs":[[0.9,0.9]]}"#;
        assert!(serde_json::from_str::<TabularPolicy>(bad).is_err());
    }

    #[test]
    fn behavior_counts() {
        // state 0: actions 0,0,0,1 ; state 1 never visited
        let dd = annotated(&[(&[0, 0], &[0, 0]), (&[0, 0], &[0, 1])], 2, 2);
        let pb = estimate_behavior_policy(&dd, 0.0).unwrap();
        assert_eq!(pb.row(0), &[0.75, 0.25]);
        assert_eq!(pb.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn unvisited_state_uniform_over_25() {
        let dd = annotated(&[(&[0], &[3])], 2, 25);
        let pb = estimate_behavior_policy(&dd, DEFAULT_SMOOTHING).unwrap();
        assert!(pb.row(1).iter().all(|&p| (p - 0.04).abs() < 1e-15));
        assert!(pb.prob(0, 0) > 0.0);
    }

    #[test]
    fn smoothing_moves_toward_uniform() {
        let dd = annotated(&[(&[0, 0, 0, 1], &[0, 0, 1, 2])], 2, 3);
        let uniform = [1.0 / 3.0; 3];
        let mut last = f64::INFINITY;
        for alpha in [0.0, 0.1, 1.0, 10.0] {
            let pb = estimate_behavior_policy(&dd, alpha).unwrap();
            let tv = total_variation(pb.row(0), &uniform);
            assert!(tv < last || (tv == 0.0 && last == 0.0));
            last = tv;
        }
    }

    #[test]
    fn epsilon_softening() {
        let p = TabularPolicy::deterministic(25, &[7]);
        assert_eq!(soften_policy(&p, Softening::Epsilon(0.0)).unwrap(), p);
        let u = soften_policy(&p, Softening::Epsilon(1.0)).unwrap();
        assert!(u.row(0).iter().all(|&x| (x - 0.04).abs() < 1e-15));
        let s = soften_policy(&p, Softening::Epsilon(0.1)).unwrap();
        assert!((s.prob(0, 0) - 0.004).abs() < 1e-15);
        assert!((s.prob(0, 7) - (0.9 + 0.004)).abs() < 1e-15);
        assert!(soften_policy(&p, Softening::Epsilon(1.5)).is_err());
    }

    #[test]
    fn temperature_softening() {
        let q = QFunction::from_values(1, 3, vec![0.0, 1.0, 1.0], 0.9).unwrap();
        let p = TabularPolicy::uniform(1, 3);
        let s = soften_policy(&p, Softening::Temperature { q: &q, temperature: 1.0 }).unwrap();
        assert!((s.prob(0, 1) - s.prob(0, 2)).abs() < 1e-15);
        assert!(s.prob(0, 0) < s.prob(0, 1));
        let cold = soften_policy(&p, Softening::Temperature { q: &q, temperature: 1e-3 }).unwrap();
        assert!(cold.prob(0, 0) < 1e-100);
        assert!(soften_policy(&p, Softening::Temperature { q: &q, temperature: 0.0 }).is_err());
    }

    #[test]
    fn baselines() {
        let none = baseline_policy(BaselineKind::NoAction, 3, 25).unwrap();
        assert!((0..3).all(|s| none.prob(s, 0) == 1.0));
        let random = baseline_policy(BaselineKind::Random, 2, 25).unwrap();
        assert!(random.row(1).iter().all(|&p| p == 0.04));
        let pb = TabularPolicy::new(1, 2, vec![0.75, 0.25]).unwrap();
        let mc = baseline_policy(BaselineKind::MostCommon(&pb), 1, 2).unwrap();
        assert_eq!(mc.argmax(0), 0);
        assert!(mc.is_deterministic());
        assert!(baseline_policy(BaselineKind::MostCommon(&pb), 2, 2).is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax_lowest(&[1.0, 5.0, 5.0]), 1);
        assert_eq!(argmax_lowest(&[1.0, 2.0, 3.0]), 2);
        assert_eq!(argmax_lowest(&[4.0, 4.0]), 0);
    }
}
