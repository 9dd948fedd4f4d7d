//! Value iteration and exact policy evaluation on a fitted [`MdpModel`].

use serde::{Deserialize, Serialize};

use super::{argmax_lowest, MdpModel, PolicyError, TabularPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanningOptions {
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Run exactly this many sweeps instead of iterating to convergence.
    /// Required when `gamma = 1`.
    pub horizon: Option<usize>,
}

impl Default for PlanningOptions {
    fn default() -> Self {
        Self {
            gamma: crate::data::DEFAULT_GAMMA,
            tol: 1e-10,
            max_iter: 100_000,
            horizon: None,
        }
    }
}

impl PlanningOptions {
    pub fn discounted(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::default()
        }
    }

    pub fn finite_horizon(gamma: f64, horizon: usize) -> Self {
        Self {
            gamma,
            horizon: Some(horizon),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(PolicyError::InvalidParameter(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.horizon.is_none() {
            if self.gamma == 1.0 {
                return Err(PolicyError::UndiscountedInfiniteHorizon);
            }
            if !(self.tol > 0.0) {
                return Err(PolicyError::InvalidParameter(format!("tol must be positive, got {}", self.tol)));
            }
        }
        Ok(())
    }
}

/// State-action values over the non-terminal states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QWire", into = "QWire")]
pub struct QFunction {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    values: Vec<f64>,
    source: Option<String>,
    residuals: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct QWire {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    #[serde(default)]
    source: Option<String>,
    q: Vec<Vec<f64>>,
}

impl From<QFunction> for QWire {
    fn from(q: QFunction) -> Self {
        QWire {
            n_states: q.n_states,
            n_actions: q.n_actions,
            gamma: q.gamma,
            source: q.source,
            q: q.values.chunks(q.n_actions).map(<[f64]>::to_vec).collect(),
        }
    }
}

impl TryFrom<QWire> for QFunction {
    type Error = PolicyError;

    fn try_from(w: QWire) -> Result<Self, Self::Error> {
        if w.q.len() != w.n_states || w.q.iter().any(|r| r.len() != w.n_actions) {
            return Err(PolicyError::DimensionMismatch(format!(
                "expected {} rows of {} values",
                w.n_states, w.n_actions
            )));
        }
        let mut q = QFunction::from_values(w.n_states, w.n_actions, w.q.concat(), w.gamma)?;
        q.source = w.source;
        Ok(q)
    }
}

impl QFunction {
    pub fn from_values(n_states: usize, n_actions: usize, values: Vec<f64>, gamma: f64) -> Result<Self, PolicyError> {
        if n_actions == 0 || values.len() != n_states * n_actions {
            return Err(PolicyError::DimensionMismatch(format!(
                "{} values for {n_states}x{n_actions}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::InvalidParameter("Q-values must be finite".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            gamma,
            values,
            source: None,
            residuals: Vec::new(),
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.n_actions + action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.values[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Fingerprint of the data the underlying model was fitted to.
    pub fn source(&self) -> Option<&str> {
        self.source.as_deref()
    }

    pub fn with_source(mut self, source: Option<String>) -> Self {
        self.source = source;
        self
    }

    /// Sup-norm change per sweep, in order. Not serialized.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `v(s) = Σ_a π(a|s) Q(s, a)`.
    pub fn state_values(&self, policy: &TabularPolicy) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| policy.row(s).iter().zip(self.row(s)).map(|(p, q)| p * q).sum())
            .collect()
    }
}

fn backup(mdp: &MdpModel, v: &[f64], gamma: f64, s: usize, a: usize) -> f64 {
    mdp.transition_row(s, a)
        .iter()
        .enumerate()
        .filter(|(_, &p)| p != 0.0)
        .map(|(next, &p)| p * (mdp.reward(s, next) + gamma * v.get(next).copied().unwrap_or(0.0)))
        .sum()
}

/// Sweeps `Q ← T Q` from zero. `choose` turns a Q-row into a state value
/// (max for control, a policy average for evaluation).
fn sweep_to_fixpoint(
    mdp: &MdpModel,
    opts: &PlanningOptions,
    choose: impl Fn(usize, &[f64]) -> f64,
) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
    opts.validate()?;
    let (s_n, a_n) = (mdp.n_states(), mdp.n_actions());
    let mut q = vec![0.0; s_n * a_n];
    let mut v = vec![0.0; s_n];
    let mut residuals = Vec::new();
    let sweeps = opts.horizon.unwrap_or(opts.max_iter);
    for _ in 0..sweeps {
        let mut next = vec![0.0; s_n * a_n];
        for s in 0..s_n {
            for a in 0..a_n {
                next[s * a_n + a] = backup(mdp, &v, opts.gamma, s, a);
            }
        }
        let residual = next.iter().zip(&q).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        residuals.push(residual);
        q = next;
        for (s, vs) in v.iter_mut().enumerate() {
            *vs = choose(s, &q[s * a_n..(s + 1) * a_n]);
        }
        if opts.horizon.is_none() && residual < opts.tol {
            return Ok((q, residuals));
        }
    }
    if opts.horizon.is_none() {
        return Err(PolicyError::NonConvergence {
            iterations: opts.max_iter,
            residual: residuals.last().copied().unwrap_or(f64::INFINITY),
        });
    }
    Ok((q, residuals))
}

/// Optimal Q-values of `mdp`.
pub fn value_iteration(mdp: &MdpModel, opts: &PlanningOptions) -> Result<QFunction, PolicyError> {
    let (values, residuals) = sweep_to_fixpoint(mdp, opts, |_, row| row[argmax_lowest(row)])?;
    let mut q = QFunction::from_values(mdp.n_states(), mdp.n_actions(), values, opts.gamma)?;
    q.source = mdp.source().map(str::to_string);
    q.residuals = residuals;
    Ok(q)
}

/// Deterministic argmax policy, lowest action on ties.
pub fn greedy_policy(q: &QFunction) -> TabularPolicy {
    let actions: Vec<usize> = (0..q.n_states).map(|s| argmax_lowest(q.row(s))).collect();
    TabularPolicy::deterministic(q.n_actions, &actions)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValue {
    pub q: QFunction,
    /// `v(s) = Σ_a π(a|s) Q^π(s, a)`.
    pub v: Vec<f64>,
    /// `Σ_s μ0(s) v(s)`.
    pub initial_value: f64,
}

/// Exact evaluation of `policy` on `mdp` by iterating its Bellman operator.
pub fn evaluate_policy(mdp: &MdpModel, policy: &TabularPolicy, opts: &PlanningOptions) -> Result<PolicyValue, PolicyError> {
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(PolicyError::DimensionMismatch(format!(
            "policy is {}x{}, model is {}x{}",
            policy.n_states(),
            policy.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    let (values, residuals) = sweep_to_fixpoint(mdp, opts, |s, row| {
        policy.row(s).iter().zip(row).map(|(p, q)| p * q).sum()
    })?;
    let mut q = QFunction::from_values(mdp.n_states(), mdp.n_actions(), values, opts.gamma)?;
    q.source = mdp.source().map(str::to_string);
    q.residuals = residuals;
    let v = q.state_values(policy);
    let initial_value = mdp.initial_distribution().iter().zip(&v).map(|(m, v)| m * v).sum();
    Ok(PolicyValue { q, v, initial_value })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Builds a model from `(state, action, next, prob)` entries.
    fn model(s_n: usize, a_n: usize, entries: &[(usize, usize, usize, f64)]) -> MdpModel {
        let w = s_n + 2;
        let mut t = vec![0.0; w * a_n * w];
        for &(s, a, n, p) in entries {
            t[(s * a_n + a) * w + n] = p;
        }
        let mut init = vec![0.0; s_n];
        init[0] = 1.0;
        MdpModel::from_parts(s_n, a_n, 100.0, t, init).unwrap()
    }

    #[test]
    fn one_step_to_alive() {
        let m = model(1, 1, &[(0, 0, 1, 1.0)]);
        let q = value_iteration(&m, &PlanningOptions::discounted(0.95)).unwrap();
        assert_eq!(q.get(0, 0), 100.0);
    }

    #[test]
    fn two_steps_to_alive() {
        let m = model(2, 1, &[(0, 0, 1, 1.0), (1, 0, 2, 1.0)]);
        let q = value_iteration(&m, &PlanningOptions::discounted(0.95)).unwrap();
        assert!((q.get(0, 0) - 95.0).abs() < 1e-12);
    }

    #[test]
    fn residuals_non_increasing() {
        let m = model(
            2,
            2,
            &[
                (0, 0, 0, 0.6),
                (0, 0, 3, 0.4),
                (0, 1, 1, 0.9),
                (0, 1, 2, 0.1),
                (1, 0, 0, 0.5),
                (1, 0, 2, 0.5),
                (1, 1, 1, 0.8),
                (1, 1, 3, 0.2),
            ],
        );
        let q = value_iteration(&m, &PlanningOptions::discounted(0.95)).unwrap();
        let r = q.residuals();
        assert!(r.len() > 10);
        assert!(r.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        assert!(q.max_abs() <= 100.0);
    }

    #[test]
    fn undiscounted_needs_horizon() {
        let m = model(1, 1, &[(0, 0, 0, 1.0)]);
        assert!(matches!(
            value_iteration(&m, &PlanningOptions::discounted(1.0)),
            Err(PolicyError::UndiscountedInfiniteHorizon)
        ));
        let q = value_iteration(&m, &PlanningOptions::finite_horizon(1.0, 5)).unwrap();
        assert_eq!(q.get(0, 0), 0.0);
        assert_eq!(q.residuals().len(), 5);
    }

    #[test]
    fn non_convergence_reports_residual() {
        let m = model(1, 1, &[(0, 0, 0, 0.5), (0, 0, 1, 0.5)]);
        let opts = PlanningOptions {
            gamma: 0.99,
            tol: 1e-12,
            max_iter: 3,
            horizon: None,
        };
        match value_iteration(&m, &opts) {
            Err(PolicyError::NonConvergence { iterations: 3, residual }) => assert!(residual > 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn greedy_ties_and_invariance() {
        let q = QFunction::from_values(2, 3, vec![1.0, 5.0, 5.0, 1.0, 2.0, 3.0], 0.9).unwrap();
        let p = greedy_policy(&q);
        assert_eq!(p.argmax_actions(), vec![1, 2]);
        let shifted = QFunction::from_values(2, 3, q.values().iter().map(|v| 3.0 * v + 7.0).collect(), 0.9).unwrap();
        assert_eq!(greedy_policy(&shifted), p);
    }

    #[test]
    fn evaluation_matches_control_for_greedy() {
        let m = model(
            2,
            2,
            &[
                (0, 0, 1, 1.0),
                (0, 1, 3, 1.0),
                (1, 0, 2, 0.7),
                (1, 0, 3, 0.3),
                (1, 1, 2, 0.4),
                (1, 1, 0, 0.6),
            ],
        );
        let opts = PlanningOptions::discounted(0.9);
        let q = value_iteration(&m, &opts).unwrap();
        let pi = greedy_policy(&q);
        let pv = evaluate_policy(&m, &pi, &opts).unwrap();
        for s in 0..2 {
            let best = q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((pv.v[s] - best).abs() < 1e-8);
        }
        // Optimal: action 1 in state 1 (40 + 0.54·v0) and action 0 in state 0
        // (0.9·v1), so v1 = 40 / (1 − 0.486).
        let v1 = 40.0 / (1.0 - 0.486);
        assert_eq!(pi.argmax_actions(), vec![0, 1]);
        assert!((pv.initial_value - 0.9 * v1).abs() < 1e-8, "{}", pv.initial_value);
    }

    #[test]
    fn q_json_round_trip() {
        let q = QFunction::from_values(1, 2, vec![1.5, -2.0], 0.95).unwrap().with_source(Some("abc".into()));
        let text = serde_json::to_string(&q).unwrap();
        let back: QFunction = serde_json::from_str(&text).unwrap();
        assert_eq!(back, q);
    }
}
