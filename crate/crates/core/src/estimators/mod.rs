//! Off-policy value estimators: IS, PDIS, WIS, WPDIS, DR, WDR and the
//! model-based estimate.
//!
//! Every sample-based estimator has the same shape. With `d_t = γ^t` and a
//! per-step weight `u_t`,
//!
//! ```text
//! c_n   = Σ_t d_t · [ u_t · (r_t − q̂(s_t, a_t)) + u_{t−1} · v̂(s_t) ],  u_{−1} = 1
//! value = (1/N) Σ_n c_n
//! ```
//!
//! | estimator | `u_t`                     | critic |
//! |-----------|---------------------------|--------|
//! | IS        | `w^H`                     | none   |
//! | PDIS      | `ρ_{0:t}`                 | none   |
//! | WIS       | `w^H · N / Σ_m w^H_m`     | none   |
//! | WPDIS     | `ρ_{0:t} · N / Z_t`       | none   |
//! | DR        | `ρ_{0:t}`                 | `q̂`    |
//! | WDR       | `ρ_{0:t} · N / Z_t`       | `q̂`    |
//!
//! where `Z_t = Σ_m ρ^m_{0:min(t, T_m − 1)}`: a finished trajectory keeps
//! contributing its final weight to later normalizers. `v̂(s) = Σ_a πe(a|s)
//! q̂(s, a)`. The DR line is the backward recursion
//! `DR_t = v̂_t + ρ_t (r_t + γ DR_{t+1} − q̂_t)` unrolled from the front.
//!
//! Scaling normalized weights by `N` keeps `u_t = 1` exactly when the
//! policies coincide, so the on-policy collapse holds bit for bit, and the
//! zero-critic DR/WDR lines reduce term by term to PDIS/WPDIS.

pub mod weights;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::discount_factors;
use crate::diagnostics::{ess_count, ess_kish, DEFAULT_ESS_FLOOR};
use crate::policies::{evaluate_policy, MdpModel, PlanningOptions, PolicyError, QFunction, TabularPolicy};
use crate::representation::DiscretizedDataset;

pub use weights::{compute_weights, importance_ratios, WeightSeries};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(
        "trajectory `{id}` step {step}: behavior probability of logged action {action} in state {state} is zero"
    )]
    ZeroBehaviorProbability {
        id: String,
        step: usize,
        state: usize,
        action: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no trajectories to evaluate")]
    Empty,

    #[error("gamma must lie in (0, 1], got {0}")]
    Gamma(f64),

    #[error("{0} needs a critic")]
    MissingCritic(EstimatorKind),

    #[error("the model-based estimate needs a fitted model")]
    MissingModel,

    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Is,
    Pdis,
    Wis,
    Wpdis,
    Dr,
    Wdr,
    Mb,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        EstimatorKind::Is,
        EstimatorKind::Pdis,
        EstimatorKind::Wis,
        EstimatorKind::Wpdis,
        EstimatorKind::Dr,
        EstimatorKind::Wdr,
        EstimatorKind::Mb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Is => "is",
            EstimatorKind::Pdis => "pdis",
            EstimatorKind::Wis => "wis",
            EstimatorKind::Wpdis => "wpdis",
            EstimatorKind::Dr => "dr",
            EstimatorKind::Wdr => "wdr",
            EstimatorKind::Mb => "mb",
        }
    }

    pub fn needs_critic(self) -> bool {
        matches!(self, EstimatorKind::Dr | EstimatorKind::Wdr)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown estimator `{s}` (expected is|pdis|wis|wpdis|dr|wdr|mb)"))
    }
}

/// Conditions under which an estimate should not be trusted as is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Flag {
    /// Every trajectory weight is zero; the reported value is 0.
    AllWeightsZero,
    /// Fewer nonzero-weight trajectories than the ESS floor.
    LowESS,
    /// The target policy puts mass on actions the behavior policy never takes.
    SupportViolation,
    /// The critic or model was fitted to the evaluation data.
    ModelBiasWarning,
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub estimator: EstimatorKind,
    pub value: f64,
    /// Per-trajectory terms `c_n`; `value` is their mean. Empty for the
    /// model-based estimate.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub contributions: Vec<f64>,
    /// Trajectories with a nonzero full weight. `None` for the model-based
    /// estimate.
    pub n_nonzero: Option<usize>,
    /// Kish effective sample size of the full weights.
    pub ess: Option<f64>,
    pub flags: BTreeSet<Flag>,
}

impl EstimatorResult {
    pub fn has(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub gamma: f64,
    /// `LowESS` is raised below this many nonzero weights.
    pub ess_floor: usize,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            gamma: crate::data::DEFAULT_GAMMA,
            ess_floor: DEFAULT_ESS_FLOOR,
        }
    }
}

impl EstimatorOptions {
    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::default()
        }
    }
}

// ── Shared evaluation state ─────────────────────────────────────────────

/// Weights and normalizers computed once and shared by every estimator on
/// the same `(data, πe, πb, γ)`.
#[derive(Debug, Clone)]
pub struct OffPolicyData<'a> {
    dd: &'a DiscretizedDataset,
    target: &'a TabularPolicy,
    weights: Vec<WeightSeries>,
    discounts: Vec<f64>,
    /// `Z_t` for `t < max T`.
    step_normalizers: Vec<f64>,
    base_flags: BTreeSet<Flag>,
}

impl<'a> OffPolicyData<'a> {
    pub fn new(
        dd: &'a DiscretizedDataset,
        target: &'a TabularPolicy,
        behavior: &TabularPolicy,
        opts: EstimatorOptions,
    ) -> Result<Self, EstimatorError> {
        if !(opts.gamma > 0.0 && opts.gamma <= 1.0) {
            return Err(EstimatorError::Gamma(opts.gamma));
        }
        if dd.is_empty() {
            return Err(EstimatorError::Empty);
        }
        let weights = compute_weights(dd, target, behavior)?;
        let horizon = weights.iter().map(WeightSeries::len).max().unwrap_or(0);
        let mut step_normalizers = vec![0.0; horizon];
        for w in &weights {
            let last = w.full();
            for (t, z) in step_normalizers.iter_mut().enumerate() {
                *z += w.cumulative.get(t).copied().unwrap_or(last);
            }
        }

        let mut base_flags = BTreeSet::new();
        let fulls: Vec<f64> = weights.iter().map(WeightSeries::full).collect();
        let nonzero = ess_count(&fulls);
        if nonzero == 0 {
            base_flags.insert(Flag::AllWeightsZero);
        }
        if nonzero < opts.ess_floor {
            base_flags.insert(Flag::LowESS);
        }
        if support_violation(dd, target, behavior) {
            base_flags.insert(Flag::SupportViolation);
        }
        Ok(Self {
            dd,
            target,
            weights,
            discounts: discount_factors(opts.gamma, horizon),
            step_normalizers,
            base_flags,
        })
    }

    pub fn weights(&self) -> &[WeightSeries] {
        &self.weights
    }

    pub fn full_weights(&self) -> Vec<f64> {
        self.weights.iter().map(WeightSeries::full).collect()
    }

    pub fn flags(&self) -> &BTreeSet<Flag> {
        &self.base_flags
    }

    fn n(&self) -> f64 {
        self.weights.len() as f64
    }

    fn all_zero(&self) -> bool {
        self.base_flags.contains(&Flag::AllWeightsZero)
    }

    fn finish(&self, estimator: EstimatorKind, contributions: Vec<f64>, extra: Option<Flag>) -> EstimatorResult {
        let value = contributions.iter().sum::<f64>() / self.n();
        let fulls = self.full_weights();
        let mut flags = self.base_flags.clone();
        flags.extend(extra);
        EstimatorResult {
            estimator,
            value,
            contributions,
            n_nonzero: Some(ess_count(&fulls)),
            ess: Some(ess_kish(&fulls)),
            flags,
        }
    }

    /// `c_n` for per-step weights `u`, with an optional critic.
    fn contributions(&self, u: impl Fn(usize, usize) -> f64, critic: Option<(&QFunction, &[f64])>) -> Vec<f64> {
        self.dd
            .episodes()
            .enumerate()
            .map(|(n, ep)| {
                let mut c = 0.0;
                let mut prev = 1.0;
                for t in 0..ep.len() {
                    let r = ep.trajectory.steps[t].reward;
                    let ut = u(n, t);
                    let term = match critic {
                        None => ut * r,
                        Some((q, v)) => {
                            let (s, a) = (ep.states[t], ep.actions[t]);
                            ut * (r - q.get(s, a)) + prev * v[s]
                        }
                    };
                    c += self.discounts[t] * term;
                    prev = ut;
                }
                c
            })
            .collect()
    }

    fn zeroed(&self, estimator: EstimatorKind, extra: Option<Flag>) -> EstimatorResult {
        self.finish(estimator, vec![0.0; self.weights.len()], extra)
    }

    pub fn is(&self) -> EstimatorResult {
        let c = self.contributions(|n, _| self.weights[n].full(), None);
        self.finish(EstimatorKind::Is, c, None)
    }

    pub fn pdis(&self) -> EstimatorResult {
        let c = self.contributions(|n, t| self.weights[n].cumulative[t], None);
        self.finish(EstimatorKind::Pdis, c, None)
    }

    pub fn wis(&self) -> EstimatorResult {
        if self.all_zero() {
            return self.zeroed(EstimatorKind::Wis, None);
        }
        let z: f64 = self.full_weights().iter().sum();
        let n = self.n();
        let c = self.contributions(|i, _| self.weights[i].full() * n / z, None);
        self.finish(EstimatorKind::Wis, c, None)
    }

    fn normalized(&self, n: usize, t: usize) -> f64 {
        self.weights[n].cumulative[t] * self.n() / self.step_normalizers[t]
    }

    pub fn wpdis(&self) -> EstimatorResult {
        if self.all_zero() {
            return self.zeroed(EstimatorKind::Wpdis, None);
        }
        let c = self.contributions(|n, t| self.normalized(n, t), None);
        self.finish(EstimatorKind::Wpdis, c, None)
    }

    fn critic_parts(&self, q: &QFunction) -> Result<(Vec<f64>, Option<Flag>), EstimatorError> {
        if q.n_states() != self.dd.n_states() || q.n_actions() != self.dd.n_actions() {
            return Err(EstimatorError::ShapeMismatch(format!(
                "critic is {}x{}, data has {} states and {} actions",
                q.n_states(),
                q.n_actions(),
                self.dd.n_states(),
                self.dd.n_actions()
            )));
        }
        let leak = q.source().is_some_and(|s| s == self.dd.dataset().fingerprint());
        Ok((q.state_values(self.target), leak.then_some(Flag::ModelBiasWarning)))
    }

    pub fn dr(&self, q: &QFunction) -> Result<EstimatorResult, EstimatorError> {
        let (v, flag) = self.critic_parts(q)?;
        let c = self.contributions(|n, t| self.weights[n].cumulative[t], Some((q, &v)));
        Ok(self.finish(EstimatorKind::Dr, c, flag))
    }

    pub fn wdr(&self, q: &QFunction) -> Result<EstimatorResult, EstimatorError> {
        let (v, flag) = self.critic_parts(q)?;
        if self.all_zero() {
            return Ok(self.zeroed(EstimatorKind::Wdr, flag));
        }
        let c = self.contributions(|n, t| self.normalized(n, t), Some((q, &v)));
        Ok(self.finish(EstimatorKind::Wdr, c, flag))
    }

    /// Runs one sample-based estimator. `Mb` is not sample-based; use
    /// [`model_based_estimate`].
    pub fn estimate(&self, kind: EstimatorKind, critic: Option<&QFunction>) -> Result<EstimatorResult, EstimatorError> {
        match kind {
            EstimatorKind::Is => Ok(self.is()),
            EstimatorKind::Pdis => Ok(self.pdis()),
            EstimatorKind::Wis => Ok(self.wis()),
            EstimatorKind::Wpdis => Ok(self.wpdis()),
            EstimatorKind::Dr => self.dr(critic.ok_or(EstimatorError::MissingCritic(kind))?),
            EstimatorKind::Wdr => self.wdr(critic.ok_or(EstimatorError::MissingCritic(kind))?),
            EstimatorKind::Mb => Err(EstimatorError::MissingModel),
        }
    }
}

/// Whether `πe` gives positive probability to an action with zero behavior
/// probability in some visited state.
fn support_violation(dd: &DiscretizedDataset, target: &TabularPolicy, behavior: &TabularPolicy) -> bool {
    dd.state_visits().iter().enumerate().any(|(s, &count)| {
        count > 0
            && target
                .row(s)
                .iter()
                .zip(behavior.row(s))
                .any(|(&pe, &pb)| pe > 0.0 && pb == 0.0)
    })
}

// ── Free-function forms ─────────────────────────────────────────────────

fn with_data<T>(
    dd: &DiscretizedDataset,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    gamma: f64,
    f: impl FnOnce(&OffPolicyData<'_>) -> Result<T, EstimatorError>,
) -> Result<T, EstimatorError> {
    f(&OffPolicyData::new(dd, target, behavior, EstimatorOptions::with_gamma(gamma))?)
}

pub fn is_estimate(
    dd: &DiscretizedDataset,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    gamma: f64,
) -> Result<EstimatorResult, EstimatorError> {
    with_data(dd, target, behavior, gamma, |d| Ok(d.is()))
}

pub fn pdis_estimate(
    dd: &DiscretizedDataset,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    gamma: f64,
) -> Result<EstimatorResult, EstimatorError> {
    with_data(dd, target, behavior, gamma, |d| Ok(d.pdis()))
}

pub fn wis_estimate(
    dd: &DiscretizedDataset,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    gamma: f64,
) -> Result<EstimatorResult, EstimatorError> {
    with_data(dd, target, behavior, gamma, |d| Ok(d.wis()))
}

pub fn wpdis_estimate(
    dd: &DiscretizedDataset,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    gamma: f64,
) -> Result<EstimatorResult, EstimatorError> {
    with_data(dd, target, behavior, gamma, |d| Ok(d.wpdis()))
}

pub fn dr_estimate(
    dd: &DiscretizedDataset,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    critic: &QFunction,
    gamma: f64,
) -> Result<EstimatorResult, EstimatorError> {
    with_data(dd, target, behavior, gamma, |d| d.dr(critic))
}

pub fn wdr_estimate(
    dd: &DiscretizedDataset,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    critic: &QFunction,
    gamma: f64,
) -> Result<EstimatorResult, EstimatorError> {
    with_data(dd, target, behavior, gamma, |d| d.wdr(critic))
}

/// Exact evaluation of `target` on a fitted model, weighted by the model's
/// initial-state distribution. `eval_fingerprint`, when given, is compared
/// with the model's training data to raise `ModelBiasWarning`.
pub fn model_based_estimate(
    mdp: &MdpModel,
    target: &TabularPolicy,
    opts: &PlanningOptions,
    eval_fingerprint: Option<&str>,
) -> Result<EstimatorResult, EstimatorError> {
    let pv = evaluate_policy(mdp, target, opts)?;
    let mut flags = BTreeSet::new();
    if eval_fingerprint.is_some() && mdp.source() == eval_fingerprint {
        flags.insert(Flag::ModelBiasWarning);
    }
    Ok(EstimatorResult {
        estimator: EstimatorKind::Mb,
        value: pv.initial_value,
        contributions: vec![],
        n_nonzero: None,
        ess: None,
        flags,
    })
}
