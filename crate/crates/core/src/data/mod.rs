//! Observational trajectory data model.
//!
//! A [`Dataset`] is an ordered collection of patient [`Trajectory`]s. Each
//! trajectory is a sequence of [`Step`]s carrying the logged observation,
//! the raw treatment doses, and the per-step reward. Under the default
//! reward scheme every reward is zero except the last one, which is
//! `+terminal_reward` for survivors and `-terminal_reward` otherwise.
//!
//! Datasets are immutable once built; every analysis in the crate takes
//! them by shared reference.

pub mod io;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use io::{load_dataset, load_dataset_with, save_dataset};

pub const DEFAULT_GAMMA: f64 = 0.95;
pub const DEFAULT_TERMINAL_REWARD: f64 = 100.0;
pub const DEFAULT_BINS: usize = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no trajectories")]
    Empty,

    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("trajectory `{id}` step {step}: non-finite feature at index {index}")]
    NonFiniteFeature { id: String, step: usize, index: usize },

    #[error("trajectory `{id}` step {step}: expected {expected} features, found {found}")]
    FeatureDimension {
        id: String,
        step: usize,
        expected: usize,
        found: usize,
    },

    #[error("trajectory `{id}` step {step}: dose must be finite and non-negative, got {value}")]
    InvalidDose { id: String, step: usize, value: f64 },

    #[error("trajectory `{id}` has no steps")]
    EmptyTrajectory { id: String },

    #[error("trajectory `{id}` step {step}: reward {reward} violates the terminal reward scheme")]
    RewardScheme { id: String, step: usize, reward: f64 },

    #[error("trajectory `{id}` step {step}: {message}")]
    Annotation {
        id: String,
        step: usize,
        message: String,
    },

    #[error("partition needs at least 2 trajectories, got {0}")]
    TooFewToPartition(usize),

    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    TrainFraction(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ── Observations and actions ────────────────────────────────────────────

/// Logged covariates for one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Administered doses, one per treatment axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawAction {
    pub fluid: f64,
    pub vaso: f64,
}

impl RawAction {
    pub const NONE: RawAction = RawAction {
        fluid: 0.0,
        vaso: 0.0,
    };

    pub fn dose(&self, axis: TreatmentAxis) -> f64 {
        match axis {
            TreatmentAxis::Fluid => self.fluid,
            TreatmentAxis::Vaso => self.vaso,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreatmentAxis {
    Fluid,
    Vaso,
}

impl TreatmentAxis {
    pub const ALL: [TreatmentAxis; 2] = [TreatmentAxis::Fluid, TreatmentAxis::Vaso];
}

impl fmt::Display for TreatmentAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreatmentAxis::Fluid => f.write_str("fluid"),
            TreatmentAxis::Vaso => f.write_str("vaso"),
        }
    }
}

impl std::str::FromStr for TreatmentAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fluid" => Ok(TreatmentAxis::Fluid),
            "vaso" => Ok(TreatmentAxis::Vaso),
            other => Err(format!("unknown treatment axis `{other}`")),
        }
    }
}

/// Binned treatment choice. Bin 0 on an axis means no dose on that axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DiscreteAction {
    pub fluid_bin: usize,
    pub vaso_bin: usize,
}

impl DiscreteAction {
    pub const NO_TREATMENT: DiscreteAction = DiscreteAction {
        fluid_bin: 0,
        vaso_bin: 0,
    };

    pub fn bin(&self, axis: TreatmentAxis) -> usize {
        match axis {
            TreatmentAxis::Fluid => self.fluid_bin,
            TreatmentAxis::Vaso => self.vaso_bin,
        }
    }
}

/// Shape of the discrete action space: bins per axis.
///
/// Flat indices are `fluid_bin * vaso_bins + vaso_bin`, so the square
/// 5x5 grid gives `fluid_bin * 5 + vaso_bin` over 25 actions and index 0
/// is always "no treatment".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionGrid {
    pub fluid_bins: usize,
    pub vaso_bins: usize,
}

impl ActionGrid {
    pub fn square(bins: usize) -> Self {
        Self {
            fluid_bins: bins,
            vaso_bins: bins,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.fluid_bins * self.vaso_bins
    }

    pub fn bins(&self, axis: TreatmentAxis) -> usize {
        match axis {
            TreatmentAxis::Fluid => self.fluid_bins,
            TreatmentAxis::Vaso => self.vaso_bins,
        }
    }

    pub fn encode(&self, action: DiscreteAction) -> usize {
        debug_assert!(action.fluid_bin < self.fluid_bins && action.vaso_bin < self.vaso_bins);
        action.fluid_bin * self.vaso_bins + action.vaso_bin
    }

    pub fn decode(&self, flat: usize) -> DiscreteAction {
        DiscreteAction {
            fluid_bin: flat / self.vaso_bins,
            vaso_bin: flat % self.vaso_bins,
        }
    }

    pub fn contains(&self, action: DiscreteAction) -> bool {
        action.fluid_bin < self.fluid_bins && action.vaso_bin < self.vaso_bins
    }
}

impl Default for ActionGrid {
    fn default() -> Self {
        Self::square(DEFAULT_BINS)
    }
}

// ── Steps, trajectories, datasets ───────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Observation,
    pub raw_action: RawAction,
    pub reward: f64,
    /// Discretized state, once a representation has been applied.
    pub state_id: Option<usize>,
    /// Binned action, once dose bins have been applied.
    pub action: Option<DiscreteAction>,
}

impl Step {
    pub fn new(obs: Vec<f64>, raw_action: RawAction, reward: f64) -> Self {
        Self {
            obs: Observation(obs),
            raw_action,
            reward,
            state_id: None,
            action: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Survived,
    Died,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub outcome: Outcome,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.reward)
    }
}

/// How rewards are checked when a dataset is built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardScheme {
    pub terminal_reward: f64,
    /// When set, the last reward must be `±terminal_reward` by outcome and
    /// every earlier reward must be zero. Dense-reward experiments turn it off.
    pub strict: bool,
}

impl Default for RewardScheme {
    fn default() -> Self {
        Self {
            terminal_reward: DEFAULT_TERMINAL_REWARD,
            strict: true,
        }
    }
}

impl RewardScheme {
    pub fn dense() -> Self {
        Self {
            terminal_reward: DEFAULT_TERMINAL_REWARD,
            strict: false,
        }
    }

    pub fn terminal_for(&self, outcome: Outcome) -> f64 {
        match outcome {
            Outcome::Survived => self.terminal_reward,
            Outcome::Died => -self.terminal_reward,
        }
    }

    fn check(&self, traj: &Trajectory) -> Result<(), DataError> {
        if !self.strict {
            return Ok(());
        }
        let last = traj.steps.len() - 1;
        for (t, step) in traj.steps.iter().enumerate() {
            let expected = if t == last {
                self.terminal_for(traj.outcome)
            } else {
                0.0
            };
            if (step.reward - expected).abs() > 1e-9 * self.terminal_reward.max(1.0) {
                return Err(DataError::RewardScheme {
                    id: traj.id.clone(),
                    step: t,
                    reward: step.reward,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    feature_names: Vec<String>,
    metadata: BTreeMap<String, String>,
}

impl Dataset {
    /// Validates and wraps trajectories. Feature names default to `x0, x1, ...`
    /// when `feature_names` is empty.
    pub fn new(
        trajectories: Vec<Trajectory>,
        feature_names: Vec<String>,
        scheme: RewardScheme,
    ) -> Result<Self, DataError> {
        let dim = if feature_names.is_empty() {
            trajectories
                .first()
                .and_then(|t| t.steps.first())
                .map_or(0, |s| s.obs.dim())
        } else {
            feature_names.len()
        };
        for traj in &trajectories {
            validate_trajectory(traj, dim, scheme)?;
        }
        let feature_names = if feature_names.is_empty() {
            (0..dim).map(|i| format!("x{i}")).collect()
        } else {
            feature_names
        };
        Ok(Self {
            trajectories,
            feature_names,
            metadata: BTreeMap::new(),
        })
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn steps(&self) -> impl Iterator<Item = &Step> {
        self.trajectories.iter().flat_map(|t| t.steps.iter())
    }

    /// Copy holding the trajectories at `indices`, in the order given.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            trajectories: indices
                .iter()
                .map(|&i| self.trajectories[i].clone())
                .collect(),
            feature_names: self.feature_names.clone(),
            metadata: self.metadata.clone(),
        }
    }

    /// Replaces trajectories without re-running reward checks. Callers keep
    /// observations and doses unchanged (annotation only).
    pub(crate) fn with_trajectories(&self, trajectories: Vec<Trajectory>) -> Dataset {
        Dataset {
            trajectories,
            feature_names: self.feature_names.clone(),
            metadata: self.metadata.clone(),
        }
    }

    /// Stable digest of the trajectory id set, used to detect when a model
    /// is evaluated on the data it was fitted to.
    pub fn fingerprint(&self) -> String {
        let mut ids: Vec<&str> = self.trajectories.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        let mut hasher = Sha256::new();
        for id in ids {
            hasher.update(id.as_bytes());
            hasher.update([0u8]);
        }
        hasher
            .finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub(crate) fn validate_trajectory(traj: &Trajectory, dim: usize, scheme: RewardScheme) -> Result<(), DataError> {
    if traj.steps.is_empty() {
        return Err(DataError::EmptyTrajectory {
            id: traj.id.clone(),
        });
    }
    for (t, step) in traj.steps.iter().enumerate() {
        if step.obs.dim() != dim {
            return Err(DataError::FeatureDimension {
                id: traj.id.clone(),
                step: t,
                expected: dim,
                found: step.obs.dim(),
            });
        }
        if let Some(index) = step.obs.0.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteFeature {
                id: traj.id.clone(),
                step: t,
                index,
            });
        }
        for value in [step.raw_action.fluid, step.raw_action.vaso] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(DataError::InvalidDose {
                    id: traj.id.clone(),
                    step: t,
                    value,
                });
            }
        }
        if !step.reward.is_finite() {
            return Err(DataError::RewardScheme {
                id: traj.id.clone(),
                step: t,
                reward: step.reward,
            });
        }
        if let Some(action) = step.action {
            for axis in TreatmentAxis::ALL {
                if (action.bin(axis) == 0) != (step.raw_action.dose(axis) == 0.0) {
                    return Err(DataError::Annotation {
                        id: traj.id.clone(),
                        step: t,
                        message: format!("{axis} bin 0 must coincide with a zero dose"),
                    });
                }
            }
        }
    }
    scheme.check(traj)
}

// ── Configuration and summary statistics ────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub gamma: f64,
    pub terminal_reward: f64,
    pub n_bins: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            terminal_reward: DEFAULT_TERMINAL_REWARD,
            n_bins: DEFAULT_BINS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub mortality: f64,
    pub mean_length: f64,
    pub n_patients: usize,
}

/// `[1, γ, γ², …]` built by repeated multiplication. Every estimator uses
/// this table so discounted sums agree bit for bit across code paths.
pub fn discount_factors(gamma: f64, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut d = 1.0;
    for _ in 0..len {
        out.push(d);
        d *= gamma;
    }
    out
}

/// Discounted return `Σ_t γ^t r_t`; `gamma = 1` gives the plain sum.
pub fn compute_return(traj: &Trajectory, gamma: f64) -> f64 {
    let discounts = discount_factors(gamma, traj.len());
    traj.steps
        .iter()
        .zip(&discounts)
        .map(|(s, d)| d * s.reward)
        .sum()
}

pub fn cohort_stats(ds: &Dataset) -> Result<CohortStats, DataError> {
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    let n = ds.len();
    let died = ds
        .trajectories()
        .iter()
        .filter(|t| t.outcome == Outcome::Died)
        .count();
    Ok(CohortStats {
        mortality: died as f64 / n as f64,
        mean_length: ds.n_steps() as f64 / n as f64,
        n_patients: n,
    })
}

/// Value of a policy from cohort mortality `m` and mean stay `T̄`:
/// `γ^T̄ (−R·m + R·(1 − m))`.
pub fn expected_value_approx(mortality: f64, mean_length: f64, gamma: f64, terminal_reward: f64) -> f64 {
    gamma.powf(mean_length) * (-terminal_reward * mortality + terminal_reward * (1.0 - mortality))
}

/// Trajectory-level random split. The train side holds
/// `round(train_frac · N)` trajectories (clamped to `[1, N − 1]`); both sides
/// keep the original relative order.
pub fn partition(ds: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    let n = ds.len();
    if n < 2 {
        return Err(DataError::TooFewToPartition(n));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DataError::TrainFraction(train_frac));
    }
    let n_train = ((train_frac * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Trajectory with terminal-only reward and zero doses.
    pub fn sparse_traj(id: &str, len: usize, outcome: Outcome) -> Trajectory {
        let scheme = RewardScheme::default();
        let steps = (0..len)
            .map(|t| {
                let reward = if t + 1 == len {
                    scheme.terminal_for(outcome)
                } else {
                    0.0
                };
                Step::new(vec![t as f64, 1.0], RawAction::NONE, reward)
            })
            .collect();
        Trajectory {
            id: id.to_string(),
            outcome,
            steps,
        }
    }

    pub fn sparse_dataset(lengths: &[usize], outcomes: &[Outcome]) -> Dataset {
        let trajs = lengths
            .iter()
            .zip(outcomes)
            .enumerate()
            .map(|(i, (&len, &o))| sparse_traj(&format!("p{i}"), len, o))
            .collect();
        Dataset::new(trajs, vec![], RewardScheme::default()).unwrap()
    }
}
