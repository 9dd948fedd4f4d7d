//! Confounded synthetic ICU with exact ground truth.
//!
//! A patient's true state is an acuity level `1..=n` and a frailty bit.
//! Acuity 0 is discharge and acuity `n + 1` is death. Each step the
//! clinician picks a treatment level on each axis; the patient then
//! deteriorates with probability `p_up`, otherwise improves with
//! probability `p_down`, otherwise stays:
//!
//! ```text
//! need(a)   = (a − 1) / (n − 1)
//! x         = flat action index / (number of actions − 1)
//! coverage  = 0 if x = 0, 1 if x ≥ need, x / need otherwise
//! p_down    = 1 − (1 − treat_effect · coverage) · (1 − recovery · (1 − need))
//! p_up      = 1 − (1 − base_det − frailty_det · f) · (1 − overtreat_penalty · max(0, x − need))
//! ```
//!
//! Patients still in the unit after `horizon_max` steps leave with survival
//! probability `(n + 1 − a) / (n + 1)`, the chance that a fair walk from `a`
//! reaches discharge before death.
//!
//! The clinician's policy is a softmax over actions of `−(x − target)² / T`
//! with `target = clamp(need + frailty_treat_shift · f)`. With
//! `hidden_frailty` the frailty bit drives treatment and outcome but is left
//! out of the logged observation and state.

mod exact;
mod sample;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ActionGrid, DEFAULT_TERMINAL_REWARD};
use crate::policies::{MdpModel, PolicyError, TabularPolicy};
use crate::representation::{AxisBins, DoseBins};

pub use exact::ExactOutcomes;
pub use sample::sample_dataset;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),

    #[error("unknown scenario `{0}` (expected high-acuity-gap|confounded-no-treat|limited-actions)")]
    UnknownScenario(String),

    #[error("policy covers {found} states; expected {true_states} true or {logged} logged states")]
    PolicyShape {
        found: usize,
        true_states: usize,
        logged: usize,
    },

    #[error("horizon must be at least 1")]
    Horizon,

    #[error("gamma must lie in (0, 1], got {0}")]
    Gamma(f64),

    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Dose ranges of one treatment axis. Level `l ≥ 1` draws from
/// `(base · ratio^(l−1), base · ratio^l]`, exponentially decaying from the
/// lower end with mean `decay · width`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseScale {
    pub base: f64,
    pub ratio: f64,
    pub decay: f64,
}

impl DoseScale {
    pub fn range(&self, level: usize) -> (f64, f64) {
        let lo = self.base * self.ratio.powi(level as i32 - 1);
        (lo, lo * self.ratio)
    }

    /// Median of the truncated exponential on a level's range.
    pub fn median(&self, level: usize) -> f64 {
        let (lo, hi) = self.range(level);
        let width = hi - lo;
        let rate = 1.0 / (self.decay * width);
        lo - (1.0 - 0.5 * (1.0 - (-rate * width).exp())).ln() / rate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_acuity_levels: usize,
    pub fluid_levels: usize,
    pub vaso_levels: usize,
    pub horizon_max: usize,
    pub treat_effect: f64,
    pub recovery: f64,
    pub overtreat_penalty: f64,
    pub base_deterioration: f64,
    pub frailty_prob: f64,
    pub frailty_deterioration: f64,
    pub frailty_treat_shift: f64,
    pub hidden_frailty: bool,
    pub behavior_temperature: f64,
    /// Probability that treatment is withheld at the top acuity level.
    pub comfort_care: f64,
    /// Never withhold treatment at the top acuity level.
    pub censor_no_treatment_at_top: bool,
    /// Weights of the starting acuity levels; empty means uniform.
    #[serde(default)]
    pub initial_acuity: Vec<f64>,
    pub obs_noise_dim: usize,
    pub fluid_dose: DoseScale,
    pub vaso_dose: DoseScale,
    pub terminal_reward: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_acuity_levels: 6,
            fluid_levels: 5,
            vaso_levels: 5,
            horizon_max: 20,
            treat_effect: 0.6,
            recovery: 0.2,
            overtreat_penalty: 0.3,
            base_deterioration: 0.2,
            frailty_prob: 0.3,
            frailty_deterioration: 0.2,
            frailty_treat_shift: 0.0,
            hidden_frailty: false,
            behavior_temperature: 0.05,
            comfort_care: 0.0,
            censor_no_treatment_at_top: false,
            initial_acuity: vec![],
            obs_noise_dim: 0,
            fluid_dose: DoseScale {
                base: 50.0,
                ratio: 4.0,
                decay: 0.15,
            },
            vaso_dose: DoseScale {
                base: 0.02,
                ratio: 4.0,
                decay: 0.15,
            },
            terminal_reward: DEFAULT_TERMINAL_REWARD,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Clinicians never withhold treatment from the sickest patients, so
    /// "no treatment" at top acuity is absent from the data.
    HighAcuityGap,
    /// Dose tracks acuity closely and a hidden frailty bit pushes frail
    /// patients toward more treatment. Overtreatment is costly, most
    /// patients arrive mildly ill, and some of the sickest get comfort care.
    ConfoundedNoTreat,
    /// One treatment axis with two levels: treat or not.
    LimitedActions,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::HighAcuityGap, Scenario::ConfoundedNoTreat, Scenario::LimitedActions];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::HighAcuityGap => "high-acuity-gap",
            Scenario::ConfoundedNoTreat => "confounded-no-treat",
            Scenario::LimitedActions => "limited-actions",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name().replace('-', "") == key)
            .ok_or_else(|| SimError::UnknownScenario(s.to_string()))
    }
}

pub fn scenario(s: Scenario) -> SimConfig {
    let base = SimConfig::default();
    match s {
        Scenario::HighAcuityGap => SimConfig {
            censor_no_treatment_at_top: true,
            ..base
        },
        Scenario::ConfoundedNoTreat => SimConfig {
            overtreat_penalty: 1.0,
            behavior_temperature: 0.02,
            hidden_frailty: true,
            frailty_prob: 0.4,
            frailty_deterioration: 0.15,
            frailty_treat_shift: 0.3,
            comfort_care: 0.3,
            initial_acuity: vec![0.35, 0.25, 0.15, 0.1, 0.1, 0.05],
            obs_noise_dim: 4,
            ..base
        },
        Scenario::LimitedActions => SimConfig {
            fluid_levels: 2,
            vaso_levels: 1,
            ..base
        },
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.n_acuity_levels < 2 {
            return bad("n_acuity_levels must be at least 2".into());
        }
        if self.fluid_levels == 0 || self.vaso_levels == 0 || self.fluid_levels * self.vaso_levels < 2 {
            return bad("need at least two actions".into());
        }
        if self.horizon_max == 0 {
            return bad("horizon_max must be at least 1".into());
        }
        for (name, p) in [
            ("treat_effect", self.treat_effect),
            ("recovery", self.recovery),
            ("overtreat_penalty", self.overtreat_penalty),
            ("base_deterioration", self.base_deterioration),
            ("frailty_prob", self.frailty_prob),
            ("frailty_deterioration", self.frailty_deterioration),
            ("comfort_care", self.comfort_care),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !self.frailty_treat_shift.is_finite() {
            return bad("frailty_treat_shift must be finite".into());
        }
        if !(self.behavior_temperature > 0.0 && self.behavior_temperature.is_finite()) {
            return bad(format!("behavior_temperature must be positive, got {}", self.behavior_temperature));
        }
        if !self.initial_acuity.is_empty() {
            if self.initial_acuity.len() != self.n_acuity_levels {
                return bad("initial_acuity needs one weight per acuity level".into());
            }
            if self.initial_acuity.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
                || self.initial_acuity.iter().sum::<f64>() <= 0.0
            {
                return bad("initial_acuity weights must be non-negative with a positive sum".into());
            }
        }
        for (name, d) in [("fluid_dose", self.fluid_dose), ("vaso_dose", self.vaso_dose)] {
            if !(d.base > 0.0 && d.ratio > 1.0 && d.decay > 0.0 && d.base.is_finite() && d.ratio.is_finite()) {
                return bad(format!("{name} needs base > 0, ratio > 1 and decay > 0"));
            }
        }
        if !(self.terminal_reward > 0.0 && self.terminal_reward.is_finite()) {
            return bad("terminal_reward must be positive".into());
        }
        if self.censor_no_treatment_at_top && self.comfort_care > 0.0 {
            return bad("comfort_care and censor_no_treatment_at_top are mutually exclusive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> ActionGrid {
        ActionGrid {
            fluid_bins: self.fluid_levels,
            vaso_bins: self.vaso_levels,
        }
    }

    pub fn n_true_states(&self) -> usize {
        2 * self.n_acuity_levels
    }

    pub fn n_logged_states(&self) -> usize {
        if self.hidden_frailty {
            self.n_acuity_levels
        } else {
            self.n_true_states()
        }
    }

    /// Dimension of the logged observation vector.
    pub fn obs_dim(&self) -> usize {
        self.n_acuity_levels + usize::from(!self.hidden_frailty) + self.obs_noise_dim
    }

    pub fn true_state(&self, acuity: usize, frail: bool) -> usize {
        (acuity - 1) * 2 + usize::from(frail)
    }

    /// `(acuity, frail)` of a true state index.
    pub fn decode_state(&self, s: usize) -> (usize, bool) {
        (s / 2 + 1, s % 2 == 1)
    }

    pub fn logged_state(&self, acuity: usize, frail: bool) -> usize {
        if self.hidden_frailty {
            acuity - 1
        } else {
            self.true_state(acuity, frail)
        }
    }

    pub fn need(&self, acuity: usize) -> f64 {
        (acuity - 1) as f64 / (self.n_acuity_levels - 1) as f64
    }

    /// Actions form an escalation ladder in flat-index order, so every
    /// action has its own intensity.
    pub fn intensity(&self, action: usize) -> f64 {
        action as f64 / (self.grid().n_actions() - 1) as f64
    }

    /// `(p_up, p_down)` for one true state and action.
    pub fn step_probabilities(&self, acuity: usize, frail: bool, action: usize) -> (f64, f64) {
        let need = self.need(acuity);
        let x = self.intensity(action);
        let coverage = if x == 0.0 {
            0.0
        } else if x >= need {
            1.0
        } else {
            x / need
        };
        let p_down = 1.0 - (1.0 - self.treat_effect * coverage) * (1.0 - self.recovery * (1.0 - need));
        let p_det = (self.base_deterioration + if frail { self.frailty_deterioration } else { 0.0 }).min(1.0);
        let p_up = 1.0 - (1.0 - p_det) * (1.0 - self.overtreat_penalty * (x - need).max(0.0));
        (p_up, p_down)
    }

    /// Survival probability of a patient still in the unit at the horizon.
    pub fn truncation_survival(&self, acuity: usize) -> f64 {
        let n = self.n_acuity_levels as f64;
        (n + 1.0 - acuity as f64) / (n + 1.0)
    }

    pub fn behavior_row(&self, acuity: usize, frail: bool) -> Vec<f64> {
        let n_actions = self.grid().n_actions();
        let target = (self.need(acuity) + if frail { self.frailty_treat_shift } else { 0.0 }).clamp(0.0, 1.0);
        let logits: Vec<f64> = (0..n_actions)
            .map(|a| -(self.intensity(a) - target).powi(2) / self.behavior_temperature)
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut row: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= z);
        if acuity == self.n_acuity_levels {
            if self.censor_no_treatment_at_top {
                row[0] = 0.0;
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= z);
            } else if self.comfort_care > 0.0 {
                row.iter_mut().for_each(|p| *p *= 1.0 - self.comfort_care);
                row[0] += self.comfort_care;
            }
        }
        row
    }

    pub fn initial_distribution(&self) -> Vec<f64> {
        let weights = if self.initial_acuity.is_empty() {
            vec![1.0; self.n_acuity_levels]
        } else {
            self.initial_acuity.clone()
        };
        let total: f64 = weights.iter().sum();
        let mut mu = vec![0.0; self.n_true_states()];
        for (i, w) in weights.iter().enumerate() {
            mu[self.true_state(i + 1, false)] = w / total * (1.0 - self.frailty_prob);
            mu[self.true_state(i + 1, true)] = w / total * self.frailty_prob;
        }
        mu
    }

    /// Exact bins matching the per-level dose ranges.
    pub fn dose_bins(&self) -> DoseBins {
        let axis = |levels: usize, scale: DoseScale| {
            if levels == 1 {
                return AxisBins::zero_only();
            }
            let edges = (1..levels - 1).map(|l| scale.range(l).1).collect();
            let mut medians = vec![0.0];
            medians.extend((1..levels).map(|l| scale.median(l)));
            AxisBins::new(edges, medians).expect("level ranges are ordered")
        };
        DoseBins::new(axis(self.fluid_levels, self.fluid_dose), axis(self.vaso_levels, self.vaso_dose))
    }
}

// ── Ground truth ────────────────────────────────────────────────────────

/// The true model behind a config, with the oracle computations the
/// estimators are checked against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SimConfig,
    /// Dynamics over true states; rewards on entering the sinks only.
    pub mdp: MdpModel,
    /// Clinician policy over true states.
    pub behavior: TabularPolicy,
    pub dose_bins: DoseBins,
}

pub fn build_ground_truth(cfg: &SimConfig) -> Result<GroundTruth, SimError> {
    cfg.validate()?;
    let n = cfg.n_acuity_levels;
    let s_n = cfg.n_true_states();
    let a_n = cfg.grid().n_actions();
    let width = s_n + 2;
    let (alive, dead) = (s_n, s_n + 1);
    let mut transitions = vec![0.0; width * a_n * width];
    let mut behavior = Vec::with_capacity(s_n * a_n);
    for s in 0..s_n {
        let (acuity, frail) = cfg.decode_state(s);
        for a in 0..a_n {
            let (p_up, p_down) = cfg.step_probabilities(acuity, frail, a);
            let up = if acuity == n { dead } else { cfg.true_state(acuity + 1, frail) };
            let down = if acuity == 1 { alive } else { cfg.true_state(acuity - 1, frail) };
            let row = &mut transitions[(s * a_n + a) * width..][..width];
            row[up] += p_up;
            row[down] += (1.0 - p_up) * p_down;
            row[s] += (1.0 - p_up) * (1.0 - p_down);
        }
        behavior.extend(cfg.behavior_row(acuity, frail));
    }
    let mdp = MdpModel::from_parts(s_n, a_n, cfg.terminal_reward, transitions, cfg.initial_distribution())?;
    Ok(GroundTruth {
        config: cfg.clone(),
        mdp,
        behavior: TabularPolicy::new(s_n, a_n, behavior)?,
        dose_bins: cfg.dose_bins(),
    })
}

impl GroundTruth {
    /// Policy over true states. Policies over logged states are expanded by
    /// giving both frailty values the row of their logged state.
    pub fn lift(&self, policy: &TabularPolicy) -> Result<TabularPolicy, SimError> {
        let cfg = &self.config;
        let (true_states, logged) = (cfg.n_true_states(), cfg.n_logged_states());
        if policy.n_actions() != cfg.grid().n_actions() {
            return Err(SimError::Policy(PolicyError::DimensionMismatch(format!(
                "policy has {} actions, simulator has {}",
                policy.n_actions(),
                cfg.grid().n_actions()
            ))));
        }
        if policy.n_states() == true_states {
            return Ok(policy.clone());
        }
        if policy.n_states() != logged {
            return Err(SimError::PolicyShape {
                found: policy.n_states(),
                true_states,
                logged,
            });
        }
        let mut probs = Vec::with_capacity(true_states * policy.n_actions());
        for s in 0..true_states {
            let (acuity, frail) = cfg.decode_state(s);
            probs.extend_from_slice(policy.row(cfg.logged_state(acuity, frail)));
        }
        Ok(TabularPolicy::new(true_states, policy.n_actions(), probs)?)
    }

    /// Behavior policy marginalized to logged states by the occupancy of
    /// each true state under the behavior policy itself.
    pub fn logged_behavior(&self) -> TabularPolicy {
        let cfg = &self.config;
        if !cfg.hidden_frailty {
            return self.behavior.clone();
        }
        let occupancy = self.occupancy(&self.behavior);
        let a_n = self.behavior.n_actions();
        let mut probs = vec![0.0; cfg.n_logged_states() * a_n];
        let mut mass = vec![0.0; cfg.n_logged_states()];
        for s in 0..cfg.n_true_states() {
            let (acuity, frail) = cfg.decode_state(s);
            let l = cfg.logged_state(acuity, frail);
            let occ: f64 = occupancy.iter().map(|o| o[s]).sum();
            mass[l] += occ;
            for a in 0..a_n {
                probs[l * a_n + a] += occ * self.behavior.prob(s, a);
            }
        }
        for l in 0..cfg.n_logged_states() {
            let row = &mut probs[l * a_n..(l + 1) * a_n];
            if mass[l] > 0.0 {
                row.iter_mut().for_each(|p| *p /= mass[l]);
            } else {
                row.fill(1.0 / a_n as f64);
            }
        }
        TabularPolicy::new(cfg.n_logged_states(), a_n, probs).expect("mixture of stochastic rows")
    }
}

#[cfg(test)]
mod tests;
