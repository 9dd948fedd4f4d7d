//! Maximum-likelihood tabular MDP fitted to discretized trajectories.
//!
//! States `0..S` are the discretized states; `S` is the alive sink and
//! `S + 1` the dead sink. Entering a sink pays `±terminal_reward` once and
//! the sink then self-loops with zero reward.

use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::data::Outcome;
use crate::representation::DiscretizedDataset;

/// Where unvisited `(s, a)` pairs lead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnvisitedConvention {
    /// Straight to the alive sink: untried actions look like a cure.
    #[default]
    Alive,
    /// Straight to the dead sink.
    Dead,
}

impl std::str::FromStr for UnvisitedConvention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "alive" => Ok(Self::Alive),
            "dead" => Ok(Self::Dead),
            other => Err(format!("unknown unvisited convention `{other}` (expected alive|dead)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpWire", into = "MdpWire")]
pub struct MdpModel {
    n_states: usize,
    n_actions: usize,
    terminal_reward: f64,
    /// Row-major `(S+2) × A × (S+2)`.
    transitions: Vec<f64>,
    initial: Vec<f64>,
    /// Row-major `S × A`.
    visits: Vec<u64>,
    unvisited: UnvisitedConvention,
    source: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct MdpWire {
    n_states: usize,
    n_actions: usize,
    terminal_reward: f64,
    unvisited: UnvisitedConvention,
    #[serde(default)]
    source: Option<String>,
    initial: Vec<f64>,
    visits: Vec<Vec<u64>>,
    transitions: Vec<Vec<Vec<f64>>>,
}

impl From<MdpModel> for MdpWire {
    fn from(m: MdpModel) -> Self {
        let width = m.n_states + 2;
        MdpWire {
            n_states: m.n_states,
            n_actions: m.n_actions,
            terminal_reward: m.terminal_reward,
            unvisited: m.unvisited,
            source: m.source,
            initial: m.initial,
            visits: m.visits.chunks(m.n_actions).map(<[u64]>::to_vec).collect(),
            transitions: m
                .transitions
                .chunks(m.n_actions * width)
                .map(|block| block.chunks(width).map(<[f64]>::to_vec).collect())
                .collect(),
        }
    }
}

impl TryFrom<MdpWire> for MdpModel {
    type Error = PolicyError;

    fn try_from(w: MdpWire) -> Result<Self, Self::Error> {
        let width = w.n_states + 2;
        let shape_ok = w.initial.len() == w.n_states
            && w.visits.len() == w.n_states
            && w.visits.iter().all(|r| r.len() == w.n_actions)
            && w.transitions.len() == width
            && w
                .transitions
                .iter()
                .all(|b| b.len() == w.n_actions && b.iter().all(|r| r.len() == width));
        if !shape_ok {
            return Err(PolicyError::DimensionMismatch(format!(
                "model arrays do not match {} states and {} actions",
                w.n_states, w.n_actions
            )));
        }
        let m = MdpModel {
            n_states: w.n_states,
            n_actions: w.n_actions,
            terminal_reward: w.terminal_reward,
            transitions: w.transitions.into_iter().flatten().flatten().collect(),
            initial: w.initial,
            visits: w.visits.concat(),
            unvisited: w.unvisited,
            source: w.source,
        };
        m.validate()?;
        Ok(m)
    }
}

impl MdpModel {
    /// Builds a model from explicit arrays. `transitions` covers all
    /// `S + 2` source states; sink rows are overwritten with self-loops.
    pub fn from_parts(
        n_states: usize,
        n_actions: usize,
        terminal_reward: f64,
        mut transitions: Vec<f64>,
        initial: Vec<f64>,
    ) -> Result<Self, PolicyError> {
        let width = n_states + 2;
        if transitions.len() != width * n_actions * width || initial.len() != n_states {
            return Err(PolicyError::DimensionMismatch("transition or initial array has the wrong length".into()));
        }
        for sink in [n_states, n_states + 1] {
            for a in 0..n_actions {
                let row = &mut transitions[(sink * n_actions + a) * width..][..width];
                row.fill(0.0);
                row[sink] = 1.0;
            }
        }
        let m = MdpModel {
            n_states,
            n_actions,
            terminal_reward,
            transitions,
            initial,
            visits: vec![0; n_states * n_actions],
            unvisited: UnvisitedConvention::Alive,
            source: None,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if self.n_actions == 0 {
            return Err(PolicyError::InvalidModel("no actions".into()));
        }
        if !(self.terminal_reward.is_finite() && self.terminal_reward >= 0.0) {
            return Err(PolicyError::InvalidModel(format!("terminal reward {}", self.terminal_reward)));
        }
        let width = self.n_states + 2;
        for (i, row) in self.transitions.chunks(width).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(PolicyError::InvalidModel(format!(
                    "transition row for state {} action {} is not a distribution",
                    i / self.n_actions,
                    i % self.n_actions
                )));
            }
        }
        for sink in [self.alive_sink(), self.dead_sink()] {
            for a in 0..self.n_actions {
                if self.transition(sink, a, sink) != 1.0 {
                    return Err(PolicyError::InvalidModel(format!("sink {sink} must self-loop")));
                }
            }
        }
        let init_sum: f64 = self.initial.iter().sum();
        // An all-zero initial vector marks a model fitted to no trajectories.
        if self.initial.iter().any(|&p| !(p >= 0.0)) || (init_sum != 0.0 && (init_sum - 1.0).abs() > 1e-9) {
            return Err(PolicyError::InvalidModel("initial distribution does not sum to 1".into()));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn terminal_reward(&self) -> f64 {
        self.terminal_reward
    }

    pub fn alive_sink(&self) -> usize {
        self.n_states
    }

    pub fn dead_sink(&self) -> usize {
        self.n_states + 1
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        state >= self.n_states
    }

    pub fn transition(&self, state: usize, action: usize, next: usize) -> f64 {
        self.transition_row(state, action)[next]
    }

    /// Distribution over the `S + 2` successors of `(state, action)`.
    pub fn transition_row(&self, state: usize, action: usize) -> &[f64] {
        let width = self.n_states + 2;
        &self.transitions[(state * self.n_actions + action) * width..][..width]
    }

    /// Reward for the transition `state → next`.
    pub fn reward(&self, state: usize, next: usize) -> f64 {
        if self.is_terminal(state) {
            0.0
        } else if next == self.alive_sink() {
            self.terminal_reward
        } else if next == self.dead_sink() {
            -self.terminal_reward
        } else {
            0.0
        }
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial
    }

    pub fn visits(&self, state: usize, action: usize) -> u64 {
        self.visits[state * self.n_actions + action]
    }

    pub fn unvisited(&self) -> UnvisitedConvention {
        self.unvisited
    }

    /// Fingerprint of the training data, if the model was fitted.
    pub fn source(&self) -> Option<&str> {
        self.source.as_deref()
    }
}

/// Counts transitions in `dd`. The last logged step of each trajectory
/// moves to the sink matching its outcome.
pub fn fit_mdp(
    dd: &DiscretizedDataset,
    terminal_reward: f64,
    unvisited: UnvisitedConvention,
) -> Result<MdpModel, PolicyError> {
    let (s_n, a_n) = (dd.n_states(), dd.n_actions());
    let width = s_n + 2;
    let mut counts = vec![0u64; width * a_n * width];
    let mut visits = vec![0u64; s_n * a_n];
    let mut starts = vec![0u64; s_n];
    for ep in dd.episodes() {
        starts[ep.states[0]] += 1;
        let last = ep.states.len() - 1;
        for t in 0..=last {
            let (s, a) = (ep.states[t], ep.actions[t]);
            let next = if t < last {
                ep.states[t + 1]
            } else {
                match ep.trajectory.outcome {
                    Outcome::Survived => s_n,
                    Outcome::Died => s_n + 1,
                }
            };
            visits[s * a_n + a] += 1;
            counts[(s * a_n + a) * width + next] += 1;
        }
    }
    let fallback = match unvisited {
        UnvisitedConvention::Alive => s_n,
        UnvisitedConvention::Dead => s_n + 1,
    };
    let mut transitions = vec![0.0; width * a_n * width];
    for sink in [s_n, s_n + 1] {
        for a in 0..a_n {
            transitions[(sink * a_n + a) * width + sink] = 1.0;
        }
    }
    for s in 0..s_n {
        for a in 0..a_n {
            let n = visits[s * a_n + a];
            let base = (s * a_n + a) * width;
            if n == 0 {
                transitions[base + fallback] = 1.0;
            } else {
                for k in 0..width {
                    transitions[base + k] = counts[base + k] as f64 / n as f64;
                }
            }
        }
    }
    let total: u64 = starts.iter().sum();
    let initial = if total == 0 {
        vec![0.0; s_n]
    } else {
        starts.iter().map(|&c| c as f64 / total as f64).collect()
    };
    let model = MdpModel {
        n_states: s_n,
        n_actions: a_n,
        terminal_reward,
        transitions,
        initial,
        visits,
        unvisited,
        source: Some(dd.dataset().fingerprint()),
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::testing::annotated_with_outcomes;

    #[test]
    fn single_trajectory_to_dead_sink() {
        let dd = annotated_with_outcomes(&[(&[0, 1], &[0, 1], Outcome::Died)], 2, 2);
        let m = fit_mdp(&dd, 100.0, UnvisitedConvention::Alive).unwrap();
        assert_eq!(m.transition(0, 0, 1), 1.0);
        assert_eq!(m.transition(1, 1, m.dead_sink()), 1.0);
        assert_eq!(m.transition(0, 1, m.alive_sink()), 1.0);
        assert_eq!(m.initial_distribution(), &[1.0, 0.0]);
        assert_eq!(m.visits(0, 0), 1);
        assert_eq!(m.reward(1, m.dead_sink()), -100.0);
        assert_eq!(m.reward(m.dead_sink(), m.dead_sink()), 0.0);
    }

    #[test]
    fn pessimistic_convention() {
        let dd = annotated_with_outcomes(&[(&[0], &[0], Outcome::Survived)], 1, 2);
        let m = fit_mdp(&dd, 100.0, UnvisitedConvention::Dead).unwrap();
        assert_eq!(m.transition(0, 1, m.dead_sink()), 1.0);
        assert_eq!(m.transition(0, 0, m.alive_sink()), 1.0);
    }

    #[test]
    fn rows_sum_to_one_and_sinks_self_loop() {
        let dd = annotated_with_outcomes(
            &[
                (&[0, 1, 2], &[0, 1, 0], Outcome::Died),
                (&[0, 0, 2], &[0, 0, 1], Outcome::Survived),
                (&[2, 1], &[1, 1], Outcome::Survived),
            ],
            3,
            2,
        );
        let m = fit_mdp(&dd, 100.0, UnvisitedConvention::Alive).unwrap();
        for s in 0..5 {
            for a in 0..2 {
                let sum: f64 = m.transition_row(s, a).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(m.transition(3, 0, 3), 1.0);
        assert_eq!(m.transition(4, 1, 4), 1.0);
        // (0, 0) is logged three times: to 1, to 0, then to 2.
        for next in 0..3 {
            assert!((m.transition(0, 0, next) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(m.visits(0, 0), 3);
        assert_eq!(m.source(), Some(dd.dataset().fingerprint().as_str()));
    }

    #[test]
    fn json_round_trip() {
        let dd = annotated_with_outcomes(&[(&[0, 1], &[0, 1], Outcome::Died)], 2, 2);
        let m = fit_mdp(&dd, 100.0, UnvisitedConvention::Alive).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: MdpModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}
