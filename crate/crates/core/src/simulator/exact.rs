//! Exact quantities under the true model by finite-horizon dynamic
//! programming, with a brute-force enumeration to cross-check it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::observation;
use super::{GroundTruth, SimError};
use crate::policies::{argmax_lowest, QFunction, TabularPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactOutcomes {
    pub mortality: f64,
    pub mean_length: f64,
}

fn check(gamma: f64, horizon: usize) -> Result<(), SimError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(SimError::Gamma(gamma));
    }
    if horizon == 0 {
        return Err(SimError::Horizon);
    }
    Ok(())
}

impl GroundTruth {
    /// Reward collected on moving into `next`, counting the expected
    /// outcome of a patient still in the unit when `last` is set.
    fn landing_reward(&self, next: usize, last: bool) -> Option<f64> {
        let r = self.config.terminal_reward;
        let s_n = self.config.n_true_states();
        if next == s_n {
            Some(r)
        } else if next == s_n + 1 {
            Some(-r)
        } else if last {
            let (acuity, _) = self.config.decode_state(next);
            Some(r * (2.0 * self.config.truncation_survival(acuity) - 1.0))
        } else {
            None
        }
    }

    /// Backward sweeps over `horizon` steps. `choose` turns a row of
    /// action values into a state value.
    fn backward(&self, gamma: f64, horizon: usize, choose: impl Fn(usize, &[f64]) -> f64) -> (Vec<f64>, Vec<f64>) {
        let s_n = self.config.n_true_states();
        let a_n = self.mdp.n_actions();
        let mut v = vec![0.0; s_n];
        let mut q = vec![0.0; s_n * a_n];
        for t in (0..horizon).rev() {
            let last = t + 1 == horizon;
            for s in 0..s_n {
                for a in 0..a_n {
                    q[s * a_n + a] = self
                        .mdp
                        .transition_row(s, a)
                        .iter()
                        .enumerate()
                        .filter(|(_, &p)| p > 0.0)
                        .map(|(next, &p)| p * self.landing_reward(next, last).unwrap_or_else(|| gamma * v[next]))
                        .sum();
                }
            }
            for (s, vs) in v.iter_mut().enumerate() {
                *vs = choose(s, &q[s * a_n..(s + 1) * a_n]);
            }
        }
        (q, v)
    }

    /// Time-zero action values of `policy` over true states for episodes
    /// capped at `horizon` steps.
    pub fn exact_q(&self, policy: &TabularPolicy, gamma: f64, horizon: usize) -> Result<QFunction, SimError> {
        check(gamma, horizon)?;
        let p = self.lift(policy)?;
        let (q, _) = self.backward(gamma, horizon, |s, row| row.iter().zip(p.row(s)).map(|(q, p)| q * p).sum());
        Ok(QFunction::from_values(self.config.n_true_states(), self.mdp.n_actions(), q, gamma)?)
    }

    /// Expected discounted return of `policy` from the initial
    /// distribution, for episodes capped at `horizon` steps.
    pub fn exact_value(&self, policy: &TabularPolicy, gamma: f64, horizon: usize) -> Result<f64, SimError> {
        check(gamma, horizon)?;
        let p = self.lift(policy)?;
        let (_, v) = self.backward(gamma, horizon, |s, row| row.iter().zip(p.row(s)).map(|(q, p)| q * p).sum());
        Ok(self.mdp.initial_distribution().iter().zip(&v).map(|(m, v)| m * v).sum())
    }

    /// Time-zero optimal action values over true states at the configured
    /// horizon, and the stationary policy greedy in them.
    pub fn optimal(&self, gamma: f64) -> Result<(QFunction, TabularPolicy), SimError> {
        let horizon = self.config.horizon_max;
        check(gamma, horizon)?;
        let (q, _) = self.backward(gamma, horizon, |_, row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let a_n = self.mdp.n_actions();
        let actions: Vec<usize> = q.chunks(a_n).map(argmax_lowest).collect();
        let q = QFunction::from_values(self.config.n_true_states(), a_n, q, gamma)?;
        Ok((q, TabularPolicy::deterministic(a_n, &actions)))
    }

    /// Distribution over true non-terminal states at the start of each
    /// step, for steps `0..horizon_max`.
    pub fn occupancy(&self, policy: &TabularPolicy) -> Vec<Vec<f64>> {
        let s_n = self.config.n_true_states();
        let mut d = self.mdp.initial_distribution().to_vec();
        let mut out = Vec::with_capacity(self.config.horizon_max);
        for _ in 0..self.config.horizon_max {
            let mut next = vec![0.0; s_n];
            for s in 0..s_n {
                if d[s] == 0.0 {
                    continue;
                }
                for (a, &pa) in policy.row(s).iter().enumerate() {
                    if pa == 0.0 {
                        continue;
                    }
                    for (s2, &p) in self.mdp.transition_row(s, a)[..s_n].iter().enumerate() {
                        next[s2] += d[s] * pa * p;
                    }
                }
            }
            out.push(std::mem::replace(&mut d, next));
        }
        out
    }

    /// Exact mortality and expected length of stay under `policy`.
    pub fn exact_outcomes(&self, policy: &TabularPolicy) -> Result<ExactOutcomes, SimError> {
        let p = self.lift(policy)?;
        let s_n = self.config.n_true_states();
        let occupancy = self.occupancy(&p);
        let mut mortality = 0.0;
        let mut mean_length = 0.0;
        let last = occupancy.len() - 1;
        for (t, d) in occupancy.iter().enumerate() {
            mean_length += d.iter().sum::<f64>();
            for s in 0..s_n {
                for (a, &pa) in p.row(s).iter().enumerate() {
                    let row = self.mdp.transition_row(s, a);
                    mortality += d[s] * pa * row[s_n + 1];
                    if t == last {
                        for (s2, &pr) in row[..s_n].iter().enumerate() {
                            let (acuity, _) = self.config.decode_state(s2);
                            mortality += d[s] * pa * pr * (1.0 - self.config.truncation_survival(acuity));
                        }
                    }
                }
            }
        }
        Ok(ExactOutcomes { mortality, mean_length })
    }

    /// The same value as [`GroundTruth::exact_value`] by walking every
    /// path. `None` when the tree has more than `max_leaves` leaves.
    pub fn exact_value_enumerated(
        &self,
        policy: &TabularPolicy,
        gamma: f64,
        horizon: usize,
        max_leaves: usize,
    ) -> Result<Option<f64>, SimError> {
        check(gamma, horizon)?;
        let p = self.lift(policy)?;
        let mut walk = Walk {
            gt: self,
            policy: &p,
            gamma,
            horizon,
            leaves: 0,
            max_leaves,
            value: 0.0,
        };
        for (s, &m) in self.mdp.initial_distribution().iter().enumerate() {
            if m > 0.0 && !walk.visit(s, 0, m) {
                return Ok(None);
            }
        }
        Ok(Some(walk.value))
    }

    /// Policy over true states induced by a policy over some other state
    /// space reached through observations: each true state's row averages
    /// `policy.row(assign(obs))` over `draws` simulated observations.
    pub fn lift_through_observations(
        &self,
        policy: &TabularPolicy,
        assign: impl Fn(&[f64]) -> usize,
        draws: usize,
        seed: u64,
    ) -> Result<TabularPolicy, SimError> {
        let cfg = &self.config;
        let draws = if cfg.obs_noise_dim == 0 { 1 } else { draws.max(1) };
        let a_n = policy.n_actions();
        let mut probs = Vec::with_capacity(cfg.n_true_states() * a_n);
        for s in 0..cfg.n_true_states() {
            let (acuity, frail) = cfg.decode_state(s);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let mut row = vec![0.0; a_n];
            for _ in 0..draws {
                let obs = observation(cfg, acuity, frail, &mut rng);
                let k = assign(&obs);
                if k >= policy.n_states() {
                    return Err(SimError::PolicyShape {
                        found: policy.n_states(),
                        true_states: cfg.n_true_states(),
                        logged: k + 1,
                    });
                }
                for (r, p) in row.iter_mut().zip(policy.row(k)) {
                    *r += p / draws as f64;
                }
            }
            let z: f64 = row.iter().sum();
            probs.extend(row.into_iter().map(|r| r / z));
        }
        Ok(TabularPolicy::new(cfg.n_true_states(), a_n, probs)?)
    }
}

struct Walk<'a> {
    gt: &'a GroundTruth,
    policy: &'a TabularPolicy,
    gamma: f64,
    horizon: usize,
    leaves: usize,
    max_leaves: usize,
    value: f64,
}

impl Walk<'_> {
    /// Returns false once the leaf budget is exhausted.
    fn visit(&mut self, s: usize, t: usize, prob: f64) -> bool {
        let last = t + 1 == self.horizon;
        for (a, &pa) in self.policy.row(s).iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            for (next, &p) in self.gt.mdp.transition_row(s, a).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let reach = prob * pa * p;
                match self.gt.landing_reward(next, last) {
                    Some(r) => {
                        self.leaves += 1;
                        if self.leaves > self.max_leaves {
                            return false;
                        }
                        self.value += reach * self.gamma.powi(t as i32) * r;
                    }
                    None => {
                        if !self.visit(next, t + 1, reach) {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}
