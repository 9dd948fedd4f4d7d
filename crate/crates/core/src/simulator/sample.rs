use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{DoseScale, GroundTruth, SimConfig, SimError};
use crate::data::{Dataset, DiscreteAction, Outcome, RawAction, RewardScheme, Step, Trajectory};

/// Draws `n` patients from the true dynamics and clinician policy.
///
/// Patient `i` uses its own ChaCha8 stream `i` under `seed`, so the output
/// does not depend on thread count or scheduling. Every step is annotated
/// with its logged state and the treatment levels actually given.
pub fn sample_dataset(gt: &GroundTruth, n: usize, seed: u64) -> Result<Dataset, SimError> {
    let cfg = &gt.config;
    cfg.validate()?;
    let initial = WeightedIndex::new(cfg.initial_distribution()).map_err(|e| SimError::Config(e.to_string()))?;
    let behavior: Vec<WeightedIndex<f64>> = (0..cfg.n_true_states())
        .map(|s| WeightedIndex::new(gt.behavior.row(s)).expect("behavior rows sum to one"))
        .collect();
    let trajectories: Vec<Trajectory> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            sample_patient(gt, &initial, &behavior, i, &mut rng)
        })
        .collect();
    let names = feature_names(cfg);
    let scheme = RewardScheme {
        terminal_reward: cfg.terminal_reward,
        strict: true,
    };
    let ds = Dataset::new(trajectories, names, scheme).map_err(|e| SimError::Config(e.to_string()))?;
    Ok(ds
        .with_metadata("n_states", cfg.n_logged_states().to_string())
        .with_metadata("fluid_bins", cfg.fluid_levels.to_string())
        .with_metadata("vaso_bins", cfg.vaso_levels.to_string())
        .with_metadata("seed", seed.to_string()))
}

fn feature_names(cfg: &SimConfig) -> Vec<String> {
    let mut names: Vec<String> = (1..=cfg.n_acuity_levels).map(|a| format!("acuity_{a}")).collect();
    if !cfg.hidden_frailty {
        names.push("frailty".into());
    }
    names.extend((0..cfg.obs_noise_dim).map(|j| format!("noise_{j}")));
    names
}

fn sample_patient(
    gt: &GroundTruth,
    initial: &WeightedIndex<f64>,
    behavior: &[WeightedIndex<f64>],
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let cfg = &gt.config;
    let n = cfg.n_acuity_levels;
    let grid = cfg.grid();
    let (mut acuity, frail) = cfg.decode_state(initial.sample(rng));
    let mut steps = Vec::new();
    let outcome = loop {
        let s = cfg.true_state(acuity, frail);
        let logged = cfg.logged_state(acuity, frail);
        let action = behavior[s].sample(rng);
        let levels = grid.decode(action);
        let raw = RawAction {
            fluid: draw_dose(cfg.fluid_dose, levels.fluid_bin, rng),
            vaso: draw_dose(cfg.vaso_dose, levels.vaso_bin, rng),
        };
        let obs = observation(cfg, acuity, frail, rng);

        let (p_up, p_down) = cfg.step_probabilities(acuity, frail, action);
        let u: f64 = rng.random();
        if u < p_up {
            acuity += 1;
        } else if u < p_up + (1.0 - p_up) * p_down {
            acuity -= 1;
        }
        let mut step = Step::new(obs, raw, 0.0);
        step.state_id = Some(logged);
        step.action = Some(DiscreteAction {
            fluid_bin: levels.fluid_bin,
            vaso_bin: levels.vaso_bin,
        });
        steps.push(step);

        let ended = if acuity == 0 {
            Some(Outcome::Survived)
        } else if acuity == n + 1 {
            Some(Outcome::Died)
        } else if steps.len() == cfg.horizon_max {
            let survive = rng.random::<f64>() < cfg.truncation_survival(acuity);
            Some(if survive { Outcome::Survived } else { Outcome::Died })
        } else {
            None
        };
        if let Some(outcome) = ended {
            break outcome;
        }
    };
    let last = steps.len() - 1;
    steps[last].reward = match outcome {
        Outcome::Survived => cfg.terminal_reward,
        Outcome::Died => -cfg.terminal_reward,
    };
    Trajectory {
        id: format!("p{index:06}"),
        outcome,
        steps,
    }
}

/// A dose in `(lo, hi]` of the level's range; level 0 is no dose.
fn draw_dose(scale: DoseScale, level: usize, rng: &mut ChaCha8Rng) -> f64 {
    if level == 0 {
        return 0.0;
    }
    let (lo, hi) = scale.range(level);
    let width = hi - lo;
    let rate = 1.0 / (scale.decay * width);
    let u = 1.0 - rng.random::<f64>();
    let offset = -(1.0 - u * (1.0 - (-rate * width).exp())).ln() / rate;
    let dose = (lo + offset).min(hi);
    if dose > lo {
        dose
    } else {
        lo + width * 1e-9
    }
}

pub(crate) fn observation(cfg: &SimConfig, acuity: usize, frail: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut obs = vec![0.0; cfg.obs_dim()];
    obs[acuity - 1] = 1.0;
    let mut j = cfg.n_acuity_levels;
    if !cfg.hidden_frailty {
        obs[j] = f64::from(u8::from(frail));
        j += 1;
    }
    for x in &mut obs[j..] {
        *x = rng.sample(StandardNormal);
    }
    obs
}
