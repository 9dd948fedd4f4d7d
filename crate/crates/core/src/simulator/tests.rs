use super::*;
use crate::data::{cohort_stats, compute_return, TreatmentAxis};
use crate::policies::{baseline_policy, total_variation, BaselineKind};
use crate::stats::{mean, standard_error};

fn small() -> SimConfig {
    SimConfig {
        n_acuity_levels: 3,
        fluid_levels: 2,
        vaso_levels: 1,
        horizon_max: 4,
        ..SimConfig::default()
    }
}

/// Fair walk under full treatment: `p_up = 1/4` and `(1 − p_up) · p_down = 1/4`
/// at every acuity.
fn symmetric() -> SimConfig {
    SimConfig {
        n_acuity_levels: 3,
        treat_effect: 1.0 / 3.0,
        recovery: 0.0,
        overtreat_penalty: 0.0,
        base_deterioration: 0.25,
        frailty_deterioration: 0.0,
        initial_acuity: vec![0.0, 1.0, 0.0],
        ..small()
    }
}

#[test]
fn certain_deterioration_moves_up_one_level() {
    let cfg = SimConfig {
        treat_effect: 0.0,
        base_deterioration: 1.0,
        ..SimConfig::default()
    };
    let gt = build_ground_truth(&cfg).unwrap();
    let n = cfg.n_acuity_levels;
    for s in 0..cfg.n_true_states() {
        let (acuity, frail) = cfg.decode_state(s);
        let up = if acuity == n { gt.mdp.dead_sink() } else { cfg.true_state(acuity + 1, frail) };
        for a in 0..cfg.grid().n_actions() {
            assert_eq!(gt.mdp.transition(s, a, up), 1.0, "state {s} action {a}");
        }
    }
}

#[test]
fn fair_walk_from_the_middle_is_worth_zero() {
    let cfg = symmetric();
    let gt = build_ground_truth(&cfg).unwrap();
    let full = TabularPolicy::deterministic(2, &vec![1; cfg.n_true_states()]);
    let none = TabularPolicy::deterministic(2, &vec![0; cfg.n_true_states()]);
    let v_full = gt.exact_value(&full, 0.95, cfg.horizon_max).unwrap();
    assert!(v_full.abs() < 1e-12, "{v_full}");
    assert!(gt.exact_value(&none, 0.95, cfg.horizon_max).unwrap() < v_full);
}

#[test]
fn transition_rows_are_distributions() {
    for sc in Scenario::ALL {
        let gt = build_ground_truth(&scenario(sc)).unwrap();
        for s in 0..gt.mdp.n_states() {
            for a in 0..gt.mdp.n_actions() {
                let row = gt.mdp.transition_row(s, a);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }
}

#[test]
fn enumeration_matches_dynamic_programming() {
    let gt = build_ground_truth(&small()).unwrap();
    let n = gt.config.n_true_states();
    for p in [
        gt.behavior.clone(),
        TabularPolicy::uniform(n, 2),
        TabularPolicy::deterministic(2, &[1, 0, 1, 1, 0, 1]),
    ] {
        for gamma in [0.9, 1.0] {
            let dp = gt.exact_value(&p, gamma, 4).unwrap();
            let en = gt.exact_value_enumerated(&p, gamma, 4, 1_000_000).unwrap().unwrap();
            assert!((dp - en).abs() < 1e-12, "{dp} vs {en}");
        }
    }
    assert_eq!(gt.exact_value_enumerated(&gt.behavior, 0.9, 4, 3).unwrap(), None);
}

#[test]
fn exact_q_averages_to_exact_value() {
    let gt = build_ground_truth(&small()).unwrap();
    let q = gt.exact_q(&gt.behavior, 0.9, 4).unwrap();
    let v = q.state_values(&gt.behavior);
    let total: f64 = gt.mdp.initial_distribution().iter().zip(&v).map(|(m, v)| m * v).sum();
    assert!((total - gt.exact_value(&gt.behavior, 0.9, 4).unwrap()).abs() < 1e-12);
}

#[test]
fn optimal_policy_beats_baselines() {
    let gt = build_ground_truth(&scenario(Scenario::HighAcuityGap)).unwrap();
    let (_, best) = gt.optimal(0.95).unwrap();
    let h = gt.config.horizon_max;
    let v_best = gt.exact_value(&best, 0.95, h).unwrap();
    let (s_n, a_n) = (gt.config.n_true_states(), gt.config.grid().n_actions());
    for kind in [BaselineKind::Random, BaselineKind::NoAction] {
        let p = baseline_policy(kind, s_n, a_n).unwrap();
        assert!(gt.exact_value(&p, 0.95, h).unwrap() <= v_best + 1e-9);
    }
    assert!(gt.exact_value(&gt.behavior, 0.95, h).unwrap() <= v_best + 1e-9);
}

#[test]
fn samples_agree_with_exact_outcomes() {
    let gt = build_ground_truth(&scenario(Scenario::ConfoundedNoTreat)).unwrap();
    let ds = sample_dataset(&gt, 20_000, 3).unwrap();
    let exact = gt.exact_outcomes(&gt.behavior).unwrap();
    let stats = cohort_stats(&ds).unwrap();
    let se_m = (exact.mortality * (1.0 - exact.mortality) / ds.len() as f64).sqrt();
    assert!((stats.mortality - exact.mortality).abs() < 4.0 * se_m, "{} vs {}", stats.mortality, exact.mortality);
    let lengths: Vec<f64> = ds.trajectories().iter().map(|t| t.len() as f64).collect();
    assert!((stats.mean_length - exact.mean_length).abs() < 4.0 * standard_error(&lengths));

    let returns: Vec<f64> = ds.trajectories().iter().map(|t| compute_return(t, 0.95)).collect();
    let v = gt.exact_value(&gt.behavior, 0.95, gt.config.horizon_max).unwrap();
    assert!((mean(&returns) - v).abs() < 4.0 * standard_error(&returns), "{} vs {v}", mean(&returns));
}

#[test]
fn sampled_doses_fall_in_their_levels() {
    let gt = build_ground_truth(&SimConfig::default()).unwrap();
    let ds = sample_dataset(&gt, 500, 1).unwrap();
    for step in ds.steps() {
        let logged = step.action.unwrap();
        assert_eq!(gt.dose_bins.assign(step.raw_action).unwrap(), logged);
        assert!(step.state_id.unwrap() < gt.config.n_logged_states());
        assert_eq!(step.obs.dim(), gt.config.obs_dim());
    }
    assert!(ds.steps().any(|s| s.raw_action.dose(TreatmentAxis::Vaso) > 0.0));
}

#[test]
fn sampling_is_deterministic_across_thread_counts() {
    let gt = build_ground_truth(&scenario(Scenario::ConfoundedNoTreat)).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| sample_dataset(&gt, 300, 11).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_ne!(one, sample_dataset(&gt, 300, 12).unwrap());
}

#[test]
fn horizon_caps_length() {
    let cfg = SimConfig {
        horizon_max: 3,
        ..SimConfig::default()
    };
    let ds = sample_dataset(&build_ground_truth(&cfg).unwrap(), 400, 0).unwrap();
    assert!(ds.trajectories().iter().all(|t| t.len() <= 3));
    assert!(ds.trajectories().iter().any(|t| t.len() == 3));
}

#[test]
fn high_acuity_gap_never_withholds_at_the_top() {
    let cfg = scenario(Scenario::HighAcuityGap);
    let gt = build_ground_truth(&cfg).unwrap();
    let n = cfg.n_acuity_levels;
    for frail in [false, true] {
        assert_eq!(gt.behavior.prob(cfg.true_state(n, frail), 0), 0.0);
        assert!(gt.behavior.prob(cfg.true_state(1, frail), 0) > 0.0);
    }
}

#[test]
fn hidden_frailty_confounds_the_logged_policy() {
    let cfg = scenario(Scenario::ConfoundedNoTreat);
    let gt = build_ground_truth(&cfg).unwrap();
    let logged = gt.logged_behavior();
    assert_eq!(logged.n_states(), cfg.n_acuity_levels);
    let lifted = gt.lift(&logged).unwrap();
    assert!(total_variation(lifted.row(cfg.true_state(3, true)), gt.behavior.row(cfg.true_state(3, true))) > 0.0);
    let visible = SimConfig {
        hidden_frailty: false,
        ..cfg
    };
    let gt = build_ground_truth(&visible).unwrap();
    assert_eq!(gt.logged_behavior(), gt.behavior);
}

#[test]
fn lift_rejects_wrong_shapes() {
    let gt = build_ground_truth(&small()).unwrap();
    assert!(matches!(gt.lift(&TabularPolicy::uniform(5, 2)), Err(SimError::PolicyShape { .. })));
    assert!(gt.lift(&TabularPolicy::uniform(6, 3)).is_err());
}

#[test]
fn lifting_through_noiseless_observations_is_exact() {
    let cfg = small();
    let gt = build_ground_truth(&cfg).unwrap();
    let p = TabularPolicy::deterministic(2, &[1, 0, 1, 1, 0, 1]);
    let decode = |obs: &[f64]| {
        let acuity = obs[..cfg.n_acuity_levels].iter().position(|&x| x == 1.0).unwrap() + 1;
        cfg.true_state(acuity, obs[cfg.n_acuity_levels] == 1.0)
    };
    assert_eq!(gt.lift_through_observations(&p, decode, 50, 0).unwrap(), p);
}

#[test]
fn config_validation() {
    let bad = [
        SimConfig {
            n_acuity_levels: 1,
            ..SimConfig::default()
        },
        SimConfig {
            fluid_levels: 1,
            vaso_levels: 1,
            ..SimConfig::default()
        },
        SimConfig {
            treat_effect: 1.5,
            ..SimConfig::default()
        },
        SimConfig {
            behavior_temperature: 0.0,
            ..SimConfig::default()
        },
        SimConfig {
            initial_acuity: vec![1.0],
            ..SimConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(build_ground_truth(&cfg), Err(SimError::Config(_))));
    }
}

#[test]
fn scenario_names_round_trip() {
    for sc in Scenario::ALL {
        assert_eq!(sc.name().parse::<Scenario>().unwrap(), sc);
    }
    assert_eq!("HighAcuityGap".parse::<Scenario>().unwrap(), Scenario::HighAcuityGap);
    assert!("nope".parse::<Scenario>().is_err());
}

#[test]
fn ground_truth_json_round_trip() {
    let gt = build_ground_truth(&scenario(Scenario::LimitedActions)).unwrap();
    let back: GroundTruth = serde_json::from_str(&serde_json::to_string(&gt).unwrap()).unwrap();
    assert_eq!(back, gt);
}

#[test]
fn dose_medians_lie_inside_their_ranges() {
    let d = SimConfig::default().fluid_dose;
    for l in 1..5 {
        let (lo, hi) = d.range(l);
        let m = d.median(l);
        assert!(lo < m && m < (lo + hi) / 2.0);
    }
}
