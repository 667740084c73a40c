use backstep::env::Observation;
use backstep::learner::{
    clipped_gradient, clipped_objective, densify, reinforce_gradient, reinforce_objective, Algorithm, BaselineKind,
    Learner, LearnerConfig, Reduction, Sample, TransitionBatch, TransitionRecord,
};
use backstep::policy::{ActMode, HiddenState, ObservationEncoder, Policy, PolicyKind, PolicyParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn obs(i: usize, n: usize) -> Observation {
    Observation::Index { index: i, count: n }
}

fn rec(s: usize, n: usize, action: u32, reward: f64, done: bool, mask: bool) -> TransitionRecord {
    TransitionRecord {
        observation: obs(s, n),
        hidden: HiddenState::default(),
        action,
        reward,
        done,
        mask,
        log_prob: (0.5f64).ln(),
        policy_version: 0,
        time_index: 0,
    }
}

fn policy(kind: PolicyKind, states: usize, actions: usize) -> Policy {
    Policy::new(kind, ObservationEncoder::Index { count: states }, actions)
}

fn kind_strategy() -> impl Strategy<Value = PolicyKind> {
    prop_oneof![Just(PolicyKind::Tabular), (1usize..4).prop_map(|window| PolicyKind::HistoryWindow { window })]
}

fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i] += h;
            down[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

#[test]
fn returns_restart_at_done_and_bootstrap_from_the_baseline() {
    let p = policy(PolicyKind::Tabular, 3, 2);
    let config = LearnerConfig { gamma: 0.5, ..LearnerConfig::reinforce() };
    let l = Learner::new(config, &p).unwrap();
    let batch = TransitionBatch {
        transitions: vec![rec(0, 3, 0, 1.0, false, true), rec(1, 3, 0, 0.0, false, true), rec(2, 3, 1, 2.0, false, true)],
        bootstrap: None,
    };
    assert_eq!(l.returns(&p, &batch).unwrap(), vec![1.5, 1.0, 2.0]);
    let batch = TransitionBatch {
        transitions: vec![rec(0, 3, 0, 1.0, true, true), rec(1, 3, 0, 4.0, false, true)],
        bootstrap: Some(obs(2, 3)),
    };
    // baseline starts at zero, so the bootstrap adds nothing yet
    assert_eq!(l.returns(&p, &batch).unwrap(), vec![1.0, 4.0]);
}

#[test]
fn bootstrap_uses_the_fitted_baseline() {
    let p = policy(PolicyKind::Tabular, 2, 2);
    let config = LearnerConfig { gamma: 0.5, baseline_rate: 1.0, ..LearnerConfig::reinforce() };
    let mut l = Learner::new(config, &p).unwrap();
    let fit = TransitionBatch { transitions: vec![rec(1, 2, 0, 8.0, true, true)], bootstrap: None };
    l.update(&p, &p.initial_params(), &[&fit]).unwrap();
    assert_eq!(l.baseline_values()[1], 8.0);
    let tail = TransitionBatch { transitions: vec![rec(0, 2, 0, 1.0, false, true)], bootstrap: Some(obs(1, 2)) };
    assert_eq!(l.returns(&p, &tail).unwrap(), vec![5.0]);
}

#[test]
fn masked_only_update_changes_nothing_but_the_version() {
    let p = policy(PolicyKind::Tabular, 2, 2);
    for config in [LearnerConfig::reinforce(), LearnerConfig::clipped()] {
        let mut l = Learner::new(config, &p).unwrap();
        let params = PolicyParams { version: 3, values: vec![0.1, -0.2, 0.3, 0.4] };
        let batch = TransitionBatch { transitions: vec![rec(0, 2, 1, 5.0, true, false)], bootstrap: None };
        let out = l.update(&p, &params, &[&batch]).unwrap();
        assert_eq!(out.params.values, params.values);
        assert_eq!(out.params.version, 4);
        assert_eq!(out.effective, 0);
        assert!(out.warning.is_some());
        assert!(l.baseline_values().iter().all(|&b| b == 0.0));
    }
}

#[test]
fn positive_advantage_raises_the_chosen_action() {
    let p = policy(PolicyKind::Tabular, 1, 3);
    let config = LearnerConfig { baseline: BaselineKind::None, entropy_coef: 0.0, ..LearnerConfig::reinforce() };
    let mut l = Learner::new(config, &p).unwrap();
    let params = p.initial_params();
    let batch = TransitionBatch { transitions: vec![rec(0, 1, 2, 1.0, true, true)], bootstrap: None };
    let out = l.update(&p, &params, &[&batch]).unwrap();
    let before = p.probs(&params.values, &obs(0, 1), &HiddenState::default()).unwrap();
    let after = p.probs(&out.params.values, &obs(0, 1), &HiddenState::default()).unwrap();
    assert!(after[2] > before[2]);
    assert!(after[0] < before[0] && after[1] < before[1]);
}

#[test]
fn entropy_bonus_alone_pulls_toward_uniform() {
    let p = policy(PolicyKind::Tabular, 1, 4);
    let config = LearnerConfig {
        baseline: BaselineKind::None,
        entropy_coef: 1.0,
        learning_rate: 0.5,
        ..LearnerConfig::reinforce()
    };
    let mut l = Learner::new(config, &p).unwrap();
    let mut params = PolicyParams { version: 0, values: vec![2.0, -1.0, 0.5, 0.0] };
    let kl = |v: &[f64]| {
        let pr = p.probs(v, &obs(0, 1), &HiddenState::default()).unwrap();
        pr.iter().map(|q| q * (q * 4.0).ln()).sum::<f64>()
    };
    let batch = TransitionBatch { transitions: vec![rec(0, 1, 0, 0.0, true, true)], bootstrap: None };
    let mut last = kl(&params.values);
    for _ in 0..50 {
        params = l.update(&p, &params, &[&batch]).unwrap().params;
        let now = kl(&params.values);
        assert!(now < last, "KL to uniform went from {last} to {now}");
        last = now;
    }
    assert!(last < 1e-3);
}

#[test]
fn clipped_surrogate_ignores_ratios_beyond_the_clip() {
    let p = policy(PolicyKind::Tabular, 1, 2);
    let values = vec![0.0, 0.0];
    let beyond = Sample { key: 0, hidden: HiddenState::default(), action: 0, advantage: 1.0, old_log_prob: (0.3f64).ln() };
    assert!(densify(2, &clipped_gradient(&p, &values, &[beyond], 0.2, 0.0, Reduction::Sum)).iter().all(|&g| g == 0.0));
    let inside = [Sample { key: 0, hidden: HiddenState::default(), action: 0, advantage: 1.0, old_log_prob: (0.5f64).ln() }];
    let g = densify(2, &clipped_gradient(&p, &values, &inside, 0.2, 0.0, Reduction::Sum));
    let r = densify(2, &reinforce_gradient(&p, &values, &inside, 0.0, Reduction::Sum));
    // at ratio 1 both gradients agree
    assert!(close(&g, &r, 1e-12));
    assert!(g[0] > 0.0);
}

#[test]
fn clipped_updates_are_reproducible_per_seed() {
    let p = policy(PolicyKind::Tabular, 3, 2);
    let batch = TransitionBatch {
        transitions: (0..12).map(|i| rec(i % 3, 3, (i % 2) as u32, i as f64 * 0.1, i % 4 == 3, true)).collect(),
        bootstrap: None,
    };
    let run = |seed| {
        let mut l = Learner::new(LearnerConfig { seed, ..LearnerConfig::clipped() }, &p).unwrap();
        l.update(&p, &p.initial_params(), &[&batch]).unwrap().params.values
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn invalid_configs_are_rejected() {
    let p = policy(PolicyKind::Tabular, 2, 2);
    for bad in [
        LearnerConfig { gamma: 1.5, ..LearnerConfig::reinforce() },
        LearnerConfig { learning_rate: -1.0, ..LearnerConfig::reinforce() },
        LearnerConfig { epochs: 0, ..LearnerConfig::clipped() },
        LearnerConfig { minibatches: 0, ..LearnerConfig::clipped() },
        LearnerConfig { clip_epsilon: 0.0, algorithm: Algorithm::Clipped, ..LearnerConfig::clipped() },
    ] {
        assert!(Learner::new(bad, &p).is_err());
    }
}

#[test]
fn sampling_frequencies_match_the_softmax() {
    let p = policy(PolicyKind::Tabular, 1, 4);
    let params = PolicyParams { version: 0, values: vec![1.0, 0.0, -0.5, 0.3] };
    let probs = p.probs(&params.values, &obs(0, 1), &HiddenState::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 40_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let out = p.act(&params, &obs(0, 1), &HiddenState::default(), ActMode::Sample, &mut rng).unwrap();
        assert!((out.log_prob - probs[out.action].ln()).abs() < 1e-12);
        counts[out.action] += 1;
    }
    for (c, q) in counts.iter().zip(&probs) {
        let se = (q * (1.0 - q) / n as f64).sqrt();
        assert!((*c as f64 / n as f64 - q).abs() < 3.0 * se);
    }
    let greedy = p.act(&params, &obs(0, 1), &HiddenState::default(), ActMode::Greedy, &mut rng).unwrap();
    assert_eq!(greedy.action, 0);
}

fn sample_strategy(states: usize, actions: usize, history: bool) -> impl Strategy<Value = Sample> {
    (0..states, 0..actions, -3.0f64..3.0, -2.5f64..-0.05, prop::option::of(0..states)).prop_map(
        move |(key, action, advantage, old_log_prob, prev)| Sample {
            key,
            hidden: HiddenState(if history { prev.into_iter().collect() } else { Vec::new() }),
            action,
            advantage,
            old_log_prob,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn probabilities_form_a_distribution(
        kind in kind_strategy(),
        values in prop::collection::vec(-20.0f64..20.0, 64),
        key in 0usize..4,
        prev in prop::collection::vec(0usize..4, 0..3),
    ) {
        let p = policy(kind, 4, 3);
        let v = &values[..p.param_count()];
        let pr = p.probs(v, &obs(key, 4), &HiddenState(prev)).unwrap();
        prop_assert!(pr.iter().all(|&q| (0.0..=1.0).contains(&q)));
        prop_assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reinforce_gradient_matches_finite_differences(
        history in any::<bool>(),
        mean in any::<bool>(),
        values in prop::collection::vec(-2.0f64..2.0, 64),
        samples in prop::collection::vec(sample_strategy(3, 3, true), 1..10),
        beta in 0.0f64..0.5,
    ) {
        let kind = if history { PolicyKind::HistoryWindow { window: 1 } } else { PolicyKind::Tabular };
        let p = policy(kind, 3, 3);
        let samples: Vec<Sample> = samples.into_iter().map(|s| Sample { hidden: if history { s.hidden } else { HiddenState::default() }, ..s }).collect();
        let v = &values[..p.param_count()];
        let red = if mean { Reduction::Mean } else { Reduction::Sum };
        let analytic = densify(v.len(), &reinforce_gradient(&p, v, &samples, beta, red));
        let fd = finite_difference(|x| reinforce_objective(&p, x, &samples, beta, red), v, 1e-5);
        prop_assert!(close(&analytic, &fd, 1e-6), "{:?} vs {:?}", analytic, fd);
    }

    #[test]
    fn clipped_gradient_matches_finite_differences_off_the_kink(
        values in prop::collection::vec(-1.5f64..1.5, 9),
        samples in prop::collection::vec(sample_strategy(3, 3, false), 1..10),
        beta in 0.0f64..0.5,
    ) {
        let p = policy(PolicyKind::Tabular, 3, 3);
        let eps = 0.2;
        for s in &samples {
            let lp = p.probs(&values, &obs(s.key, 3), &s.hidden).unwrap()[s.action].ln();
            let r = (lp - s.old_log_prob).exp();
            prop_assume!((r - (1.0 - eps)).abs() > 1e-3 && (r - (1.0 + eps)).abs() > 1e-3);
        }
        let analytic = densify(9, &clipped_gradient(&p, &values, &samples, eps, beta, Reduction::Sum));
        let fd = finite_difference(|x| clipped_objective(&p, x, &samples, eps, beta, Reduction::Sum), &values, 1e-6);
        prop_assert!(close(&analytic, &fd, 1e-5), "{:?} vs {:?}", analytic, fd);
    }

    #[test]
    fn mean_reduction_is_the_scaled_sum(
        values in prop::collection::vec(-2.0f64..2.0, 6),
        samples in prop::collection::vec(sample_strategy(2, 3, false), 1..12),
    ) {
        let p = policy(PolicyKind::Tabular, 2, 3);
        let s = reinforce_objective(&p, &values, &samples, 0.1, Reduction::Sum);
        let m = reinforce_objective(&p, &values, &samples, 0.1, Reduction::Mean);
        prop_assert!((s / samples.len() as f64 - m).abs() < 1e-12);
    }

    #[test]
    fn masked_transitions_never_influence_an_update(
        clipped in any::<bool>(),
        history in any::<bool>(),
        rows in prop::collection::vec((0usize..4, 0u32..3, -2.0f64..2.0, any::<bool>(), any::<bool>()), 1..40),
        junk in prop::collection::vec((0usize..4, 0u32..3, -50.0f64..50.0, any::<bool>()), 40),
        bootstrap in prop::option::of(0usize..4),
    ) {
        let kind = if history { PolicyKind::HistoryWindow { window: 2 } } else { PolicyKind::Tabular };
        let p = policy(kind, 4, 3);
        let config = if clipped { LearnerConfig::clipped() } else { LearnerConfig::reinforce() };
        let transitions: Vec<TransitionRecord> =
            rows.iter().map(|&(s, a, r, d, m)| rec(s, 4, a, r, d, m)).collect();
        let mutated: Vec<TransitionRecord> = transitions
            .iter()
            .zip(&junk)
            .map(|(t, &(s, a, r, d))| if t.mask { t.clone() } else {
                TransitionRecord { hidden: HiddenState(vec![s]), log_prob: -r.abs(), ..rec(s, 4, a, r, d, false) }
            })
            .collect();
        let b1 = TransitionBatch { transitions, bootstrap: bootstrap.map(|s| obs(s, 4)) };
        let b2 = TransitionBatch { transitions: mutated, bootstrap: b1.bootstrap.clone() };
        let mut l1 = Learner::new(config.clone(), &p).unwrap();
        let mut l2 = Learner::new(config, &p).unwrap();
        let params = PolicyParams { version: 5, values: (0..p.param_count()).map(|i| (i as f64 * 0.37).sin()).collect() };
        let o1 = l1.update(&p, &params, &[&b1]).unwrap();
        let o2 = l2.update(&p, &params, &[&b2]).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&o1.params.values), bits(&o2.params.values));
        prop_assert_eq!(bits(l1.baseline_values()), bits(l2.baseline_values()));
    }
}
