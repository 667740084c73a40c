use backstep::demo::{record, shipped_key_door_demo, validate_replay, Demonstration, DivergenceKind, Recorder};
use backstep::env::cliff::BlindCliffWalkConfig;
use backstep::env::keydoor::KeyDoorGridConfig;
use backstep::env::{Action, EnvSnapshot, EnvSpec, Environment};
use backstep::Error;
use proptest::prelude::*;

fn cliff(n: usize, seed: u64) -> EnvSpec {
    EnvSpec::BlindCliffWalk(BlindCliffWalkConfig::seeded(n, seed))
}

fn keydoor() -> EnvSpec {
    EnvSpec::KeyDoorGrid(KeyDoorGridConfig::default_layout())
}

fn trace(env: &mut dyn Environment, actions: &[u32]) -> Vec<(String, u64, bool)> {
    let mut out = Vec::new();
    for &a in actions {
        if env.is_done() {
            break;
        }
        let r = env.step(Action(a % env.action_count() as u32)).unwrap();
        out.push((serde_json::to_string(&r.observation).unwrap(), r.reward.to_bits(), r.done));
    }
    out
}

#[test]
fn perfect_cliff_walk_pays_one_after_n_steps() {
    for n in [2, 6, 20] {
        let config = BlindCliffWalkConfig::seeded(n, 3);
        let demo = record(&EnvSpec::BlindCliffWalk(config.clone()), config.correct_actions(), "").unwrap();
        assert_eq!(demo.len(), n);
        assert_eq!(demo.total_return(), 1.0);
        assert!(demo.steps()[..n - 1].iter().all(|s| !s.done && s.reward == 0.0));
    }
}

#[test]
fn wrong_cliff_action_ends_with_nothing() {
    let config = BlindCliffWalkConfig::seeded(5, 9);
    let correct = config.correct_actions();
    let mut env = EnvSpec::BlindCliffWalk(config).build().unwrap();
    env.reset();
    env.step(correct[0]).unwrap();
    let r = env.step(Action(1 - correct[1].0)).unwrap();
    assert!(r.done);
    assert_eq!(r.reward, 0.0);
    assert!(matches!(env.step(correct[2]), Err(Error::ContractViolation(_))));
}

#[test]
fn single_state_cliff_is_rejected() {
    assert!(matches!(cliff(1, 0).build(), Err(Error::Validation(_))));
}

#[test]
fn out_of_range_action_is_rejected_without_side_effects() {
    for spec in [cliff(4, 0), keydoor()] {
        let mut env = spec.build().unwrap();
        env.reset();
        let before = env.snapshot();
        let bad = Action(env.action_count() as u32);
        assert!(matches!(env.step(bad), Err(Error::Validation(_))));
        assert_eq!(env.snapshot(), before);
    }
}

#[test]
fn snapshots_do_not_cross_environments() {
    let mut c = cliff(4, 0).build().unwrap();
    let k = keydoor().build().unwrap();
    assert!(matches!(c.restore(&k.snapshot()), Err(Error::Incompatible(_))));
    let mut snap = c.snapshot();
    snap.version += 1;
    assert!(matches!(c.restore(&snap), Err(Error::Incompatible(_))));
}

#[test]
fn truncated_snapshot_bytes_fail_to_decode() {
    let bytes = keydoor().build().unwrap().snapshot().to_bytes();
    for cut in [0, 3, bytes.len() / 2, bytes.len() - 1] {
        assert!(EnvSnapshot::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn keydoor_episode_times_out() {
    let config = KeyDoorGridConfig::default_layout();
    let mut env = EnvSpec::KeyDoorGrid(config.clone()).build().unwrap();
    env.reset();
    let mut steps = 0;
    // bump into the left wall until the clock runs out
    while !env.is_done() {
        env.step(Action(env.action_names().iter().position(|n| *n == "left").unwrap() as u32)).unwrap();
        steps += 1;
        assert!(steps <= config.max_episode_steps as usize);
    }
    assert_eq!(steps, config.max_episode_steps as usize);
}

#[test]
fn shipped_demo_matches_the_search_solution() {
    let demo = shipped_key_door_demo();
    let spec = demo.env_spec().unwrap();
    assert_eq!(spec, keydoor());
    let solution = KeyDoorGridConfig::default_layout().solve().unwrap();
    assert_eq!(demo.actions().collect::<Vec<_>>(), solution.actions);
    assert_eq!(demo.total_return(), 400.0);
    assert!(demo.is_finalized());
    assert!(validate_replay(&demo, &spec).unwrap().is_exact());
}

#[test]
fn tampered_demo_reports_the_first_divergent_step() {
    let demo = shipped_key_door_demo();
    let mut steps = demo.steps().to_vec();
    steps[10].reward += 1.0;
    let tampered = Demonstration::new(demo.header().clone(), steps).unwrap();
    let report = validate_replay(&tampered, &keydoor()).unwrap();
    assert_eq!(report.divergence.as_ref().unwrap().step, 10);
    assert!(matches!(report.divergence.unwrap().kind, DivergenceKind::Reward { .. }));

    let mut steps = demo.steps().to_vec();
    steps.swap(3, 4);
    let swapped = Demonstration::new(demo.header().clone(), steps).unwrap();
    assert!(!validate_replay(&swapped, &keydoor()).unwrap().is_exact());
}

#[test]
fn demo_for_another_config_is_incompatible() {
    let demo = shipped_key_door_demo();
    assert!(matches!(validate_replay(&demo, &cliff(4, 0)), Err(Error::Incompatible(_))));
    let other = record(&cliff(4, 0), BlindCliffWalkConfig::seeded(4, 0).correct_actions(), "").unwrap();
    assert!(matches!(validate_replay(&other, &cliff(4, 1)), Err(Error::Incompatible(_))));
}

#[test]
fn corrupt_demo_bytes_fail_to_decode() {
    let bytes = shipped_key_door_demo().to_bytes();
    assert!(Demonstration::from_bytes(&bytes[..bytes.len() - 5]).is_err());
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xff;
    assert!(matches!(Demonstration::from_bytes(&flipped), Err(Error::Decode(_))));
}

#[test]
fn rewinding_everything_returns_to_the_initial_state() {
    let spec = keydoor();
    let mut rec = Recorder::new(&spec).unwrap();
    let initial = rec.env().snapshot();
    for a in [3, 3, 1, 0, 2] {
        rec.step(Action(a)).unwrap();
    }
    assert!(rec.rewind(6).is_err());
    rec.rewind(5).unwrap();
    assert!(rec.is_empty());
    assert_eq!(rec.env().snapshot(), initial);
    assert_eq!(rec.score(), 0.0);
    assert!(rec.draft().is_ok());
}

fn spec_strategy() -> impl Strategy<Value = EnvSpec> {
    prop_oneof![(2usize..30, any::<u64>()).prop_map(|(n, s)| cliff(n, s)), Just(keydoor())]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn restore_reproduces_the_future(
        spec in spec_strategy(),
        prefix in prop::collection::vec(0u32..8, 0..60),
        suffix in prop::collection::vec(0u32..8, 1..60),
    ) {
        let mut env = spec.build().unwrap();
        env.reset();
        trace(env.as_mut(), &prefix);
        let snap = EnvSnapshot::from_bytes(&env.snapshot().to_bytes()).unwrap();
        let first = trace(env.as_mut(), &suffix);
        let mut other = spec.build().unwrap();
        other.restore(&snap).unwrap();
        prop_assert_eq!(other.snapshot(), snap.clone());
        prop_assert_eq!(trace(other.as_mut(), &suffix), first.clone());
        env.restore(&snap).unwrap();
        prop_assert_eq!(trace(env.as_mut(), &suffix), first);
    }

    #[test]
    fn recordings_with_rewinds_replay_exactly(
        spec in spec_strategy(),
        script in prop::collection::vec((0u32..8, 0usize..4), 1..200),
    ) {
        let mut rec = Recorder::new(&spec).unwrap();
        let count = rec.env().action_count() as u32;
        for (a, back) in script {
            if rec.is_done() { break; }
            if back > 0 && back <= rec.len() && a % 5 == 0 {
                rec.rewind(back).unwrap();
            } else {
                rec.step(Action(a % count)).unwrap();
            }
        }
        let demo = if rec.is_done() { rec.finalized(0).unwrap() } else { rec.draft().unwrap() };
        let decoded = Demonstration::from_bytes(&demo.to_bytes()).unwrap();
        prop_assert_eq!(decoded.to_bytes(), demo.to_bytes());
        prop_assert!(validate_replay(&decoded, &spec).unwrap().is_exact());
        let mut acc = 0.0;
        for t in (0..demo.len()).rev() {
            acc += demo.steps()[t].reward;
            prop_assert!((demo.suffix_return(t).unwrap() - acc).abs() < 1e-9);
        }
    }
}
