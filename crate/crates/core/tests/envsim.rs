use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ted_core::envsim::Env;
use ted_core::harness::ExperimentConfig;
use ted_core::synthgen::Phase;

#[test]
fn reset_is_deterministic_under_a_fixed_seed() {
    let spec = ExperimentConfig::defaults().env;
    let first = |seed| {
        let mut env = Env::new(spec.clone());
        env.reset(Phase::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    };
    assert_eq!(first(5), first(5));
    assert_ne!(first(5).data, first(6).data);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_have_fixed_length_and_bounded_dynamics(seed in any::<u64>(), actions in prop::collection::vec(0usize..5, 50)) {
        let spec = ExperimentConfig::defaults().env;
        let mut env = Env::new(spec.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = env.reset(Phase::Train, &mut rng).unwrap();
        let episodic = env.factors().unwrap().episodic.clone();
        for (t, &a) in actions.iter().enumerate() {
            let r = env.step(a).unwrap();
            prop_assert_eq!(r.done, t + 1 == spec.horizon);
            prop_assert_eq!(r.observation.episode_id, first.episode_id);
            prop_assert_eq!(r.observation.timestep, t + 1);
            prop_assert!(r.reward <= 0.0);
            let f = env.factors().unwrap();
            prop_assert_eq!(&f.episodic, &episodic);
            for (x, b) in f.dynamic.iter().zip(spec.factor_spec.dynamic_bounds()) {
                prop_assert!(b.contains(*x));
            }
        }
        prop_assert!(env.step(0).is_err());
    }
}
