use std::f64::consts::PI;

use proptest::prelude::*;

use propel::env::{Env, EnvId};

fn env_id() -> impl Strategy<Value = EnvId> {
    prop_oneof![Just(EnvId::MountainCar), Just(EnvId::Pendulum)]
}

proptest! {
    #[test]
    fn applied_actions_respect_the_bounds(id in env_id(), seed in any::<u64>(), actions in prop::collection::vec(-50.0..50.0f64, 1..200)) {
        let mut env = Env::new(id);
        env.reset(seed);
        let spec = env.spec().clone();
        for a in actions {
            let out = env.step(&[a]).unwrap();
            prop_assert!(out.applied_action[0] >= spec.action_low[0] && out.applied_action[0] <= spec.action_high[0]);
            if out.done {
                break;
            }
        }
    }

    #[test]
    fn pendulum_angle_stays_normalised(seed in any::<u64>(), actions in prop::collection::vec(-5.0..5.0f64, 1..200)) {
        let mut env = Env::new(EnvId::Pendulum);
        env.reset(seed);
        for a in actions {
            env.step(&[a]).unwrap();
            let th = env.state()[0];
            prop_assert!((-PI..=PI).contains(&th), "theta {}", th);
        }
    }

    #[test]
    fn equal_seeds_give_identical_trajectories(id in env_id(), seed in any::<u64>(), actions in prop::collection::vec(-2.0..2.0f64, 1..100)) {
        let (mut a, mut b) = (Env::new(id), Env::new(id));
        prop_assert_eq!(a.reset(seed), b.reset(seed));
        for u in actions {
            let (x, y) = (a.step(&[u]).unwrap(), b.step(&[u]).unwrap());
            prop_assert_eq!(x.next_obs.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.next_obs.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(x.reward.to_bits(), y.reward.to_bits());
            if x.done {
                break;
            }
        }
    }
}
