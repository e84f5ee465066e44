use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use sdql::environments::{
    CargoEnv, CargoParams, GridWorldEnv, GridWorldParams, ManipulatorEnv, ManipulatorParams,
};
use sdql::nncore::{soft_update, HiddenActivation, MlpParams, OutputActivation, ParamGrads};
use sdql::staged_mdp::{
    reset_in_band, staged_reward, Action, ActionSpace, SdqlRng, StagedEnv, Transition,
};
use sdql::trainer::ReplayBuffer;

fn net(sizes: &[usize], seed: u64) -> MlpParams {
    MlpParams::new(sizes, HiddenActivation::Tanh, OutputActivation::Linear, seed).unwrap()
}

fn params(net: &MlpParams) -> Vec<f64> {
    net.layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
        .collect()
}

fn random_action(space: &ActionSpace, rng: &mut SdqlRng) -> Action {
    match space {
        ActionSpace::Discrete { n } => Action::Discrete(rng.random_range(0..*n)),
        ActionSpace::Box { low, high } => {
            Action::Continuous(low.iter().zip(high).map(|(l, h)| rng.random_range(*l..=*h)).collect())
        }
    }
}

/// Random-action rollout from band `k`; checks that stages never decrease,
/// move by at most one per step, and that terminal states lie in the last stage.
fn stage_walk<E: StagedEnv>(env: &E, k: usize, steps: usize, seed: u64) -> std::result::Result<(), TestCaseError> {
    let mut rng = SdqlRng::seed_from_u64(seed);
    let mut s = reset_in_band(env, k, &mut rng).unwrap();
    prop_assert_eq!(env.stage_of(&s), k);
    for _ in 0..steps {
        let stage = env.stage_of(&s);
        let a = random_action(&env.action_space(stage), &mut rng);
        let out = env.step(&s, &a, &mut rng);
        let next = env.stage_of(&out.next_state);
        prop_assert!(next == stage || next == stage + 1, "stage {} -> {}", stage, next);
        if out.terminal {
            prop_assert_eq!(next, env.n_stages());
            break;
        }
        s = out.next_state;
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_update_interpolates(seed in 0u64..1000, tau in 0.0f64..=1.0) {
        let online = net(&[3, 5, 2], seed);
        let mut target = net(&[3, 5, 2], seed + 7);
        let before = params(&target);
        soft_update(&mut target, &online, tau).unwrap();
        for ((t, b), o) in params(&target).iter().zip(&before).zip(params(&online)) {
            let expected = tau * o + (1.0 - tau) * b;
            prop_assert!((t - expected).abs() <= 1e-15 * (1.0 + expected.abs()));
            prop_assert!(*t >= b.min(o) - 1e-15 && *t <= b.max(o) + 1e-15);
        }
    }

    #[test]
    fn global_norm_clip_bounds_and_keeps_direction(
        seed in 0u64..1000,
        scale in 1e-3f64..1e3,
        max_norm in 0.1f64..20.0,
    ) {
        let model = net(&[4, 6, 3], seed);
        let acts = model.forward_batch(&[0.3, -0.2, 0.9, 0.1], 1).unwrap();
        let (mut grads, _) = model.backward_batch(&acts, &[scale, -scale, 0.5 * scale], false).unwrap();
        let before: Vec<f64> = grads.values().copied().collect();
        let norm = grads.global_norm();
        grads.clip_global_norm(max_norm);
        prop_assert!(grads.global_norm() <= max_norm * (1.0 + 1e-12) || norm <= max_norm);
        let factor = if norm > max_norm { max_norm / norm } else { 1.0 };
        for (g, b) in grads.values().zip(&before) {
            prop_assert!((g - b * factor).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn zero_gradient_leaves_norm_zero(seed in 0u64..1000) {
        let mut grads = ParamGrads::zeros_like(&net(&[2, 3, 1], seed));
        prop_assert_eq!(grads.clip_global_norm(1.0), 0.0);
        prop_assert!(grads.values().all(|g| *g == 0.0));
    }

    #[test]
    fn staged_reward_bonus(base in -2.0f64..2.0, gamma in 0.01f64..0.999, v in -5.0f64..5.0) {
        prop_assert_eq!(staged_reward(base, false, gamma, v).unwrap().to_bits(), base.to_bits());
        prop_assert_eq!(staged_reward(base, true, gamma, v).unwrap(), base + gamma * v);
    }

    #[test]
    fn replay_buffer_stays_within_capacity(capacity in 1usize..40, pushes in 0usize..120, seed in 0u64..100) {
        let mut buffer = ReplayBuffer::new(2, capacity).unwrap();
        for i in 0..pushes {
            buffer.push(Transition {
                state_obs: vec![i as f64],
                action: Action::Discrete(0),
                reward: 0.0,
                next_state_obs: vec![i as f64 + 1.0],
                terminal: false,
                stage_transitioned: false,
                stage: 2,
            }).unwrap();
            prop_assert!(buffer.len() <= capacity);
        }
        prop_assert_eq!(buffer.len(), pushes.min(capacity));
        let oldest_kept = pushes.saturating_sub(capacity) as f64;
        if !buffer.is_empty() {
            let mut rng = SdqlRng::seed_from_u64(seed);
            for t in buffer.sample(16, &mut rng) {
                prop_assert!(t.state_obs[0] >= oldest_kept && t.state_obs[0] < pushes as f64);
            }
        }
    }

    #[test]
    fn gridworld_stages_are_monotone(seed in 0u64..10_000, k in 1usize..=5) {
        let env = GridWorldEnv::new(GridWorldParams::default()).unwrap();
        stage_walk(&env, k, 300, seed)?;
    }

    #[test]
    fn manipulator_stages_are_monotone(seed in 0u64..10_000, k in 1usize..=2) {
        let env = ManipulatorEnv::new(ManipulatorParams::default()).unwrap();
        stage_walk(&env, k, 300, seed)?;
    }

    #[test]
    fn cargo_stages_are_monotone(seed in 0u64..10_000, k in 1usize..=2) {
        let env = CargoEnv::new(CargoParams::default()).unwrap();
        stage_walk(&env, k, 400, seed)?;
    }
}
