//! Backward stage-phased training of a stack of per-stage modules.
//!
//! Phase `k` (from the last stage down to the first) starts every episode
//! inside band `k`. After each environment step every stage module whose
//! buffer is past warmup takes one learn step, last stage first. Crossing
//! into the next stage stores the base reward plus the discounted target
//! value of the next stage's module at the entry state.

mod backward;
mod buffer;
mod policy;

pub use backward::{
    evaluation_rng, module_seeds, train_backward, training_rng, Diagnostics, EpisodeReport, Progress, Trainer,
    TrainerConfig, TrainerParams,
};
pub use buffer::ReplayBuffer;
pub use policy::{
    collect_step, evaluate, merged_value, rollout, EvalStats, StackedPolicy, Trajectory, TrajectoryStep,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::gridworld::{GridWorldEnv, GridWorldParams, RIGHT};
    use crate::rl_modules::{
        tabular_flat_solve, DqnConfig, ModuleConfig, QModule, StageModule, TabularConfig,
    };
    use crate::staged_mdp::{Action, FiniteStagedEnv, SdqlRng, StageSpec, StagedEnv};
    use rand::SeedableRng;

    fn six_by_six() -> GridWorldEnv {
        GridWorldEnv::new(GridWorldParams {
            rows: 6,
            cols: 6,
            band_thresholds: vec![3],
            goal: (5, 5),
            ..Default::default()
        })
        .unwrap()
    }

    fn tabular_config(episodes: usize) -> TrainerConfig {
        let module = ModuleConfig::Tabular(TabularConfig {
            epsilon_decay_steps: 4000,
            epsilon_end: 0.2,
            ..Default::default()
        });
        TrainerConfig {
            params: TrainerParams {
                episodes_per_phase: episodes,
                batch_size: 16,
                warmup_steps: 16,
                eval_every: 1000,
                eval_episodes: 1,
                ..Default::default()
            },
            seed: 7,
            stages: StageSpec::homogeneous(2, 0.9, 60),
            modules: vec![module.clone(), module],
        }
    }

    #[test]
    fn tabular_stack_recovers_flat_solution() {
        let env = six_by_six();
        let exact = tabular_flat_solve(&env, &[0.9, 0.9], 1e-14).unwrap();
        let policy = train_backward(env.clone(), &tabular_config(400)).unwrap();
        for id in 0..env.n_states() {
            let s = env.state_from_id(id);
            if env.is_terminal(&s) {
                continue;
            }
            let v = merged_value(&policy, &env, &s);
            assert!((v - exact.value(id)).abs() <= 1e-6, "state {s:?}: {v} vs {}", exact.value(id));
            let a = policy.greedy_action(&env, &s).as_discrete().unwrap();
            assert!(exact.greedy_set(id, 1e-9).contains(&a), "state {s:?} picks {a}");
        }
    }

    #[test]
    fn zero_episodes_leaves_stack_untouched() {
        let env = six_by_six();
        let config = tabular_config(0);
        let mut trainer = Trainer::new(env.clone(), config.clone()).unwrap();
        let fresh = trainer.policy().clone();
        assert!(trainer.is_done());
        assert!(trainer.run_episode().unwrap().is_none());
        assert_eq!(trainer.progress().env_steps, 0);
        assert_eq!(train_backward(env, &config).unwrap(), fresh);
    }

    #[test]
    fn phases_run_backwards() {
        let mut trainer = Trainer::new(six_by_six(), tabular_config(3)).unwrap();
        let mut phases = Vec::new();
        trainer.run(|_, r| phases.push((r.phase, r.episode, r.phase_finished))).unwrap();
        assert_eq!(
            phases,
            vec![(2, 1, false), (2, 2, false), (2, 3, true), (1, 1, false), (1, 2, false), (1, 3, true)]
        );
        assert_eq!(trainer.diagnostics().truncation_violations, 0);
    }

    #[test]
    fn identical_seeds_give_identical_results() {
        let run = || {
            let mut t = Trainer::new(six_by_six(), tabular_config(30)).unwrap();
            t.run(|_, _| {}).unwrap();
            (t.evaluate(3).unwrap(), t.progress().clone(), t.policy().clone())
        };
        assert_eq!(run(), run());
    }

    /// Stage 1 always moves right; stage 2 is a DQN whose online and target
    /// networks differ.
    fn crossing_policy(env: &GridWorldEnv) -> StackedPolicy {
        let configs = [
            ModuleConfig::Tabular(TabularConfig::default()),
            ModuleConfig::Dqn(DqnConfig { hidden: vec![8], ..Default::default() }),
        ];
        let mut policy =
            StackedPolicy::build(env, &StageSpec { n_stages: 2, discounts: vec![0.7, 0.9], max_steps: 50 }, &configs, &[1, 2])
                .unwrap();
        if let StageModule::Tabular(m) = policy.module_mut(1) {
            for s in env.all_cells() {
                m.table.insert(
                    env.observe(&s).iter().map(|v| v.to_bits()).collect(),
                    vec![0.0, 0.0, 0.0, 1.0],
                );
            }
        }
        if let StageModule::Dqn(m) = policy.module_mut(2) {
            for w in m.online.layers[0].weights.iter_mut() {
                *w += 0.5;
            }
        }
        policy
    }

    #[test]
    fn transition_reward_uses_next_stage_target_value() {
        let env = six_by_six();
        let mut policy = crossing_policy(&env);
        let mut rng = SdqlRng::seed_from_u64(0);
        let (t, next) = collect_step(&mut policy, &env, &(2, 2), false, &mut rng).unwrap();
        assert_eq!(next, (2, 3));
        assert_eq!(t.action, Action::Discrete(RIGHT));
        assert!(t.stage_transitioned && !t.terminal);
        assert_eq!(t.stage, 1);
        let obs = env.observe(&(2, 3));
        let target_v = policy.module(2).value(&obs);
        assert_eq!(t.reward, 0.7 * target_v);
        if let StageModule::Dqn(m) = policy.module(2) {
            let online_v = m.q_values(&obs).into_iter().fold(f64::NEG_INFINITY, f64::max);
            assert_ne!(online_v, target_v);
        }
    }

    #[test]
    fn terminal_step_is_not_a_transition() {
        let env = GridWorldEnv::new(GridWorldParams {
            rows: 2,
            cols: 4,
            band_thresholds: vec![3],
            goal: (0, 3),
            ..Default::default()
        })
        .unwrap();
        let mut policy = crossing_policy(&env);
        let mut rng = SdqlRng::seed_from_u64(0);
        let (t, _) = collect_step(&mut policy, &env, &(0, 2), false, &mut rng).unwrap();
        assert!(t.terminal);
        assert!(!t.stage_transitioned);
        assert_eq!(t.reward, 1.0);
    }

    #[test]
    fn evaluation_counts_failures() {
        let env = six_by_six();
        let mut policy = crossing_policy(&env);
        policy.stages.max_steps = 4;
        let mut rng = SdqlRng::seed_from_u64(0);
        let (stats, trajectories) = evaluate(&policy, &env, 3, &mut rng).unwrap();
        assert_eq!(stats.success_rate, 0.0);
        assert_eq!(stats.mean_steps, 4.0);
        assert_eq!(trajectories[0], trajectories[2]);
        assert!(evaluate(&policy, &env, 0, &mut rng).is_err());
    }
}
