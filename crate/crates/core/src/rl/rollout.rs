use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::GaussianAction;
use crate::rl::gae::compute_gae;
use crate::sim::NavEnv;
use rand::Rng;

/// One environment's policy evaluation at the current state.
pub struct RolloutStep {
    pub dist: GaussianAction,
    pub value: f64,
    /// Flat observation as the update-time policy input (for the oracle this
    /// is the low-dim tail; the depth stack rides in `visual`).
    pub obs: Vec<f64>,
    /// Depth stack for trainers that backprop through a CNN at update time.
    pub visual: Option<Tensor>,
    /// Teacher action distribution at the same timestep, when active.
    pub teacher: Option<GaussianAction>,
}

/// Batched policy evaluation over the pool's current states. Implemented by
/// the trainers (the oracle fuses a depth CNN, the student a frozen
/// encoder latent).
pub trait Actor {
    fn evaluate(&mut self, envs: &[NavEnv]) -> Result<Vec<RolloutStep>>;
}

/// Rollout storage for one PPO update, flattened env-major: the stream of
/// env `e` occupies `e·horizon .. (e+1)·horizon`.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryBatch {
    pub obs: Vec<Vec<f64>>,
    pub visual: Vec<Option<Tensor>>,
    pub actions: Vec<[f64; 3]>,
    pub behavior_logp: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub teacher: Vec<Option<GaussianAction>>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Returns of episodes that finished during collection.
    pub episode_returns: Vec<f64>,
    pub n_envs: usize,
    pub horizon: usize,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn mean_episode_return(&self) -> Option<f64> {
        if self.episode_returns.is_empty() {
            None
        } else {
            Some(self.episode_returns.iter().sum::<f64>() / self.episode_returns.len() as f64)
        }
    }

    /// Generalized advantage estimation per env stream, then `V̂ = Â + V`.
    pub fn fill_gae(&mut self, bootstraps: &[f64], gamma: f64, lambda: f64) {
        assert_eq!(bootstraps.len(), self.n_envs);
        self.advantages.clear();
        self.returns.clear();
        for e in 0..self.n_envs {
            let lo = e * self.horizon;
            let hi = lo + self.horizon;
            let (adv, ret) = compute_gae(
                &self.rewards[lo..hi],
                &self.values[lo..hi],
                &self.dones[lo..hi],
                bootstraps[e],
                gamma,
                lambda,
            );
            self.advantages.extend(adv);
            self.returns.extend(ret);
        }
    }
}

/// Collect exactly `n_envs × horizon` transitions with deterministic
/// interleaving by instance index. Environments auto-reset on terminal
/// steps; the caller computes bootstrap values afterwards.
pub fn collect_rollouts(
    envs: &mut [NavEnv],
    actor: &mut dyn Actor,
    horizon: usize,
    action_rng: &mut impl Rng,
) -> Result<TrajectoryBatch> {
    let n_envs = envs.len();
    let total = n_envs * horizon;
    let mut streams: Vec<TrajectoryBatch> = (0..n_envs)
        .map(|_| TrajectoryBatch { n_envs: 1, horizon, ..TrajectoryBatch::default() })
        .collect();
    let mut running_return = vec![0.0; n_envs];
    let mut episode_returns = Vec::new();

    for _ in 0..horizon {
        let steps = actor.evaluate(envs)?;
        if steps.len() != n_envs {
            return Err(Error::contract(format!(
                "actor returned {} evaluations for {n_envs} envs",
                steps.len()
            )));
        }
        for (e, step) in steps.into_iter().enumerate() {
            let action = step.dist.sample(action_rng);
            let logp = step.dist.log_prob(&action);
            let out = envs[e]
                .step(action)
                .map_err(|err| Error::contract(format!("env {e} failed: {err}")))?;
            running_return[e] += out.reward;
            let s = &mut streams[e];
            s.obs.push(step.obs);
            s.visual.push(step.visual);
            s.actions.push(action);
            s.behavior_logp.push(logp);
            s.rewards.push(out.reward);
            s.values.push(step.value);
            s.dones.push(out.terminal);
            s.teacher.push(step.teacher);
            if out.terminal {
                episode_returns.push(running_return[e]);
                running_return[e] = 0.0;
                envs[e].reset()?;
            }
        }
    }

    let mut batch = TrajectoryBatch {
        n_envs,
        horizon,
        episode_returns,
        ..TrajectoryBatch::default()
    };
    for s in streams {
        batch.obs.extend(s.obs);
        batch.visual.extend(s.visual);
        batch.actions.extend(s.actions);
        batch.behavior_logp.extend(s.behavior_logp);
        batch.rewards.extend(s.rewards);
        batch.values.extend(s.values);
        batch.dones.extend(s.dones);
        batch.teacher.extend(s.teacher);
    }
    debug_assert_eq!(batch.len(), total);
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use crate::sim::ArenaConfig;

    /// Test actor: zero-mean unit-std policy, constant value, no frames.
    struct NullActor;
    impl Actor for NullActor {
        fn evaluate(&mut self, envs: &[NavEnv]) -> Result<Vec<RolloutStep>> {
            Ok(envs
                .iter()
                .map(|e| RolloutStep {
                    dist: GaussianAction { mean: [0.0; 3], log_std: [0.0; 3] },
                    value: 0.5,
                    obs: e.student_low_dim().to_vec(),
                    visual: None,
                    teacher: None,
                })
                .collect())
        }
    }

    fn pool(n: usize, seed: u64) -> Vec<NavEnv> {
        let cfg = ArenaConfig { img: 8, h_max: 50, ..ArenaConfig::default() };
        (0..n)
            .map(|i| NavEnv::new(cfg.clone(), 3, false, false, seed, i as u64).unwrap())
            .collect()
    }

    #[test]
    fn buffer_length_is_exactly_steps() {
        let mut envs = pool(4, 1);
        let mut rng = stream_rng(1, Stream::Policy, 0);
        let batch = collect_rollouts(&mut envs, &mut NullActor, 32, &mut rng).unwrap();
        assert_eq!(batch.len(), 128);
        assert_eq!(batch.obs.len(), 128);
        assert_eq!(batch.teacher.len(), 128);
    }

    #[test]
    fn deterministic_given_seed() {
        let run = || {
            let mut envs = pool(3, 9);
            let mut rng = stream_rng(9, Stream::Policy, 0);
            let b = collect_rollouts(&mut envs, &mut NullActor, 40, &mut rng).unwrap();
            (b.actions.clone(), b.rewards.clone(), b.dones.clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gae_fills_per_stream_and_respects_bootstraps() {
        let mut envs = pool(2, 3);
        let mut rng = stream_rng(3, Stream::Policy, 0);
        let mut batch = collect_rollouts(&mut envs, &mut NullActor, 16, &mut rng).unwrap();
        batch.fill_gae(&[0.25, -0.5], 0.99, 0.95, );
        assert_eq!(batch.advantages.len(), 32);
        assert_eq!(batch.returns.len(), 32);
        // stream boundaries: recompute stream 1 independently
        let (adv1, _) = compute_gae(
            &batch.rewards[16..32],
            &batch.values[16..32],
            &batch.dones[16..32],
            -0.5,
            0.99,
            0.95,
        );
        assert_eq!(&batch.advantages[16..32], &adv1[..]);
    }

    #[test]
    fn episodes_autoreset_and_returns_recorded() {
        // Tiny h_max forces several terminations during collection.
        let cfg = ArenaConfig { img: 8, h_max: 5, ..ArenaConfig::default() };
        let mut envs: Vec<NavEnv> =
            (0..2).map(|i| NavEnv::new(cfg.clone(), 3, false, false, 4, i).unwrap()).collect();
        let mut rng = stream_rng(4, Stream::Policy, 0);
        let batch = collect_rollouts(&mut envs, &mut NullActor, 20, &mut rng).unwrap();
        let dones = batch.dones.iter().filter(|&&d| d).count();
        assert!(dones >= 6, "expected several terminations, got {dones}");
        assert_eq!(batch.episode_returns.len(), dones);
    }
}
