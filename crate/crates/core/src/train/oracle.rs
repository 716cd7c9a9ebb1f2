use crate::autodiff::{Tape, Tensor, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EpisodeRecord, MetricsReport};
use crate::nn::{Adam, Encoder, ParamSet, PolicyNet, PolicyOutput, TapedEncoder, TapedPolicy};
use crate::rl::{collect_rollouts, ppo_loss, Actor, RolloutStep, TrajectoryBatch};
use crate::rng::{stream_rng, Stream};
use crate::sim::{NavEnv, LOW_DIM_ORACLE};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Privileged teacher: a depth-stack CNN whose latent is fused with the
/// exact low-dim state `[z_d ; v ; ω ; Δp]` into actor/critic stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePolicy {
    pub encoder: Encoder,
    pub policy: PolicyNet,
    pub frames_l: usize,
}

impl OraclePolicy {
    pub fn new(frames_l: usize, img: usize, latent: usize, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::Init, 1);
        Ok(OraclePolicy {
            encoder: Encoder::new(frames_l, img, latent, &mut rng)?,
            policy: PolicyNet::new(latent + LOW_DIM_ORACLE, &mut rng),
            frames_l,
        })
    }

    /// Batched tape-free evaluation on privileged observations.
    pub fn forward_eval(&self, depth: &Tensor, low: &Tensor) -> Result<PolicyOutput> {
        let z = self.encoder.forward_eval(depth)?;
        let obs = concat_cols_tensor(&z, low);
        self.policy.forward_eval(&obs)
    }

    /// Deterministic (mean) action for the env's current privileged state.
    pub fn act_mean(&self, env: &NavEnv) -> Result<[f64; 3]> {
        let s = env.privileged_state();
        let depth = reshape_batch1(&s.depth_stack);
        let low = Tensor::new(vec![1, LOW_DIM_ORACLE], s.low_dim().to_vec())?;
        let out = self.forward_eval(&depth, &low)?;
        Ok(out.dists[0].mean)
    }
}

impl ParamSet for OraclePolicy {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            self.encoder.named().into_iter().map(|(n, t)| (format!("enc.{n}"), t)).collect();
        out.extend(self.policy.named().into_iter().map(|(n, t)| (format!("pi.{n}"), t)));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .encoder
            .named_mut()
            .into_iter()
            .map(|(n, t)| (format!("enc.{n}"), t))
            .collect();
        out.extend(self.policy.named_mut().into_iter().map(|(n, t)| (format!("pi.{n}"), t)));
        out
    }
}

/// One CSV row per PPO update.
#[derive(Debug, Clone, Copy)]
pub struct UpdateLog {
    pub env_step: u64,
    pub mean_return: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub kl: f64,
    pub alpha: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct EvalPoint {
    pub env_step: u64,
    pub report: MetricsReport,
}

#[derive(Debug)]
pub struct TrainOutcome<P> {
    pub policy: P,
    pub updates: Vec<UpdateLog>,
    pub evals: Vec<EvalPoint>,
    pub env_steps: u64,
    pub diverged: bool,
}

struct OracleActor<'a> {
    nets: &'a OraclePolicy,
}

impl Actor for OracleActor<'_> {
    fn evaluate(&mut self, envs: &[NavEnv]) -> Result<Vec<RolloutStep>> {
        let mut depths = Vec::with_capacity(envs.len());
        let mut lows = Vec::with_capacity(envs.len());
        for env in envs {
            let s = env.privileged_state();
            lows.push(s.low_dim());
            depths.push(s.depth_stack);
        }
        let depth_batch = batch_tensors(&depths);
        let low_flat: Vec<f64> = lows.iter().flatten().copied().collect();
        let low = Tensor::new(vec![envs.len(), LOW_DIM_ORACLE], low_flat)?;
        let out = self.nets.forward_eval(&depth_batch, &low)?;
        Ok(envs
            .iter()
            .enumerate()
            .map(|(i, _)| RolloutStep {
                dist: out.dists[i],
                value: out.values[i],
                obs: lows[i].to_vec(),
                visual: Some(depths[i].clone()),
                teacher: None,
            })
            .collect())
    }
}

pub struct OracleTrainer {
    pub nets: OraclePolicy,
    envs: Vec<NavEnv>,
    adam: Adam,
    cfg: RunConfig,
    pub env_steps: u64,
    action_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
}

impl OracleTrainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let frames_l = cfg.upstream.frames;
        let nets =
            OraclePolicy::new(frames_l, cfg.arena.img, cfg.upstream.latent, cfg.seed)?;
        let envs = (0..cfg.rl.n_envs)
            .map(|i| NavEnv::new(cfg.arena.clone(), frames_l, false, true, cfg.seed, i as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(OracleTrainer {
            adam: Adam::for_params(&nets.named()),
            nets,
            envs,
            cfg: cfg.clone(),
            env_steps: 0,
            action_rng: stream_rng(cfg.seed, Stream::Policy, 0),
            shuffle_rng: stream_rng(cfg.seed, Stream::Shuffle, 0),
        })
    }

    /// Collect one buffer and run the PPO epochs. Returns the update log.
    pub fn update(&mut self) -> Result<UpdateLog> {
        let rl = self.cfg.rl.clone();
        let mut actor = OracleActor { nets: &self.nets };
        let mut batch =
            collect_rollouts(&mut self.envs, &mut actor, rl.horizon, &mut self.action_rng)?;
        let bootstraps: Vec<f64> = {
            let steps = OracleActor { nets: &self.nets }.evaluate(&self.envs)?;
            steps.iter().map(|s| s.value).collect()
        };
        batch.fill_gae(&bootstraps, rl.gamma, rl.gae_lambda);
        if rl.adv_norm {
            crate::rl::advantage_normalize(&mut batch.advantages);
        }
        self.env_steps += batch.len() as u64;
        let lr = rl.lr.at(self.env_steps);

        let mut surrogate_acc = 0.0;
        let mut value_acc = 0.0;
        let mut n_batches = 0.0;
        let mut indices: Vec<usize> = (0..batch.len()).collect();
        for _ in 0..rl.epochs {
            indices.shuffle(&mut self.shuffle_rng);
            for chunk in indices.chunks(rl.minibatch) {
                let (s, v) = self.minibatch_step(&batch, chunk, lr)?;
                surrogate_acc += s;
                value_acc += v;
                n_batches += 1.0;
            }
        }
        Ok(UpdateLog {
            env_step: self.env_steps,
            mean_return: batch.mean_episode_return().unwrap_or(f64::NAN),
            surrogate: surrogate_acc / n_batches,
            value_loss: value_acc / n_batches,
            kl: 0.0,
            alpha: 0.0,
            lr,
        })
    }

    fn minibatch_step(
        &mut self,
        batch: &TrajectoryBatch,
        idx: &[usize],
        lr: f64,
    ) -> Result<(f64, f64)> {
        let m = idx.len();
        let depth: Vec<Tensor> = idx
            .iter()
            .map(|&i| batch.visual[i].clone().expect("oracle batch carries depth"))
            .collect();
        let depth_batch = batch_tensors(&depth);
        let low_flat: Vec<f64> = idx.iter().flat_map(|&i| batch.obs[i].clone()).collect();
        let low = Tensor::new(vec![m, LOW_DIM_ORACLE], low_flat)?;
        let actions = Tensor::new(
            vec![m, 3],
            idx.iter().flat_map(|&i| batch.actions[i].to_vec()).collect(),
        )?;
        let old_logp = Tensor::from_vec(idx.iter().map(|&i| batch.behavior_logp[i]).collect());
        let adv = Tensor::from_vec(idx.iter().map(|&i| batch.advantages[i]).collect());
        let ret = Tensor::from_vec(idx.iter().map(|&i| batch.returns[i]).collect());

        let tape = Tape::new();
        let (enc, pi) = self.on_tape(&tape);
        let z = enc.forward(&tape.leaf(&depth_batch))?;
        let obs = z.concat_cols(&tape.leaf(&low))?;
        let (mean, log_std) = pi.actor(&obs)?;
        let new_logp = pi.log_prob(&mean, &log_std, &tape.leaf(&actions))?;
        let values = pi.critic(&obs)?;
        let loss =
            ppo_loss(&new_logp, &old_logp, &adv, &values, &ret, self.cfg.rl.clip, self.cfg.rl.value_coef)?;
        loss.total.backward()?;

        let grads = collect_grads(&enc, &pi);
        self.adam.step(&mut self.nets.named_mut(), &grads, lr)?;
        self.nets.policy.project_log_std();
        Ok((loss.surrogate, loss.value))
    }

    fn on_tape<'t>(&self, tape: &'t Tape) -> (TapedEncoder, TapedPolicy) {
        (self.nets.encoder.on_tape(tape, "enc", true), self.nets.policy.on_tape(tape, "pi", true))
    }

    /// Deterministic mean-action evaluation on a dedicated env stream.
    pub fn evaluate_policy(&self, episodes: usize, seed: u64) -> Result<(Vec<EpisodeRecord>, MetricsReport)> {
        evaluate(
            &self.cfg.arena,
            self.cfg.upstream.frames,
            false,
            true,
            episodes,
            self.cfg.eval.epsilon,
            seed,
            |env| self.nets.act_mean(env),
        )
    }
}

/// Train the oracle teacher with PPO on privileged state until the step
/// budget (or the configured early-stop success rate). On divergence the
/// last evaluated parameters are retained and the outcome is flagged.
pub fn train_oracle(cfg: &RunConfig) -> Result<TrainOutcome<OraclePolicy>> {
    let mut trainer = OracleTrainer::new(cfg)?;
    let mut updates = Vec::new();
    let mut evals = Vec::new();
    let mut last_good = trainer.nets.clone();
    let mut next_eval = cfg.rl.eval_every.max(1);
    let mut diverged = false;

    while trainer.env_steps < cfg.rl.total_steps {
        match trainer.update() {
            Ok(log) => {
                updates.push(log);
            }
            Err(Error::Numeric(msg)) => {
                warn!("oracle training diverged: {msg}; keeping last evaluated parameters");
                trainer.nets = last_good;
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        if cfg.rl.eval_every > 0 && trainer.env_steps >= next_eval {
            next_eval += cfg.rl.eval_every;
            let (_, report) = trainer.evaluate_policy(
                cfg.rl.eval_episodes,
                cfg.seed ^ 0x5eed_e4a1,
            )?;
            info!(
                "oracle eval at {} steps: SR {:.1}% NE {:.2}",
                trainer.env_steps, report.sr, report.ne
            );
            last_good = trainer.nets.clone();
            let sr = report.sr;
            evals.push(EvalPoint { env_step: trainer.env_steps, report });
            if let Some(gate) = cfg.rl.early_stop_sr {
                if sr >= gate {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        policy: trainer.nets,
        updates,
        evals,
        env_steps: trainer.env_steps,
        diverged,
    })
}

pub(crate) fn batch_tensors(items: &[Tensor]) -> Tensor {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data).expect("batch shape")
}

pub(crate) fn reshape_batch1(t: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Tensor::new(shape, t.data().to_vec()).expect("batch of one")
}

pub(crate) fn concat_cols_tensor(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, ca) = (a.shape()[0], a.shape()[1]);
    let cb = b.shape()[1];
    let mut data = Vec::with_capacity(m * (ca + cb));
    for r in 0..m {
        data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
        data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
    }
    Tensor::new(vec![m, ca + cb], data).expect("concat shape")
}

pub(crate) fn collect_grads(enc: &TapedEncoder, pi: &TapedPolicy) -> Vec<Vec<f64>> {
    let mut vars: Vec<Var> = enc.vars();
    vars.extend(pi.vars());
    vars.iter().map(|v| v.grad().unwrap_or_else(|| vec![0.0; v.numel()])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::nn::LrSchedule;
    use crate::sim::ArenaConfig;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 5;
        cfg.arena = ArenaConfig { img: 8, h_max: 40, ..ArenaConfig::default() };
        cfg.upstream.latent = 16;
        cfg.upstream.crop = 8;
        cfg.rl.n_envs = 2;
        cfg.rl.horizon = 16;
        cfg.rl.buffer = 32;
        cfg.rl.minibatch = 16;
        cfg.rl.epochs = 3;
        cfg.rl.total_steps = 64;
        cfg.rl.eval_every = 0;
        cfg.rl.lr = LrSchedule::Constant { lr: 3e-4 };
        cfg
    }

    #[test]
    fn rollouts_fill_buffer_and_updates_run() {
        let cfg = tiny_cfg();
        let out = train_oracle(&cfg).unwrap();
        assert_eq!(out.env_steps, 64);
        assert_eq!(out.updates.len(), 2);
        assert!(!out.diverged);
        for u in &out.updates {
            assert!(u.surrogate.is_finite());
            assert!(u.value_loss.is_finite());
            assert_eq!(u.kl, 0.0);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_cfg();
        let a = train_oracle(&cfg).unwrap();
        let b = train_oracle(&cfg).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.updates.len(), b.updates.len());
        for (x, y) in a.updates.iter().zip(&b.updates) {
            assert_eq!(x.surrogate, y.surrogate);
            assert_eq!(x.value_loss, y.value_loss);
        }
    }

    #[test]
    fn deterministic_mean_evaluation_is_bit_exact() {
        let cfg = tiny_cfg();
        let out = train_oracle(&cfg).unwrap();
        let t = OracleTrainer::new(&cfg).unwrap();
        let mut t = t;
        t.nets = out.policy.clone();
        let (recs_a, rep_a) = t.evaluate_policy(3, 99).unwrap();
        let (recs_b, rep_b) = t.evaluate_policy(3, 99).unwrap();
        assert_eq!(rep_a, rep_b);
        for (a, b) in recs_a.iter().zip(&recs_b) {
            assert_eq!(a.positions, b.positions);
        }
    }

    #[test]
    fn every_transition_visited_exactly_epochs_times() {
        // Counting via the shuffled index schedule: 3 epochs over a buffer
        // divisible by the minibatch touches each index exactly 3 times.
        let cfg = tiny_cfg();
        let mut rng = stream_rng(cfg.seed, Stream::Shuffle, 0);
        let mut counts = vec![0usize; cfg.rl.buffer];
        let mut indices: Vec<usize> = (0..cfg.rl.buffer).collect();
        for _ in 0..cfg.rl.epochs {
            indices.shuffle(&mut rng);
            for chunk in indices.chunks(cfg.rl.minibatch) {
                assert_eq!(chunk.len(), cfg.rl.minibatch);
                for &i in chunk {
                    counts[i] += 1;
                }
            }
        }
        assert!(counts.iter().all(|&c| c == cfg.rl.epochs));
    }
}
