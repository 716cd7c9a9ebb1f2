//! Declarative run configuration (TOML). Unknown keys are rejected and all
//! numeric ranges are validated at load time.

use crate::error::{Error, Result};
use crate::nn::LrSchedule;
use crate::sim::ArenaConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub upstream: UpstreamConfig,
    pub arena: ArenaConfig,
    pub rl: RlConfig,
    pub decay: DecayConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            upstream: UpstreamConfig::default(),
            arena: ArenaConfig::default(),
            rl: RlConfig::default(),
            decay: DecayConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Offline corpus collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Number of usable episodes to collect.
    pub episodes: usize,
    /// Fraction of episodes driven by the scripted go-to-goal controller;
    /// the rest use piecewise-constant random exploration.
    pub scripted_fraction: f64,
    /// Episode step cap during collection.
    pub max_episode_len: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { episodes: 500, scripted_fraction: 0.5, max_episode_len: 40 }
    }
}

/// Upstream masked contrastive pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpstreamConfig {
    /// Bernoulli masking probability ρ_m.
    pub mask_prob: f64,
    /// InfoNCE temperature τ.
    pub temperature: f64,
    /// Momentum coefficient m of the key-network update
    /// `θ_k ← m·SG(θ) + (1−m)·θ_k`.
    pub momentum: f64,
    /// Sequence length T.
    pub seq_len: usize,
    /// Frames per stack L.
    pub frames: usize,
    /// Latent width d.
    pub latent: usize,
    /// FFN hidden width (4d by default).
    pub d_ff: usize,
    /// Number of Transformer blocks.
    pub n_blocks: usize,
    /// Random-crop extent fed to the encoder (must be ≤ arena.img).
    pub crop: usize,
    /// Query and key branches crop independently unless set.
    pub shared_crop: bool,
    /// Sequences per optimization step.
    pub batch: usize,
    pub steps: u64,
    pub lr_encoder: LrSchedule,
    pub lr_projection: LrSchedule,
    pub lr_transformer: LrSchedule,
    /// Drop the projection head φ (ablation).
    pub use_projection: bool,
    /// Similarity for the contrastive logits.
    pub similarity: Similarity,
    /// CSV row cadence.
    pub log_every: u64,
    /// Drift/retrieval evaluation (and checkpoint-series) cadence.
    pub eval_every: u64,
    /// Sequences per periodic evaluation.
    pub eval_batch: usize,
    /// Stop once a periodic evaluation reaches this retrieval accuracy.
    pub early_stop_acc: Option<f64>,
}

impl Default for UpstreamConfig {
    fn default() -> Self {
        UpstreamConfig {
            mask_prob: 0.5,
            temperature: 0.07,
            momentum: 0.05,
            seq_len: 8,
            frames: 3,
            latent: 64,
            d_ff: 256,
            n_blocks: 2,
            crop: 56,
            shared_crop: false,
            batch: 8,
            steps: 20_000,
            lr_encoder: LrSchedule::Constant { lr: 1e-3 },
            lr_projection: LrSchedule::Constant { lr: 1e-3 },
            lr_transformer: LrSchedule::WarmupInvSqrt { peak: 2e-3, warmup: 6000 },
            use_projection: true,
            similarity: Similarity::Cosine,
            log_every: 50,
            eval_every: 1000,
            eval_batch: 32,
            early_stop_acc: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    Cosine,
    /// Learnable bilinear `qᵀ W k` (CURL-style parity option).
    Bilinear,
}

/// PPO hyperparameters shared by the oracle and student trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    /// Clipping parameter ε.
    pub clip: f64,
    /// GAE λ.
    pub gae_lambda: f64,
    /// Discount γ.
    pub gamma: f64,
    /// Rollout segment length per environment between updates.
    pub horizon: usize,
    /// Parallel environment instances.
    pub n_envs: usize,
    /// Transitions per update (= n_envs × horizon).
    pub buffer: usize,
    /// Minibatch size within an epoch.
    pub minibatch: usize,
    /// Optimization epochs per update.
    pub epochs: usize,
    /// Value-loss coefficient (1.0 = the loss as written).
    pub value_coef: f64,
    /// Normalize advantages to zero mean / unit std per update.
    pub adv_norm: bool,
    pub lr: LrSchedule,
    /// Environment-step budget for one training run.
    pub total_steps: u64,
    /// Deterministic evaluation cadence (env steps); 0 disables.
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Stop early once a deterministic evaluation reaches this success
    /// rate (percent).
    pub early_stop_sr: Option<f64>,
    /// KL estimator between teacher and student policies.
    pub kl_estimator: KlEstimator,
    /// Samples for the Monte Carlo estimator.
    pub kl_mc_samples: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            clip: 0.2,
            gae_lambda: 0.95,
            gamma: 0.99,
            horizon: 128,
            n_envs: 80,
            buffer: 10_240,
            minibatch: 1024,
            epochs: 3,
            value_coef: 1.0,
            adv_norm: true,
            lr: LrSchedule::LinearDecay { initial: 3e-4, total_steps: 200_000 },
            total_steps: 200_000,
            eval_every: 25_000,
            eval_episodes: 100,
            early_stop_sr: None,
            kl_estimator: KlEstimator::Closed,
            kl_mc_samples: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlEstimator {
    Closed,
    MonteCarlo,
}

/// Annealing of the oracle-guidance coefficient α.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecayConfig {
    pub kind: DecayKind,
    /// Initial coefficient α₀.
    pub alpha0: f64,
    /// Steps over which the linear schedule reaches exactly zero.
    pub horizon: u64,
    /// Multiplier of the exponential schedule.
    pub exp_factor: f64,
    /// Step interval of the exponential schedule.
    pub exp_every: u64,
    /// Fixed scaling constant β on the KL term.
    pub beta: f64,
}

impl Default for DecayConfig {
    fn default() -> Self {
        DecayConfig {
            kind: DecayKind::Linear,
            alpha0: 0.95,
            horizon: 10_000,
            exp_factor: 0.95,
            exp_every: 1000,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayKind {
    Linear,
    Exponential,
    Fixed,
}

/// Final evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Oracle-success threshold ε.
    pub epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 200, epsilon: 0.5 }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the canonical TOML form, hex-encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        hex_encode(&h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        self.arena.validate()?;
        let u = &self.upstream;
        if !(0.0..=1.0).contains(&u.mask_prob) {
            return Err(Error::config("upstream.mask_prob must lie in [0, 1]"));
        }
        if u.temperature <= 0.0 {
            return Err(Error::config("upstream.temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&u.momentum) {
            return Err(Error::config("upstream.momentum must lie in [0, 1]"));
        }
        if u.seq_len == 0 || u.frames == 0 || u.batch == 0 {
            return Err(Error::config("upstream sizes must be positive"));
        }
        if u.latent % 2 != 0 {
            return Err(Error::config("upstream.latent must be even (positional encoding)"));
        }
        if u.crop > self.arena.img {
            return Err(Error::config(format!(
                "upstream.crop ({}) exceeds arena.img ({})",
                u.crop, self.arena.img
            )));
        }
        if u.crop < 7 {
            return Err(Error::config("upstream.crop must be at least 7"));
        }
        let r = &self.rl;
        if r.clip <= 0.0 {
            return Err(Error::config("rl.clip must be positive"));
        }
        if !(0.0 < r.gae_lambda && r.gae_lambda <= 1.0) {
            return Err(Error::config("rl.gae_lambda must lie in (0, 1]"));
        }
        if !(0.0 < r.gamma && r.gamma <= 1.0) {
            return Err(Error::config("rl.gamma must lie in (0, 1]"));
        }
        if r.buffer != r.n_envs * r.horizon {
            return Err(Error::config(format!(
                "rl.buffer ({}) must equal n_envs × horizon ({} × {})",
                r.buffer, r.n_envs, r.horizon
            )));
        }
        if r.buffer % r.minibatch != 0 {
            return Err(Error::config(format!(
                "rl.buffer ({}) must be a multiple of rl.minibatch ({})",
                r.buffer, r.minibatch
            )));
        }
        if r.epochs == 0 {
            return Err(Error::config("rl.epochs must be positive"));
        }
        let d = &self.decay;
        if !(0.0..=1.0).contains(&d.alpha0) {
            return Err(Error::config("decay.alpha0 must lie in [0, 1]"));
        }
        if d.horizon == 0 || d.exp_every == 0 {
            return Err(Error::config("decay horizons must be positive"));
        }
        if !(0.0..1.0).contains(&d.exp_factor) {
            return Err(Error::config("decay.exp_factor must lie in [0, 1)"));
        }
        if d.beta < 0.0 {
            return Err(Error::config("decay.beta must be non-negative"));
        }
        if self.eval.episodes == 0 {
            return Err(Error::config("eval.episodes must be positive"));
        }
        if self.eval.epsilon <= 0.0 {
            return Err(Error::config("eval.epsilon must be positive"));
        }
        if self.corpus.episodes == 0 {
            return Err(Error::config("corpus.episodes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.corpus.scripted_fraction) {
            return Err(Error::config("corpus.scripted_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over raw bytes, hex-encoded (parameter-blob hashing).
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_encode(&h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let text = "[upstream]\nmasc_prob = 0.5\n";
        let err = RunConfig::from_toml(text).unwrap_err().to_string();
        assert!(err.contains("masc_prob"), "{err}");
    }

    #[test]
    fn out_of_range_values_rejected() {
        let mut cfg = RunConfig::default();
        cfg.upstream.mask_prob = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.rl.buffer = 1000; // != n_envs × horizon
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.upstream.crop = 100; // > arena.img = 64
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn paper_defaults_in_place() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.upstream.mask_prob, 0.5);
        assert_eq!(cfg.upstream.temperature, 0.07);
        assert_eq!(cfg.upstream.momentum, 0.05);
        assert_eq!(cfg.rl.clip, 0.2);
        assert_eq!(cfg.rl.gae_lambda, 0.95);
        assert_eq!(cfg.rl.buffer, 10_240);
        assert_eq!(cfg.rl.minibatch, 1024);
        assert_eq!(cfg.rl.epochs, 3);
        assert_eq!(cfg.rl.horizon, 128);
        assert_eq!(cfg.decay.alpha0, 0.95);
        assert_eq!(cfg.decay.horizon, 10_000);
        assert_eq!(cfg.decay.beta, 1.0);
        assert_eq!(cfg.arena.h_max, 5000);
        assert_eq!(cfg.eval.episodes, 200);
        assert_eq!(cfg.eval.epsilon, 0.5);
    }

    #[test]
    fn hash_changes_with_any_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
