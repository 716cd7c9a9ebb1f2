use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{LayerNormParams, Linear, TapedLayerNorm, TapedLinear};
use crate::nn::ParamSet;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const ACTION_DIM: usize = 3;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HIDDEN: usize = 256;
const LN_2PI: f64 = 1.837877066409345483560659472811; // ln(2π)

/// Diagonal Gaussian over the 3-D control `(v_x, v_y, ω_z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianAction {
    pub mean: [f64; ACTION_DIM],
    pub log_std: [f64; ACTION_DIM],
}

impl GaussianAction {
    pub fn sample(&self, rng: &mut impl Rng) -> [f64; ACTION_DIM] {
        let mut a = [0.0; ACTION_DIM];
        for i in 0..ACTION_DIM {
            let z: f64 = StandardNormal.sample(rng);
            a[i] = self.mean[i] + z * self.log_std[i].exp();
        }
        a
    }

    /// Log density of `a` (pre-clamp action).
    pub fn log_prob(&self, a: &[f64; ACTION_DIM]) -> f64 {
        let mut lp = 0.0;
        for i in 0..ACTION_DIM {
            let std = self.log_std[i].exp();
            let t = (a[i] - self.mean[i]) / std;
            lp += -0.5 * t * t - self.log_std[i] - 0.5 * LN_2PI;
        }
        lp
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| 0.5 * (LN_2PI + 1.0) + ls).sum()
    }
}

/// Actor-critic over a flat observation vector: separate two-layer stacks of
/// 256 ReLU units with layer-normalized inputs. The actor emits 3 means plus
/// a state-independent log-std vector; the critic emits a scalar value.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub obs_dim: usize,
    pub a_norm: LayerNormParams,
    pub a1: Linear,
    pub a2: Linear,
    pub a_mean: Linear,
    pub log_std: Tensor,
    pub c_norm: LayerNormParams,
    pub c1: Linear,
    pub c2: Linear,
    pub c_val: Linear,
}

impl PolicyNet {
    pub fn new(obs_dim: usize, rng: &mut impl Rng) -> Self {
        let g = 2.0_f64.sqrt();
        PolicyNet {
            obs_dim,
            a_norm: LayerNormParams::new(obs_dim),
            a1: Linear::new(obs_dim, HIDDEN, g, rng),
            a2: Linear::new(HIDDEN, HIDDEN, g, rng),
            a_mean: Linear::new(HIDDEN, ACTION_DIM, 0.01, rng),
            log_std: Tensor::zeros(vec![ACTION_DIM]),
            c_norm: LayerNormParams::new(obs_dim),
            c1: Linear::new(obs_dim, HIDDEN, g, rng),
            c2: Linear::new(HIDDEN, HIDDEN, g, rng),
            c_val: Linear::new(HIDDEN, 1, 1.0, rng),
        }
    }

    pub fn on_tape(&self, tape: &Tape, prefix: &str, trainable: bool) -> TapedPolicy {
        TapedPolicy {
            a_norm: self.a_norm.on_tape(tape, &format!("{prefix}.a_norm"), trainable),
            a1: self.a1.on_tape(tape, &format!("{prefix}.a1"), trainable),
            a2: self.a2.on_tape(tape, &format!("{prefix}.a2"), trainable),
            a_mean: self.a_mean.on_tape(tape, &format!("{prefix}.a_mean"), trainable),
            log_std: super::layers::register(
                tape,
                &format!("{prefix}.log_std"),
                &self.log_std,
                trainable,
            ),
            c_norm: self.c_norm.on_tape(tape, &format!("{prefix}.c_norm"), trainable),
            c1: self.c1.on_tape(tape, &format!("{prefix}.c1"), trainable),
            c2: self.c2.on_tape(tape, &format!("{prefix}.c2"), trainable),
            c_val: self.c_val.on_tape(tape, &format!("{prefix}.c_val"), trainable),
        }
    }

    /// Clamp the free log-std parameter back into its invariant range.
    /// Called after each optimizer step.
    pub fn project_log_std(&mut self) {
        for v in self.log_std.data_mut() {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    /// Batched evaluation forward pass on a throwaway tape.
    pub fn forward_eval(&self, obs: &Tensor) -> Result<PolicyOutput> {
        let tape = Tape::new();
        let x = tape.leaf(obs);
        let taped = self.on_tape(&tape, "pi", false);
        let (mean, log_std) = taped.actor(&x)?;
        let value = taped.critic(&x)?;
        let mean = mean.value();
        let log_std = log_std.data();
        let values = value.data();
        if !mean.is_finite() || log_std.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("policy forward produced non-finite parameters"));
        }
        let batch = mean.shape()[0];
        let mut actions = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut m = [0.0; ACTION_DIM];
            let mut ls = [0.0; ACTION_DIM];
            for i in 0..ACTION_DIM {
                m[i] = mean.data()[b * ACTION_DIM + i];
                ls[i] = log_std[i];
            }
            actions.push(GaussianAction { mean: m, log_std: ls });
        }
        Ok(PolicyOutput { dists: actions, values })
    }
}

/// Batched policy evaluation: one Gaussian and one value per batch row.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub dists: Vec<GaussianAction>,
    pub values: Vec<f64>,
}

impl ParamSet for PolicyNet {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("a_norm.gain".into(), &self.a_norm.gain),
            ("a_norm.bias".into(), &self.a_norm.bias),
            ("a1.w".into(), &self.a1.w),
            ("a1.b".into(), &self.a1.b),
            ("a2.w".into(), &self.a2.w),
            ("a2.b".into(), &self.a2.b),
            ("a_mean.w".into(), &self.a_mean.w),
            ("a_mean.b".into(), &self.a_mean.b),
            ("log_std".into(), &self.log_std),
            ("c_norm.gain".into(), &self.c_norm.gain),
            ("c_norm.bias".into(), &self.c_norm.bias),
            ("c1.w".into(), &self.c1.w),
            ("c1.b".into(), &self.c1.b),
            ("c2.w".into(), &self.c2.w),
            ("c2.b".into(), &self.c2.b),
            ("c_val.w".into(), &self.c_val.w),
            ("c_val.b".into(), &self.c_val.b),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("a_norm.gain".into(), &mut self.a_norm.gain),
            ("a_norm.bias".into(), &mut self.a_norm.bias),
            ("a1.w".into(), &mut self.a1.w),
            ("a1.b".into(), &mut self.a1.b),
            ("a2.w".into(), &mut self.a2.w),
            ("a2.b".into(), &mut self.a2.b),
            ("a_mean.w".into(), &mut self.a_mean.w),
            ("a_mean.b".into(), &mut self.a_mean.b),
            ("log_std".into(), &mut self.log_std),
            ("c_norm.gain".into(), &mut self.c_norm.gain),
            ("c_norm.bias".into(), &mut self.c_norm.bias),
            ("c1.w".into(), &mut self.c1.w),
            ("c1.b".into(), &mut self.c1.b),
            ("c2.w".into(), &mut self.c2.w),
            ("c2.b".into(), &mut self.c2.b),
            ("c_val.w".into(), &mut self.c_val.w),
            ("c_val.b".into(), &mut self.c_val.b),
        ]
    }
}

pub struct TapedPolicy {
    pub a_norm: TapedLayerNorm,
    pub a1: TapedLinear,
    pub a2: TapedLinear,
    pub a_mean: TapedLinear,
    pub log_std: Var,
    pub c_norm: TapedLayerNorm,
    pub c1: TapedLinear,
    pub c2: TapedLinear,
    pub c_val: TapedLinear,
}

impl TapedPolicy {
    /// `[B, obs] -> (mean [B, 3], log_std [3])`
    pub fn actor(&self, obs: &Var) -> Result<(Var, Var)> {
        let h = self.a_norm.forward(obs)?;
        let h = self.a1.forward(&h)?.relu();
        let h = self.a2.forward(&h)?.relu();
        Ok((self.a_mean.forward(&h)?, self.log_std.clone()))
    }

    /// `[B, obs] -> [B]`
    pub fn critic(&self, obs: &Var) -> Result<Var> {
        let h = self.c_norm.forward(obs)?;
        let h = self.c1.forward(&h)?.relu();
        let h = self.c2.forward(&h)?.relu();
        let v = self.c_val.forward(&h)?;
        let batch = v.shape()[0];
        v.reshape(vec![batch])
    }

    /// Differentiable log-density of stored actions under the current actor:
    /// `actions` is a constant `[B, 3]` leaf.
    pub fn log_prob(&self, mean: &Var, log_std: &Var, actions: &Var) -> Result<Var> {
        let batch = mean.shape()[0];
        let ls = log_std.broadcast_rows(batch)?;
        let std = ls.exp();
        let t = actions.sub(mean)?.div(&std)?;
        let per_dim = t
            .square()
            .mul_scalar(-0.5)
            .sub(&ls)?
            .add_scalar(-0.5 * LN_2PI);
        per_dim.row_sum()
    }

    pub fn actor_vars(&self) -> Vec<Var> {
        let mut v = self.a_norm.vars();
        v.extend(self.a1.vars());
        v.extend(self.a2.vars());
        v.extend(self.a_mean.vars());
        v.push(self.log_std.clone());
        v
    }

    pub fn critic_vars(&self) -> Vec<Var> {
        let mut v = self.c_norm.vars();
        v.extend(self.c1.vars());
        v.extend(self.c2.vars());
        v.extend(self.c_val.vars());
        v
    }

    /// All vars in `ParamSet::named` order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.actor_vars();
        v.extend(self.critic_vars());
        v
    }
}
