use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::nn::init::orthogonal;
use rand::Rng;

/// Fully connected layer. Weight stored `[in, out]` so a `[B, in]` batch
/// multiplies directly; orthogonal init acts on the `[out, in]` orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(input: usize, output: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let w_oi = orthogonal(output, input, gain, rng);
        let mut w = Tensor::zeros(vec![input, output]);
        for i in 0..input {
            for o in 0..output {
                w.data_mut()[i * output + o] = w_oi.data()[o * input + i];
            }
        }
        Linear { w, b: Tensor::zeros(vec![output]) }
    }

    pub fn on_tape(&self, tape: &Tape, prefix: &str, trainable: bool) -> TapedLinear {
        TapedLinear {
            w: register(tape, &format!("{prefix}.w"), &self.w, trainable),
            b: register(tape, &format!("{prefix}.b"), &self.b, trainable),
        }
    }
}

pub struct TapedLinear {
    pub w: Var,
    pub b: Var,
}

impl TapedLinear {
    /// `[B, in] -> [B, out]`
    pub fn forward(&self, x: &Var) -> Result<Var> {
        x.matmul(&self.w)?.add_row_broadcast(&self.b)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.w.clone(), self.b.clone()]
    }
}

/// Learnable layer-normalization affine (gain init 1, bias init 0).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        LayerNormParams {
            gain: Tensor::new(vec![dim], vec![1.0; dim]).expect("gain shape"),
            bias: Tensor::zeros(vec![dim]),
        }
    }

    pub fn on_tape(&self, tape: &Tape, prefix: &str, trainable: bool) -> TapedLayerNorm {
        TapedLayerNorm {
            gain: register(tape, &format!("{prefix}.gain"), &self.gain, trainable),
            bias: register(tape, &format!("{prefix}.bias"), &self.bias, trainable),
        }
    }
}

pub struct TapedLayerNorm {
    pub gain: Var,
    pub bias: Var,
}

impl TapedLayerNorm {
    pub fn forward(&self, x: &Var) -> Result<Var> {
        x.layer_norm(&self.gain, &self.bias)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.gain.clone(), self.bias.clone()]
    }
}

pub(crate) fn register(tape: &Tape, name: &str, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(name, t)
    } else {
        tape.leaf(t)
    }
}
