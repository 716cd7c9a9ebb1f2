use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::init::orthogonal;
use crate::nn::layers::{register, LayerNormParams, Linear, TapedLayerNorm, TapedLinear};
use crate::nn::ParamSet;
use rand::Rng;

/// One encoder block: single-head self-attention and a two-layer ReLU FFN,
/// each behind a pre-norm residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub norm1: LayerNormParams,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub norm2: LayerNormParams,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

impl TransformerBlock {
    pub fn new(d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        TransformerBlock {
            norm1: LayerNormParams::new(d),
            wq: orthogonal(d, d, 1.0, rng),
            wk: orthogonal(d, d, 1.0, rng),
            wv: orthogonal(d, d, 1.0, rng),
            norm2: LayerNormParams::new(d),
            ffn1: Linear::new(d, d_ff, 2.0_f64.sqrt(), rng),
            ffn2: Linear::new(d_ff, d, 1.0, rng),
        }
    }
}

/// Encoder-only Transformer over projected latent tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub blocks: Vec<TransformerBlock>,
    pub d: usize,
}

impl Transformer {
    pub fn new(n_blocks: usize, d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        let blocks = (0..n_blocks).map(|_| TransformerBlock::new(d, d_ff, rng)).collect();
        Transformer { blocks, d }
    }

    pub fn on_tape(&self, tape: &Tape, prefix: &str, trainable: bool) -> TapedTransformer {
        TapedTransformer {
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| TapedBlock {
                    norm1: b.norm1.on_tape(tape, &format!("{prefix}.b{i}.norm1"), trainable),
                    wq: register(tape, &format!("{prefix}.b{i}.wq"), &b.wq, trainable),
                    wk: register(tape, &format!("{prefix}.b{i}.wk"), &b.wk, trainable),
                    wv: register(tape, &format!("{prefix}.b{i}.wv"), &b.wv, trainable),
                    norm2: b.norm2.on_tape(tape, &format!("{prefix}.b{i}.norm2"), trainable),
                    ffn1: b.ffn1.on_tape(tape, &format!("{prefix}.b{i}.ffn1"), trainable),
                    ffn2: b.ffn2.on_tape(tape, &format!("{prefix}.b{i}.ffn2"), trainable),
                })
                .collect(),
            d: self.d,
        }
    }
}

impl ParamSet for Transformer {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("b{i}.norm1.gain"), &b.norm1.gain));
            out.push((format!("b{i}.norm1.bias"), &b.norm1.bias));
            out.push((format!("b{i}.wq"), &b.wq));
            out.push((format!("b{i}.wk"), &b.wk));
            out.push((format!("b{i}.wv"), &b.wv));
            out.push((format!("b{i}.norm2.gain"), &b.norm2.gain));
            out.push((format!("b{i}.norm2.bias"), &b.norm2.bias));
            out.push((format!("b{i}.ffn1.w"), &b.ffn1.w));
            out.push((format!("b{i}.ffn1.b"), &b.ffn1.b));
            out.push((format!("b{i}.ffn2.w"), &b.ffn2.w));
            out.push((format!("b{i}.ffn2.b"), &b.ffn2.b));
        }
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("b{i}.norm1.gain"), &mut b.norm1.gain));
            out.push((format!("b{i}.norm1.bias"), &mut b.norm1.bias));
            out.push((format!("b{i}.wq"), &mut b.wq));
            out.push((format!("b{i}.wk"), &mut b.wk));
            out.push((format!("b{i}.wv"), &mut b.wv));
            out.push((format!("b{i}.norm2.gain"), &mut b.norm2.gain));
            out.push((format!("b{i}.norm2.bias"), &mut b.norm2.bias));
            out.push((format!("b{i}.ffn1.w"), &mut b.ffn1.w));
            out.push((format!("b{i}.ffn1.b"), &mut b.ffn1.b));
            out.push((format!("b{i}.ffn2.w"), &mut b.ffn2.w));
            out.push((format!("b{i}.ffn2.b"), &mut b.ffn2.b));
        }
        out
    }
}

pub struct TapedBlock {
    pub norm1: TapedLayerNorm,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub norm2: TapedLayerNorm,
    pub ffn1: TapedLinear,
    pub ffn2: TapedLinear,
}

impl TapedBlock {
    /// Self-attention sub-layer: returns `(x + Attn(norm(x)), α)` where the
    /// attention weights α are softmax rows over all positions (no mask).
    pub fn attention(&self, x: &Var) -> Result<(Var, Var)> {
        let d = x.shape()[1];
        let h = self.norm1.forward(x)?;
        let q = h.matmul(&self.wq)?;
        let k = h.matmul(&self.wk)?;
        let v = h.matmul(&self.wv)?;
        let scores = q.matmul_tb(&k)?.mul_scalar(1.0 / (d as f64).sqrt());
        let alpha = scores.softmax()?;
        let attn = alpha.matmul(&v)?;
        Ok((x.add(&attn)?, alpha))
    }

    /// FFN sub-layer: `x + W2·ReLU(W1·norm(x) + b1) + b2` per token.
    pub fn ffn(&self, x: &Var) -> Result<Var> {
        let h = self.norm2.forward(x)?;
        let f = self.ffn2.forward(&self.ffn1.forward(&h)?.relu())?;
        x.add(&f)
    }

    pub fn forward(&self, x: &Var) -> Result<(Var, Var)> {
        let (after_attn, alpha) = self.attention(x)?;
        Ok((self.ffn(&after_attn)?, alpha))
    }
}

pub struct TapedTransformer {
    pub blocks: Vec<TapedBlock>,
    d: usize,
}

impl TapedTransformer {
    /// `[T, d] -> [T, d]`; also returns the per-block attention weights.
    pub fn forward(&self, tokens: &Var) -> Result<(Var, Vec<Var>)> {
        let shape = tokens.shape();
        if shape.len() != 2 || shape[1] != self.d {
            return Err(Error::shape(format!(
                "transformer expects [T, {}], got {shape:?}",
                self.d
            )));
        }
        let mut x = tokens.clone();
        let mut alphas = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, alpha) = b.forward(&x)?;
            x = next;
            alphas.push(alpha);
        }
        Ok((x, alphas))
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.norm1.vars());
            out.push(b.wq.clone());
            out.push(b.wk.clone());
            out.push(b.wv.clone());
            out.extend(b.norm2.vars());
            out.extend(b.ffn1.vars());
            out.extend(b.ffn2.vars());
        }
        out
    }
}

/// Sinusoidal positional encodings:
/// `p[i, 2k] = sin(i / 10000^(2k/d))`, `p[i, 2k+1] = cos(i / 10000^(2k/d))`.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::config(format!("positional encoding needs even d, got {d}")));
    }
    let mut data = vec![0.0; len * d];
    for i in 0..len {
        for k in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * k as f64 / d as f64);
            data[i * d + 2 * k] = (i as f64 * rate).sin();
            data[i * d + 2 * k + 1] = (i as f64 * rate).cos();
        }
    }
    Tensor::new(vec![len, d], data)
}
