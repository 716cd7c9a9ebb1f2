use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::nn::layers::{Linear, TapedLinear};
use crate::nn::ParamSet;
use rand::Rng;

/// Two-layer projection head: `W2 · ReLU(W1 z + b1) + b2`, no output
/// nonlinearity. Output width equals input width.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub l1: Linear,
    pub l2: Linear,
}

impl Projection {
    pub fn new(d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Projection {
            l1: Linear::new(d, hidden, 2.0_f64.sqrt(), rng),
            l2: Linear::new(hidden, d, 1.0, rng),
        }
    }

    pub fn on_tape(&self, tape: &Tape, prefix: &str, trainable: bool) -> TapedProjection {
        TapedProjection {
            l1: self.l1.on_tape(tape, &format!("{prefix}.l1"), trainable),
            l2: self.l2.on_tape(tape, &format!("{prefix}.l2"), trainable),
        }
    }

    pub fn forward_eval(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.leaf(z);
        Ok(self.on_tape(&tape, "proj", false).forward(&x)?.value())
    }
}

impl ParamSet for Projection {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("l1.w".into(), &self.l1.w),
            ("l1.b".into(), &self.l1.b),
            ("l2.w".into(), &self.l2.w),
            ("l2.b".into(), &self.l2.b),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("l1.w".into(), &mut self.l1.w),
            ("l1.b".into(), &mut self.l1.b),
            ("l2.w".into(), &mut self.l2.w),
            ("l2.b".into(), &mut self.l2.b),
        ]
    }
}

pub struct TapedProjection {
    pub l1: TapedLinear,
    pub l2: TapedLinear,
}

impl TapedProjection {
    /// `[B, d] -> [B, d]`
    pub fn forward(&self, z: &Var) -> Result<Var> {
        self.l2.forward(&self.l1.forward(z)?.relu())
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.l1.vars();
        v.extend(self.l2.vars());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng::{stream_rng, Stream};

    fn identity_projection(d: usize) -> Projection {
        let mut p = Projection::new(d, d, &mut stream_rng(0, Stream::Init, 0));
        let mut eye = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        p.l1.w = eye.clone();
        p.l1.b = Tensor::zeros(vec![d]);
        p.l2.w = eye;
        p.l2.b = Tensor::zeros(vec![d]);
        p
    }

    #[test]
    fn identity_weights_pass_nonnegative_input_through() {
        let p = identity_projection(4);
        let z = Tensor::new(vec![1, 4], vec![0.5, 0.0, 2.0, 1.0]).unwrap();
        let out = p.forward_eval(&z).unwrap();
        assert_eq!(out.data(), z.data());
    }

    #[test]
    fn identity_weights_relu_negative_entries() {
        let p = identity_projection(4);
        let z = Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, -0.25]).unwrap();
        let out = p.forward_eval(&z).unwrap();
        assert_eq!(out.data(), vec![0.5, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn gradient_check_through_projection() {
        let mut rng = stream_rng(4, Stream::Init, 0);
        let p = Projection::new(5, 5, &mut rng);
        let z = Tensor::randn(vec![2, 5], 1.0, &mut rng);
        let r = gradcheck::check(&[z, p.l1.w.clone(), p.l2.w.clone()], |tape, ins| {
            let zv = tape.param("z", &ins[0]);
            let mut taped = p.on_tape(tape, "p", false);
            taped.l1.w = tape.param("l1w", &ins[1]);
            taped.l2.w = tape.param("l2w", &ins[2]);
            let loss = taped.forward(&zv).unwrap().tanh().mean();
            (loss, vec![zv, taped.l1.w.clone(), taped.l2.w.clone()])
        });
        assert!(r.ok(1e-5), "projection rel err {:.3e}", r.worst);
    }
}
