use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::init::orthogonal;
use crate::nn::layers::{register, LayerNormParams, Linear, TapedLayerNorm, TapedLinear};
use crate::nn::ParamSet;
use rand::Rng;

const CONV_CHANNELS: usize = 32;
const KERNEL: usize = 3;

/// Convolutional frame-stack encoder.
///
/// Two 3x3 convolutions with 32 output channels (stride 2 then stride 1),
/// each followed by ReLU, then flatten, a fully connected layer, layer
/// normalization and tanh into a bounded `d`-dimensional latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub fc: Linear,
    pub norm: LayerNormParams,
    pub in_channels: usize,
    pub img: usize,
    pub d: usize,
}

impl Encoder {
    /// `img` is the spatial extent of the (square) input after cropping.
    pub fn new(in_channels: usize, img: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        if img < 7 {
            return Err(Error::shape(format!(
                "encoder: input {img}x{img} smaller than the 7x7 receptive footprint"
            )));
        }
        let gain = 2.0_f64.sqrt();
        let conv1_w = orthogonal(CONV_CHANNELS, in_channels * KERNEL * KERNEL, gain, rng)
            .into_data();
        let conv1_w =
            Tensor::new(vec![CONV_CHANNELS, in_channels, KERNEL, KERNEL], conv1_w)?;
        let conv2_w = orthogonal(CONV_CHANNELS, CONV_CHANNELS * KERNEL * KERNEL, gain, rng)
            .into_data();
        let conv2_w =
            Tensor::new(vec![CONV_CHANNELS, CONV_CHANNELS, KERNEL, KERNEL], conv2_w)?;
        let flat = CONV_CHANNELS * Self::spatial_out(img) * Self::spatial_out(img);
        Ok(Encoder {
            conv1_w,
            conv1_b: Tensor::zeros(vec![CONV_CHANNELS]),
            conv2_w,
            conv2_b: Tensor::zeros(vec![CONV_CHANNELS]),
            fc: Linear::new(flat, d, gain, rng),
            norm: LayerNormParams::new(d),
            in_channels,
            img,
            d,
        })
    }

    fn spatial_out(img: usize) -> usize {
        let after1 = (img - KERNEL) / 2 + 1;
        after1 - KERNEL + 1
    }

    pub fn on_tape(&self, tape: &Tape, prefix: &str, trainable: bool) -> TapedEncoder {
        TapedEncoder {
            conv1_w: register(tape, &format!("{prefix}.conv1.w"), &self.conv1_w, trainable),
            conv1_b: register(tape, &format!("{prefix}.conv1.b"), &self.conv1_b, trainable),
            conv2_w: register(tape, &format!("{prefix}.conv2.w"), &self.conv2_w, trainable),
            conv2_b: register(tape, &format!("{prefix}.conv2.b"), &self.conv2_b, trainable),
            fc: self.fc.on_tape(tape, &format!("{prefix}.fc"), trainable),
            norm: self.norm.on_tape(tape, &format!("{prefix}.norm"), trainable),
            in_channels: self.in_channels,
            img: self.img,
            d: self.d,
        }
    }

    /// Convenience forward on a throwaway tape (rollouts, key branches).
    pub fn forward_eval(&self, stacks: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.leaf(stacks);
        Ok(self.on_tape(&tape, "enc", false).forward(&x)?.value())
    }
}

impl ParamSet for Encoder {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("conv1.w".into(), &self.conv1_w),
            ("conv1.b".into(), &self.conv1_b),
            ("conv2.w".into(), &self.conv2_w),
            ("conv2.b".into(), &self.conv2_b),
            ("fc.w".into(), &self.fc.w),
            ("fc.b".into(), &self.fc.b),
            ("norm.gain".into(), &self.norm.gain),
            ("norm.bias".into(), &self.norm.bias),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("conv1.w".into(), &mut self.conv1_w),
            ("conv1.b".into(), &mut self.conv1_b),
            ("conv2.w".into(), &mut self.conv2_w),
            ("conv2.b".into(), &mut self.conv2_b),
            ("fc.w".into(), &mut self.fc.w),
            ("fc.b".into(), &mut self.fc.b),
            ("norm.gain".into(), &mut self.norm.gain),
            ("norm.bias".into(), &mut self.norm.bias),
        ]
    }
}

pub struct TapedEncoder {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub fc: TapedLinear,
    pub norm: TapedLayerNorm,
    in_channels: usize,
    img: usize,
    d: usize,
}

impl TapedEncoder {
    /// `[B, C, img, img] -> [B, d]` (a single `[C, img, img]` stack is
    /// treated as a batch of one).
    pub fn forward(&self, x: &Var) -> Result<Var> {
        let shape = x.shape();
        let (batch, c, h, w) = match shape.len() {
            3 => (1, shape[0], shape[1], shape[2]),
            4 => (shape[0], shape[1], shape[2], shape[3]),
            _ => return Err(Error::shape(format!("encoder input {shape:?}"))),
        };
        if c != self.in_channels || h != self.img || w != self.img {
            return Err(Error::shape(format!(
                "encoder expects [{}, {}, {}], got {shape:?}",
                self.in_channels, self.img, self.img
            )));
        }
        let x = if shape.len() == 3 {
            x.reshape(vec![1, c, h, w])?
        } else {
            x.clone()
        };
        let h1 = x.conv2d(&self.conv1_w, 2)?.add_channel_bias(&self.conv1_b)?.relu();
        let h2 = h1.conv2d(&self.conv2_w, 1)?.add_channel_bias(&self.conv2_b)?.relu();
        let flat = h2.reshape(vec![batch, h2.numel() / batch])?;
        let z = self.fc.forward(&flat)?;
        Ok(self.norm.forward(&z)?.tanh())
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![
            self.conv1_w.clone(),
            self.conv1_b.clone(),
            self.conv2_w.clone(),
            self.conv2_b.clone(),
        ];
        v.extend(self.fc.vars());
        v.extend(self.norm.vars());
        v
    }

    pub fn latent_dim(&self) -> usize {
        self.d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn encoder(seed: u64) -> Encoder {
        Encoder::new(9, 16, 8, &mut stream_rng(seed, Stream::Init, 0)).unwrap()
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_latent() {
        let enc = encoder(0);
        let x = Tensor::zeros(vec![9, 16, 16]);
        let z = enc.forward_eval(&x).unwrap();
        // Conv and fc biases are zero-initialized, so the latent is
        // tanh(layernorm-affine of zeros) = tanh(bias) = 0.
        for v in z.data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn output_dimension_matches_configuration() {
        let enc = encoder(0);
        let x = Tensor::zeros(vec![2, 9, 16, 16]);
        let z = enc.forward_eval(&x).unwrap();
        assert_eq!(z.shape(), &[2, 8]);
    }

    #[test]
    fn output_strictly_inside_unit_interval() {
        let mut rng = stream_rng(3, Stream::Init, 1);
        let enc = encoder(3);
        let x = Tensor::randn(vec![9, 16, 16], 0.5, &mut rng);
        let z = enc.forward_eval(&x).unwrap();
        for v in z.data() {
            assert!(*v > -1.0 && *v < 1.0);
        }
    }

    #[test]
    fn seed_controls_determinism() {
        let x = Tensor::randn(vec![9, 16, 16], 0.3, &mut stream_rng(9, Stream::Init, 2));
        let a = encoder(1).forward_eval(&x).unwrap();
        let b = encoder(1).forward_eval(&x).unwrap();
        let c = encoder(2).forward_eval(&x).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn image_below_receptive_field_rejected() {
        let err = Encoder::new(3, 5, 8, &mut stream_rng(0, Stream::Init, 0));
        assert!(err.is_err());
    }
}
