use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are positional: the parameter
/// list passed to [`Adam::step`] must keep the same order and shapes for the
/// optimizer's lifetime.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(param_sizes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &[(String, &Tensor)]) -> Self {
        Adam::new(&params.iter().map(|(_, t)| t.numel()).collect::<Vec<_>>())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over aligned `(params, grads)`. Gradients are consumed;
    /// the caller's next step starts from freshly accumulated ones.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam: {} params / {} grads vs {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(Error::shape(format!(
                    "adam: {name} has {} values but gradient has {}",
                    p.numel(),
                    g.len()
                )));
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("adam: non-finite gradient {bad} in {name}")));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = &grads[i];
            for (j, pv) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
