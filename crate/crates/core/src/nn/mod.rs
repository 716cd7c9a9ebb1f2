//! Network components: CNN encoder, projection head, Transformer blocks,
//! Gaussian actor-critic policies, Adam, and learning-rate schedules.

mod adam;
mod encoder;
mod init;
mod layers;
mod policy;
mod projection;
mod schedule;
mod transformer;

pub use adam::Adam;
pub use encoder::{Encoder, TapedEncoder};
pub use init::orthogonal;
pub use layers::{LayerNormParams, Linear, TapedLayerNorm, TapedLinear};
pub use policy::{GaussianAction, PolicyNet, PolicyOutput, TapedPolicy, LOG_STD_MAX, LOG_STD_MIN};
pub use projection::{Projection, TapedProjection};
pub use schedule::LrSchedule;
pub use transformer::{positional_encoding, TapedTransformer, Transformer, TransformerBlock};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Named views over a network's parameter tensors, in a stable order.
///
/// The order is the contract: optimizers, checkpoints, and momentum updates
/// all zip over it.
pub trait ParamSet {
    fn named(&self) -> Vec<(String, &Tensor)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)>;
}

/// `key ← m · query + (1 − m) · key`, elementwise over aligned parameter
/// sets. The query side is read-only (stop-gradient by construction).
pub fn momentum_update<Q: ParamSet, K: ParamSet>(query: &Q, key: &mut K, m: f64) -> Result<()> {
    let q = query.named();
    let mut k = key.named_mut();
    if q.len() != k.len() {
        return Err(Error::shape(format!(
            "momentum_update: {} query tensors vs {} key tensors",
            q.len(),
            k.len()
        )));
    }
    for ((qn, qt), (kn, kt)) in q.iter().zip(k.iter_mut()) {
        if qt.shape() != kt.shape() {
            return Err(Error::shape(format!(
                "momentum_update: {qn} {:?} vs {kn} {:?}",
                qt.shape(),
                kt.shape()
            )));
        }
        for (kv, &qv) in kt.data_mut().iter_mut().zip(qt.data()) {
            *kv = m * qv + (1.0 - m) * *kv;
        }
    }
    Ok(())
}
