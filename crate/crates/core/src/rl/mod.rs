//! PPO machinery shared by the oracle and student trainers: rollout
//! collection over an environment pool, generalized advantage estimation,
//! the clipped-surrogate-plus-value loss, and advantage normalization.

mod gae;
mod ppo;
mod rollout;

pub use gae::{advantage_normalize, compute_gae};
pub use ppo::{ppo_loss, PpoLoss};
pub use rollout::{collect_rollouts, Actor, RolloutStep, TrajectoryBatch};
