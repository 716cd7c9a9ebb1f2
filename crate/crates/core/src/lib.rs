//! Two-stage visuomotor policy learning at desk scale.
//!
//! The pipeline has an upstream and a downstream stage. Upstream, a CNN
//! encoder plus projection head is pretrained with masked contrastive
//! learning over frame sequences: a Transformer reconstructs corrupted
//! latent tokens and an InfoNCE loss pulls the reconstructions toward
//! momentum-encoded clean keys. Downstream, the frozen encoder feeds a PPO
//! policy that is additionally supervised by a privileged oracle teacher
//! through an annealed KL term.
//!
//! Everything runs on a hand-rolled reverse-mode autodiff engine
//! ([`autodiff`]) and a built-in 2D raycast navigation simulator ([`sim`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod csvlog;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod rl;
pub mod rng;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
