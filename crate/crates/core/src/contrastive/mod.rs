//! Upstream stage: offline corpus collection, Bernoulli masking with
//! 80/10/10 corruption, masked InfoNCE over Transformer-reconstructed
//! tokens, momentum key updates, and the pretraining loop.

mod corpus;
mod loss;
mod mask;
mod pretrain;

pub use corpus::{collect_corpus, Episode, PolicyKind, SequenceCorpus, StackRef};
pub use loss::{
    infonce_from_logits, masked_infonce, representation_drift, retrieval_accuracy,
    ContrastiveBatch,
};
pub use mask::{corrupt, sample_mask, CorruptionKind, MaskedSequence};
pub use pretrain::{center_crop, PretrainMode, Pretrainer, StepLog, UpstreamNets};
