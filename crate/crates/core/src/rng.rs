//! Deterministic RNG streams derived from one run seed.
//!
//! Every randomized component draws from its own ChaCha stream so that
//! adding or reordering consumers never perturbs the others. Identical
//! `(seed, stream, index)` always reproduces the identical sequence.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable identifiers for the independent RNG streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Network weight initialization.
    Init,
    /// Environment dynamics and spawn sampling; offset by instance index.
    Env,
    /// Action sampling during rollout collection.
    Policy,
    /// Bernoulli mask draws.
    Mask,
    /// Corruption kind and swap-source draws.
    Corrupt,
    /// Sequence/batch sampling from the corpus.
    Sample,
    /// Minibatch shuffling in PPO epochs.
    Shuffle,
    /// Evaluation episodes.
    Eval,
    /// Random crop offsets.
    Crop,
}

impl Stream {
    fn base(self) -> u64 {
        match self {
            Stream::Init => 0x10_00,
            Stream::Env => 0x20_00,
            Stream::Policy => 0x30_00,
            Stream::Mask => 0x40_00,
            Stream::Corrupt => 0x50_00,
            Stream::Sample => 0x60_00,
            Stream::Shuffle => 0x70_00,
            Stream::Eval => 0x80_00,
            Stream::Crop => 0x90_00,
        }
    }
}

/// RNG for `stream` with sub-index `index` (e.g. env instance number).
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.base() + index);
    rng
}
