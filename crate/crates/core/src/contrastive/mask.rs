use crate::autodiff::Tensor;
use crate::contrastive::corpus::{SequenceCorpus, StackRef};
use crate::error::{Error, Result};
use log::warn;
use rand::Rng;

/// I.i.d. Bernoulli(ρ_m) mask over T positions.
pub fn sample_mask(t: usize, rho_m: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&rho_m) {
        return Err(Error::contract(format!("mask probability {rho_m} outside [0, 1]")));
    }
    Ok((0..t).map(|_| rng.gen::<f64>() < rho_m).collect())
}

/// How a masked position was corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    /// Replaced by an all-zero stack (80%).
    Zeroed,
    /// Substituted with another stack from the corpus (10%).
    Swapped(StackRef),
    /// Left as the original (10%).
    Kept,
}

/// A masked window: original stack references, the Bernoulli mask, and the
/// per-position corruption record. `h̄_i = M_i·h_i^m + (1−M_i)·h_i` holds by
/// construction: unmasked positions resolve to their originals.
#[derive(Debug, Clone)]
pub struct MaskedSequence {
    pub originals: Vec<StackRef>,
    pub mask: Vec<bool>,
    pub kinds: Vec<Option<CorruptionKind>>,
}

impl MaskedSequence {
    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Materialize the corrupted stack at position `i`.
    pub fn corrupted_stack(&self, corpus: &SequenceCorpus, i: usize) -> Tensor {
        match self.kinds[i] {
            None | Some(CorruptionKind::Kept) => corpus.stack(self.originals[i]),
            Some(CorruptionKind::Zeroed) => {
                Tensor::zeros(vec![3 * corpus.frames_l, corpus.img, corpus.img])
            }
            Some(CorruptionKind::Swapped(r)) => corpus.stack(r),
        }
    }

    /// Materialize the clean stack at position `i`.
    pub fn original_stack(&self, corpus: &SequenceCorpus, i: usize) -> Tensor {
        corpus.stack(self.originals[i])
    }
}

/// Apply the 80/10/10 zero/swap/keep corruption to the masked positions of
/// the window starting at `(episode, start)`.
pub fn corrupt(
    corpus: &SequenceCorpus,
    episode: usize,
    start: usize,
    seq_len: usize,
    mask: &[bool],
    rng: &mut impl Rng,
) -> Result<MaskedSequence> {
    if mask.len() != seq_len {
        return Err(Error::contract(format!(
            "mask length {} vs sequence length {seq_len}",
            mask.len()
        )));
    }
    let swappable = corpus.total_stacks() > 1;
    let originals: Vec<StackRef> =
        (0..seq_len).map(|i| StackRef { episode, t: start + i }).collect();
    let mut kinds = vec![None; seq_len];
    for (i, &masked) in mask.iter().enumerate() {
        if !masked {
            continue;
        }
        let u = rng.gen::<f64>();
        kinds[i] = Some(if u < 0.8 {
            CorruptionKind::Zeroed
        } else if u < 0.9 {
            if swappable {
                CorruptionKind::Swapped(draw_other(corpus, originals[i], rng))
            } else {
                warn!("corpus too small for swap corruption; falling back to zeroing");
                CorruptionKind::Zeroed
            }
        } else {
            CorruptionKind::Kept
        });
    }
    Ok(MaskedSequence { originals, mask: mask.to_vec(), kinds })
}

fn draw_other(corpus: &SequenceCorpus, own: StackRef, rng: &mut impl Rng) -> StackRef {
    loop {
        let r = corpus.sample_stack(rng);
        if r != own {
            return r;
        }
    }
}
