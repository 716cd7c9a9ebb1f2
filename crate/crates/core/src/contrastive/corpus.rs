use crate::autodiff::Tensor;
use crate::config::CorpusConfig;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::sim::{scripted_goto_action, ArenaConfig, NavEnv};
use log::warn;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Random,
    Scripted,
}

impl PolicyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::Scripted => "scripted",
        }
    }
}

/// One recorded episode: raw RGB frames in chronological order plus the
/// label of the policy that generated it.
#[derive(Debug, Clone)]
pub struct Episode {
    pub frames: Vec<Tensor>,
    pub policy: PolicyKind,
}

/// Reference to one frame stack: `(episode, timestep)`. The stack tensor is
/// materialized on demand with warm-fill at the episode start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackRef {
    pub episode: usize,
    pub t: usize,
}

/// Offline corpus of recorded episodes, immutable after collection.
#[derive(Debug, Clone)]
pub struct SequenceCorpus {
    pub episodes: Vec<Episode>,
    pub img: usize,
    pub frames_l: usize,
}

impl SequenceCorpus {
    /// Frame stack `(o_{t-L+1}, …, o_t)` as `[3L, img, img]`; indices before
    /// the episode start repeat the first frame.
    pub fn stack(&self, r: StackRef) -> Tensor {
        let ep = &self.episodes[r.episode];
        let per = 3 * self.img * self.img;
        let mut data = Vec::with_capacity(self.frames_l * per);
        for i in 0..self.frames_l {
            let idx = (r.t + i + 1).saturating_sub(self.frames_l);
            let idx = idx.min(ep.frames.len() - 1);
            data.extend_from_slice(ep.frames[idx].data());
        }
        Tensor::new(vec![3 * self.frames_l, self.img, self.img], data).expect("stack shape")
    }

    /// Number of (episode, start) windows admitting `seq_len` consecutive
    /// stacks.
    pub fn window_count(&self, seq_len: usize) -> usize {
        self.episodes
            .iter()
            .map(|e| e.frames.len().saturating_sub(seq_len) + usize::from(e.frames.len() >= seq_len))
            .sum()
    }

    /// Uniform window draw: `(episode, start)` such that
    /// `start + seq_len <= frames`.
    pub fn sample_window(&self, seq_len: usize, rng: &mut impl Rng) -> (usize, usize) {
        loop {
            let ep = rng.gen_range(0..self.episodes.len());
            let n = self.episodes[ep].frames.len();
            if n >= seq_len {
                let start = rng.gen_range(0..=n - seq_len);
                return (ep, start);
            }
        }
    }

    /// Uniform draw over every stack position in the corpus.
    pub fn sample_stack(&self, rng: &mut impl Rng) -> StackRef {
        let ep = rng.gen_range(0..self.episodes.len());
        let t = rng.gen_range(0..self.episodes[ep].frames.len());
        StackRef { episode: ep, t }
    }

    pub fn total_stacks(&self) -> usize {
        self.episodes.iter().map(|e| e.frames.len()).sum()
    }
}

/// Record episodes from simulator rollouts under a mix of scripted
/// go-to-goal control and piecewise-constant random exploration. Episodes
/// shorter than `seq_len + frames_l` frames are discarded with a warning.
pub fn collect_corpus(
    arena: &ArenaConfig,
    corpus_cfg: &CorpusConfig,
    seq_len: usize,
    frames_l: usize,
    seed: u64,
) -> Result<SequenceCorpus> {
    const COLLECT_STREAM: u64 = 1 << 20; // clear of per-instance env indices
    let min_frames = seq_len + frames_l;
    let mut env = NavEnv::new(arena.clone(), frames_l, true, false, seed, COLLECT_STREAM)?;
    let mut pick = stream_rng(seed, Stream::Sample, COLLECT_STREAM);
    let mut act_rng = stream_rng(seed, Stream::Policy, COLLECT_STREAM);

    let mut episodes = Vec::with_capacity(corpus_cfg.episodes);
    let mut attempts = 0usize;
    let max_attempts = corpus_cfg.episodes.saturating_mul(50).max(1000);
    while episodes.len() < corpus_cfg.episodes {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::contract(format!(
                "corpus collection stalled: {} usable episodes after {attempts} attempts \
                 (episodes shorter than {min_frames} frames are discarded)",
                episodes.len()
            )));
        }
        let scripted = pick.gen::<f64>() < corpus_cfg.scripted_fraction;
        let policy = if scripted { PolicyKind::Scripted } else { PolicyKind::Random };

        env.reset()?;
        let mut frames =
            vec![last_frame(&env)];
        let mut held_action = [0.0; 3];
        let mut hold_left = 0u32;
        for _ in 0..corpus_cfg.max_episode_len {
            let action = match policy {
                PolicyKind::Scripted => scripted_goto_action(&env),
                PolicyKind::Random => {
                    if hold_left == 0 {
                        held_action = [
                            act_rng.gen_range(-env.cfg.u_max[0]..=env.cfg.u_max[0]),
                            act_rng.gen_range(-env.cfg.u_max[1]..=env.cfg.u_max[1]),
                            act_rng.gen_range(-env.cfg.u_max[2]..=env.cfg.u_max[2]),
                        ];
                        hold_left = act_rng.gen_range(2..=6);
                    }
                    hold_left -= 1;
                    held_action
                }
            };
            let out = env.step(action)?;
            frames.push(last_frame(&env));
            if out.terminal {
                break;
            }
        }
        if frames.len() < min_frames {
            warn!(
                "discarding {} episode with {} frames (< {min_frames})",
                policy.as_str(),
                frames.len()
            );
            continue;
        }
        episodes.push(Episode { frames, policy });
    }
    Ok(SequenceCorpus { episodes, img: arena.img, frames_l })
}

/// Newest frame of the env's history (the frame rendered from the current
/// state).
fn last_frame(env: &NavEnv) -> Tensor {
    let stack = env.frame_stack();
    let img = env.cfg.img;
    let per = 3 * img * img;
    let l = stack.numel() / per;
    let data = stack.data()[(l - 1) * per..].to_vec();
    Tensor::new(vec![3, img, img], data).expect("frame shape")
}
