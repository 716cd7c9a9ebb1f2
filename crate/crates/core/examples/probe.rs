use omcrl_core::config::{CorpusConfig, UpstreamConfig};
use omcrl_core::contrastive::{collect_corpus, PretrainMode, Pretrainer};
use omcrl_core::nn::LrSchedule;
use omcrl_core::sim::ArenaConfig;
use std::time::Instant;

fn main() {
    let arena = ArenaConfig { img: 16, h_max: 60, n_obstacles: 6, ..ArenaConfig::default() };
    let cc = CorpusConfig { episodes: 150, scripted_fraction: 0.4, max_episode_len: 30 };
    let corpus = collect_corpus(&arena, &cc, 8, 3, 3).unwrap();
    let cfg = UpstreamConfig {
        seq_len: 8, latent: 64, d_ff: 256, n_blocks: 2, crop: 16, batch: 16,
        temperature: 0.1, shared_crop: true,
        lr_encoder: LrSchedule::LinearDecay { initial: 1e-3, total_steps: 8000 },
        lr_projection: LrSchedule::LinearDecay { initial: 1e-3, total_steps: 8000 },
        lr_transformer: LrSchedule::Constant { lr: 2e-3 },
        eval_batch: 32,
        ..UpstreamConfig::default()
    };
    let mut p = Pretrainer::new(&cfg, PretrainMode::Masked, 0).unwrap();
    let t0 = Instant::now();
    for step in 1..=14000u64 {
        p.step(&corpus).unwrap();
        if step % 1000 == 0 {
            let ev = p.evaluate(&corpus).unwrap();
            println!(
                "step {:5} acc {:.3} d_z {:.3} loss {:.4} ({:.0?})",
                step, ev.retrieval_acc, ev.drift, ev.loss, t0.elapsed()
            );
        }
    }
}
