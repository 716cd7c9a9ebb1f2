use omcrl_core::config::RunConfig;
use omcrl_core::nn::LrSchedule;
use omcrl_core::sim::ArenaConfig;
use omcrl_core::train::OracleTrainer;
use std::time::Instant;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.seed = 1;
    cfg.arena = ArenaConfig { img: 16, h_max: 200, n_obstacles: 4, obstacle_radius_min: 0.35, obstacle_radius_max: 0.55, ..ArenaConfig::default() };
    cfg.upstream.latent = 64;
    cfg.upstream.crop = 14;
    cfg.rl.n_envs = 16;
    cfg.rl.horizon = 256;
    cfg.rl.buffer = 4096;
    cfg.rl.minibatch = 1024;
    cfg.rl.epochs = 3;
    cfg.rl.gamma = 0.95;
    cfg.rl.total_steps = 300_000;
    cfg.rl.eval_every = 0;
    cfg.rl.lr = LrSchedule::LinearDecay { initial: 3e-4, total_steps: 300_000 };
    let mut t = OracleTrainer::new(&cfg).unwrap();
    let t0 = Instant::now();
    loop {
        let log = t.update().unwrap();
        if log.env_step % 16384 == 0 || log.env_step >= 300_000 {
            let (_, rep) = t.evaluate_policy(50, 777).unwrap();
            println!(
                "steps {:6} ret {:7.3} SR {:5.1}% CR {:5.1}% NE {:.2} ({:.0?})",
                log.env_step, log.mean_return, rep.sr, rep.cr, rep.ne, t0.elapsed()
            );
            if rep.sr >= 85.0 || log.env_step >= 300_000 {
                break;
            }
        }
    }
}
