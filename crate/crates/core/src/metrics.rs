//! Evaluation metrics over episode sets: navigation error (NE), oracle
//! success (OS), success rate (SR), success weighted by path length (SPL),
//! collision rate (CR), and time to success (TTS).

use crate::error::{Error, Result};
use crate::sim::{ArenaConfig, NavEnv, TerminalCause};

/// Per-episode record as collected by a deterministic evaluation run.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub positions: Vec<(f64, f64)>,
    /// Executed path length.
    pub path_len: f64,
    /// Optimal path length (straight line start → goal).
    pub optimal_len: f64,
    pub cause: TerminalCause,
    pub terminal_pos: (f64, f64),
    pub goal: (f64, f64),
    pub steps: u32,
    /// Minimum distance to the goal along the trajectory.
    pub min_goal_dist: f64,
}

impl EpisodeRecord {
    pub fn success(&self) -> bool {
        self.cause == TerminalCause::Goal
    }

    pub fn terminal_goal_dist(&self) -> f64 {
        let dx = self.terminal_pos.0 - self.goal.0;
        let dy = self.terminal_pos.1 - self.goal.1;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Aggregate report in Table-style column order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Mean terminal distance to goal (arena units).
    pub ne: f64,
    /// Percent of episodes whose trajectory entered the ε-ball.
    pub os: f64,
    /// Percent of episodes terminating at the goal.
    pub sr: f64,
    /// Success weighted by path length, in [0, 1].
    pub spl: f64,
    /// Percent of episodes terminating in collision.
    pub cr: f64,
    /// Mean steps over successful episodes; `None` when there are none.
    pub tts: Option<f64>,
    pub episodes: usize,
}

impl MetricsReport {
    /// TTS cell with the zero-success marker.
    pub fn tts_display(&self) -> String {
        match self.tts {
            Some(v) => format!("{v:.1}"),
            None => "--".to_string(),
        }
    }

    /// Fixed-width table in NE, OS, SR, SPL, CR, TTS column order.
    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>7} {:>7} {:>6} {:>7} {:>7}\n{:>8.3} {:>6.1}% {:>6.1}% {:>6.3} {:>6.1}% {:>7}",
            "NE", "OS", "SR", "SPL", "CR", "TTS",
            self.ne, self.os, self.sr, self.spl, self.cr,
            self.tts_display()
        )
    }
}

/// `SPL = (1/M) Σ 𝕀_i · ℓ_i / max(d_i, ℓ_i)`.
pub fn spl(records: &[EpisodeRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("spl over an empty record set"));
    }
    let total: f64 = records
        .iter()
        .map(|r| {
            if r.success() {
                r.optimal_len / r.path_len.max(r.optimal_len)
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / records.len() as f64)
}

/// Percent of episodes whose trajectory ever came within `epsilon` of the
/// goal, regardless of where it ended.
pub fn oracle_success(records: &[EpisodeRecord], epsilon: f64) -> f64 {
    percent(records, |r| r.min_goal_dist <= epsilon)
}

pub fn success_rate(records: &[EpisodeRecord]) -> f64 {
    percent(records, EpisodeRecord::success)
}

pub fn collision_rate(records: &[EpisodeRecord]) -> f64 {
    percent(records, |r| r.cause == TerminalCause::Collision)
}

/// Mean terminal distance to the goal.
pub fn navigation_error(records: &[EpisodeRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(EpisodeRecord::terminal_goal_dist).sum::<f64>() / records.len() as f64
}

/// Mean steps over successful episodes; `None` at zero successes.
pub fn tts(records: &[EpisodeRecord]) -> Option<f64> {
    let succ: Vec<u32> =
        records.iter().filter(|r| r.success()).map(|r| r.steps).collect();
    if succ.is_empty() {
        None
    } else {
        Some(succ.iter().map(|&s| f64::from(s)).sum::<f64>() / succ.len() as f64)
    }
}

fn percent(records: &[EpisodeRecord], pred: impl Fn(&EpisodeRecord) -> bool) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    100.0 * records.iter().filter(|r| pred(r)).count() as f64 / records.len() as f64
}

pub fn report(records: &[EpisodeRecord], epsilon: f64) -> Result<MetricsReport> {
    Ok(MetricsReport {
        ne: navigation_error(records),
        os: oracle_success(records, epsilon),
        sr: success_rate(records),
        spl: spl(records)?,
        cr: collision_rate(records),
        tts: tts(records),
        episodes: records.len(),
    })
}

/// Deterministic evaluation: run `episodes` episodes with the policy's mean
/// action (no sampling) on a fresh env pool seeded from `seed`.
///
/// `act` maps the env's current state to the executed action.
pub fn evaluate<F>(
    arena: &ArenaConfig,
    frames_l: usize,
    need_rgb: bool,
    need_depth: bool,
    episodes: usize,
    epsilon: f64,
    seed: u64,
    mut act: F,
) -> Result<(Vec<EpisodeRecord>, MetricsReport)>
where
    F: FnMut(&NavEnv) -> Result<[f64; 3]>,
{
    let mut env = NavEnv::new(arena.clone(), frames_l, need_rgb, need_depth, seed, 0)?;
    let mut records = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut positions = vec![env.state.position];
        let start = env.state.position;
        let goal = env.arena.goal;
        let optimal_len = ((start.0 - goal.0).powi(2) + (start.1 - goal.1).powi(2)).sqrt();
        let mut min_goal_dist = env.distance_to_goal();
        let mut path_len = 0.0;
        let cause;
        loop {
            let prev = env.state.position;
            let action = act(&env)?;
            let out = env.step(action)?;
            let p = env.state.position;
            path_len += ((p.0 - prev.0).powi(2) + (p.1 - prev.1).powi(2)).sqrt();
            min_goal_dist = min_goal_dist.min(out.d_t);
            positions.push(p);
            if out.terminal {
                cause = out.cause;
                break;
            }
        }
        records.push(EpisodeRecord {
            terminal_pos: *positions.last().expect("at least the start"),
            positions,
            path_len,
            optimal_len,
            cause,
            goal,
            steps: env.state.steps,
            min_goal_dist,
        });
        env.reset()?;
    }
    let rep = report(&records, epsilon)?;
    Ok((records, rep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use crate::sim::scripted_goto_action;
    use rand::Rng;

    fn rec(cause: TerminalCause, opt: f64, path: f64, min_d: f64, steps: u32) -> EpisodeRecord {
        EpisodeRecord {
            positions: vec![(0.0, 0.0)],
            path_len: path,
            optimal_len: opt,
            cause,
            terminal_pos: (0.0, 0.0),
            goal: (opt, 0.0),
            steps,
            min_goal_dist: min_d,
        }
    }

    #[test]
    fn spl_direct_cases() {
        // one success with d = ℓ → 1.0
        let r = vec![rec(TerminalCause::Goal, 10.0, 10.0, 0.0, 100)];
        assert_eq!(spl(&r).unwrap(), 1.0);
        // ℓ = 10, d = 20 → 0.5
        let r = vec![rec(TerminalCause::Goal, 10.0, 20.0, 0.0, 100)];
        assert_eq!(spl(&r).unwrap(), 0.5);
        // all failures → 0
        let r = vec![rec(TerminalCause::Collision, 10.0, 3.0, 2.0, 30)];
        assert_eq!(spl(&r).unwrap(), 0.0);
        assert!(spl(&[]).is_err());
    }

    #[test]
    fn oracle_success_counts_near_misses() {
        // passed within 0.4 but ended far → OS yes, SR no
        let r = vec![rec(TerminalCause::Timeout, 5.0, 9.0, 0.4, 200)];
        assert_eq!(oracle_success(&r, 0.5), 100.0);
        assert_eq!(success_rate(&r), 0.0);
        // never closer than 0.6 → not counted
        let r = vec![rec(TerminalCause::Timeout, 5.0, 9.0, 0.6, 200)];
        assert_eq!(oracle_success(&r, 0.5), 0.0);
    }

    #[test]
    fn tts_mean_and_zero_success_marker() {
        let r = vec![
            rec(TerminalCause::Goal, 1.0, 1.0, 0.0, 100),
            rec(TerminalCause::Goal, 1.0, 1.0, 0.0, 200),
            rec(TerminalCause::Goal, 1.0, 1.0, 0.0, 300),
        ];
        assert_eq!(tts(&r), Some(200.0));
        let none = vec![rec(TerminalCause::Collision, 1.0, 0.5, 0.9, 10)];
        assert_eq!(tts(&none), None);
        let rep = report(&none, 0.5).unwrap();
        assert_eq!(rep.tts_display(), "--");
    }

    #[test]
    fn terminal_at_goal_contributes_zero_ne() {
        let mut r = rec(TerminalCause::Goal, 4.0, 4.0, 0.0, 10);
        r.terminal_pos = r.goal;
        assert_eq!(navigation_error(&[r]), 0.0);
    }

    /// Random physically-consistent record sets: causes and minimum
    /// distances derived from one sampled trajectory shape.
    fn random_records(seed: u64, n: usize) -> Vec<EpisodeRecord> {
        let mut rng = stream_rng(seed, Stream::Eval, 50);
        (0..n)
            .map(|_| {
                let optimal: f64 = rng.gen_range(1.0..8.0);
                let reached = rng.gen_bool(0.5);
                let (cause, min_d) = if reached {
                    (TerminalCause::Goal, rng.gen_range(0.0..0.5))
                } else {
                    let min_d: f64 = rng.gen_range(0.0..4.0);
                    let c = if rng.gen_bool(0.5) {
                        TerminalCause::Collision
                    } else {
                        TerminalCause::Timeout
                    };
                    (c, min_d)
                };
                let path: f64 = optimal * rng.gen_range(1.0..3.0);
                rec(cause, optimal, path, min_d, rng.gen_range(10..500))
            })
            .collect()
    }

    #[test]
    fn metric_properties_on_random_sets() {
        for seed in 0..1000 {
            let recs = random_records(seed, 20);
            let rep = report(&recs, 0.5).unwrap();
            assert!(rep.os >= rep.sr, "OS {} < SR {}", rep.os, rep.sr);
            assert!(rep.spl <= rep.sr / 100.0 + 1e-12, "SPL {} vs SR {}", rep.spl, rep.sr);
            assert!(rep.cr + rep.sr <= 100.0 + 1e-12);
            for v in [rep.os, rep.sr, rep.cr] {
                assert!((0.0..=100.0).contains(&v));
            }
            assert!((0.0..=1.0).contains(&rep.spl));
        }
    }

    #[test]
    fn spl_equals_sr_iff_all_successes_optimal() {
        let optimal = vec![
            rec(TerminalCause::Goal, 5.0, 5.0, 0.0, 50),
            rec(TerminalCause::Collision, 5.0, 2.0, 3.0, 20),
        ];
        let rep = report(&optimal, 0.5).unwrap();
        assert!((rep.spl - rep.sr / 100.0).abs() < 1e-12);

        let subopt = vec![rec(TerminalCause::Goal, 5.0, 6.0, 0.0, 50)];
        let rep = report(&subopt, 0.5).unwrap();
        assert!(rep.spl < rep.sr / 100.0);
    }

    #[test]
    fn aggregation_is_order_independent() {
        let mut recs = random_records(7, 50);
        let a = report(&recs, 0.5).unwrap();
        recs.reverse();
        let b = report(&recs, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scripted_policy_achieves_perfect_metrics_in_empty_arena() {
        let arena = ArenaConfig { img: 8, h_max: 400, ..ArenaConfig::default() };
        let (records, rep) =
            evaluate(&arena, 3, false, false, 20, 0.5, 3, |env| Ok(scripted_goto_action(env)))
                .unwrap();
        assert_eq!(records.len(), 20);
        assert_eq!(rep.sr, 100.0);
        assert_eq!(rep.os, 100.0);
        assert!(rep.spl > 0.9, "SPL {}", rep.spl);
        assert_eq!(rep.cr, 0.0);
        assert!(rep.tts.is_some());
    }

    #[test]
    fn evaluation_is_deterministic_per_seed() {
        let arena = ArenaConfig { img: 8, h_max: 100, ..ArenaConfig::default() };
        let run = |seed| {
            let (recs, rep) =
                evaluate(&arena, 3, false, false, 5, 0.5, seed, |env| {
                    Ok(scripted_goto_action(env))
                })
                .unwrap();
            (recs.len(), rep)
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11).1, run(12).1);
    }
}
