//! Shared helpers for the acceptance suite: the criterion harness, small
//! fixture builders, and the statistics used by trend checks.

use omcrl_core::config::CorpusConfig;
use omcrl_core::contrastive::{collect_corpus, SequenceCorpus};
use omcrl_core::sim::ArenaConfig;

/// Run one criterion body, print its PASS/FAIL line, and panic on failure so
/// the test harness records it.
pub fn criterion(n: u32, desc: &str, body: impl FnOnce() -> Result<String, String>) {
    match body() {
        Ok(detail) => println!("[PASS] criterion {n}: {desc} — {detail}"),
        Err(msg) => {
            println!("[FAIL] criterion {n}: {desc} — {msg}");
            panic!("criterion {n} failed: {msg}");
        }
    }
}

/// Boolean check with a message, for use inside criterion bodies.
pub fn check(cond: bool, msg: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.to_string())
    }
}

/// Small rendered corpus for statistics tests.
pub fn tiny_corpus(seed: u64, episodes: usize, seq_len: usize) -> SequenceCorpus {
    let arena = ArenaConfig { img: 8, h_max: 30, n_obstacles: 2, ..ArenaConfig::default() };
    let cc = CorpusConfig {
        episodes,
        scripted_fraction: 0.5,
        max_episode_len: 16,
    };
    collect_corpus(&arena, &cc, seq_len, 3, seed).unwrap()
}

/// Spearman rank correlation of y against x (ties broken by index; adequate
/// for strictly increasing x and noisy y).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; n];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let mean = (n as f64 - 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..n {
        let (a, b) = (rx[i] - mean, ry[i] - mean);
        num += a * b;
        dx += a * a;
        dy += b * b;
    }
    num / (dx.sqrt() * dy.sqrt()).max(1e-12)
}

pub fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[allow(dead_code)]
fn unused() {}
