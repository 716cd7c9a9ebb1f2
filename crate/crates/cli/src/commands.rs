//! Subcommand implementations. Each takes a resolved [`RunConfig`] and
//! leaves every artifact under `config.out_dir`:
//!
//! ```text
//! out_dir/
//!   config.toml         resolved config snapshot
//!   corpus/             episode frames + manifest
//!   checkpoints/        encoder / projection / transformer / oracle / student
//!   logs/               CSV training and evaluation logs
//!   plots/              SVG charts rendered from the CSVs
//! ```

use crate::artifacts;
use crate::corpus_io;
use crate::plot;
use log::{info, warn};
use omcrl_core::config::RunConfig;
use omcrl_core::contrastive::{PretrainMode, Pretrainer, SequenceCorpus};
use omcrl_core::csvlog::{f, opt, CsvFile, CsvWriter};
use omcrl_core::metrics::{evaluate, EpisodeRecord, MetricsReport};
use omcrl_core::train::{train_oracle, train_student, UpdateLog};
use omcrl_core::{Error, Result};
use std::path::{Path, PathBuf};

const RL_COLUMNS: [&str; 7] =
    ["step", "mean_return", "surrogate_loss", "value_loss", "kl", "alpha", "lr"];
const EVAL_SEED_SALT: u64 = 0x0e0a_5eed;

pub fn logs_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("logs")
}

pub fn corpus_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("corpus")
}

fn snapshot_config(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

/// Record simulator episodes into the on-disk corpus.
pub fn cmd_collect(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    snapshot_config(cfg)?;
    let corpus = omcrl_core::contrastive::collect_corpus(
        &cfg.arena,
        &cfg.corpus,
        cfg.upstream.seq_len,
        cfg.upstream.frames,
        cfg.seed,
    )?;
    let dir = corpus_dir(cfg);
    corpus_io::save(&corpus, &dir)?;
    info!("collected {} episodes into {}", corpus.episodes.len(), dir.display());
    Ok(dir)
}

fn load_corpus(cfg: &RunConfig) -> Result<SequenceCorpus> {
    let dir = corpus_dir(cfg);
    if !dir.join("manifest.toml").exists() {
        return Err(Error::config(format!(
            "{} not found: run `omcrl collect` first",
            dir.join("manifest.toml").display()
        )));
    }
    corpus_io::load(&dir)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PretrainOptions {
    pub curl_mode: bool,
}

/// Upstream pretraining over the collected corpus; emits the encoder,
/// projection, and transformer checkpoints plus `pretrain.csv` (per-step)
/// and `drift.csv` (per evaluation epoch).
pub fn cmd_pretrain(cfg: &RunConfig, opts: PretrainOptions) -> Result<()> {
    cfg.validate()?;
    snapshot_config(cfg)?;
    let corpus = load_corpus(cfg)?;
    if corpus.img != cfg.arena.img {
        return Err(Error::config(format!(
            "corpus rendered at {} but config expects {}",
            corpus.img, cfg.arena.img
        )));
    }
    let mode = if opts.curl_mode { PretrainMode::Curl } else { PretrainMode::Masked };
    let mut trainer = Pretrainer::new(&cfg.upstream, mode, cfg.seed)?;

    let logs = logs_dir(cfg);
    let mut train_csv = CsvWriter::create(
        &logs.join("pretrain.csv"),
        "pretrain",
        &["step", "loss", "retrieval_acc", "lr_encoder", "lr_transformer"],
    )?;
    let mut drift_csv = CsvWriter::create(
        &logs.join("drift.csv"),
        "drift",
        &["step", "d_z", "retrieval_acc", "eval_loss"],
    )?;

    let up = &cfg.upstream;
    'training: for step in 1..=up.steps {
        let log = trainer.step(&corpus)?;
        if step % up.log_every == 0 || step == 1 {
            train_csv.row(&[
                log.step.to_string(),
                f(log.loss),
                opt(log.retrieval_acc),
                f(log.lr_encoder),
                f(log.lr_transformer),
            ])?;
        }
        if up.eval_every > 0 && step % up.eval_every == 0 {
            let ev = trainer.evaluate(&corpus)?;
            drift_csv.row(&[
                log.step.to_string(),
                f(ev.drift),
                f(ev.retrieval_acc),
                f(ev.loss),
            ])?;
            if let Some(gate) = up.early_stop_acc {
                if ev.retrieval_acc >= gate {
                    info!("retrieval accuracy {:.3} reached the gate at step {step}", ev.retrieval_acc);
                    break 'training;
                }
            }
        }
    }
    train_csv.flush()?;
    drift_csv.flush()?;
    artifacts::save_upstream(cfg, &trainer.nets, trainer.step_count(), mode.as_str())?;
    info!("pretraining finished after {} steps ({})", trainer.step_count(), mode.as_str());
    Ok(())
}

fn write_rl_logs(path: &Path, updates: &[UpdateLog]) -> Result<()> {
    let mut csv = CsvWriter::create(path, "rl", &RL_COLUMNS)?;
    for u in updates {
        csv.row(&[
            u.env_step.to_string(),
            f(u.mean_return),
            f(u.surrogate),
            f(u.value_loss),
            f(u.kl),
            f(u.alpha),
            f(u.lr),
        ])?;
    }
    csv.flush()
}

fn write_eval_logs(
    dir: &Path,
    prefix: &str,
    records: &[EpisodeRecord],
    report: &MetricsReport,
) -> Result<()> {
    let mut ep = CsvWriter::create(
        &dir.join(format!("{prefix}_episodes.csv")),
        "eval-episodes",
        &["episode", "cause", "steps", "ne", "path_len", "optimal_len", "min_goal_dist", "success"],
    )?;
    for (i, r) in records.iter().enumerate() {
        ep.row(&[
            i.to_string(),
            r.cause.as_str().to_string(),
            r.steps.to_string(),
            f(r.terminal_goal_dist()),
            f(r.path_len),
            f(r.optimal_len),
            f(r.min_goal_dist),
            u8::from(r.success()).to_string(),
        ])?;
    }
    ep.flush()?;
    let mut rep = CsvWriter::create(
        &dir.join(format!("{prefix}_report.csv")),
        "eval-report",
        &["ne", "os", "sr", "spl", "cr", "tts", "episodes"],
    )?;
    rep.row(&[
        f(report.ne),
        f(report.os),
        f(report.sr),
        f(report.spl),
        f(report.cr),
        report.tts_display(),
        report.episodes.to_string(),
    ])?;
    rep.flush()
}

/// Train the privileged oracle teacher with PPO; emits `oracle.ckpt`,
/// `teach.csv`, and `teach_evals.csv`.
pub fn cmd_teach(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    snapshot_config(cfg)?;
    let out = train_oracle(cfg)?;
    if out.diverged {
        warn!("oracle training diverged; checkpoint holds the last evaluated parameters");
    }
    write_rl_logs(&logs_dir(cfg).join("teach.csv"), &out.updates)?;
    write_eval_series(&logs_dir(cfg).join("teach_evals.csv"), &out.evals)?;
    artifacts::save_oracle(cfg, &out.policy, out.env_steps)?;
    info!("oracle trained for {} env steps", out.env_steps);
    Ok(())
}

fn write_eval_series(path: &Path, evals: &[omcrl_core::train::EvalPoint]) -> Result<()> {
    let mut csv = CsvWriter::create(
        path,
        "eval-series",
        &["step", "ne", "os", "sr", "spl", "cr", "tts"],
    )?;
    for e in evals {
        csv.row(&[
            e.env_step.to_string(),
            f(e.report.ne),
            f(e.report.os),
            f(e.report.sr),
            f(e.report.spl),
            f(e.report.cr),
            e.report.tts_display(),
        ])?;
    }
    csv.flush()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DistillOptions {
    /// Drop the teacher entirely (α ≡ 0 ablation).
    pub no_oracle: bool,
    /// Accept checkpoints from a different config hash.
    pub force: bool,
}

/// Train the deployment policy under the frozen encoder, guided by the
/// oracle unless disabled. Emits `student.ckpt`, `distill.csv`,
/// `distill_evals.csv`, and the final deterministic evaluation
/// (`final_eval_*.csv`).
pub fn cmd_distill(cfg: &RunConfig, opts: DistillOptions) -> Result<()> {
    cfg.validate()?;
    snapshot_config(cfg)?;
    let frozen = artifacts::load_frozen_encoder(cfg, opts.force)?;
    let teacher = if opts.no_oracle {
        None
    } else {
        Some(artifacts::load_oracle(cfg, opts.force)?)
    };
    let out = train_student(cfg, frozen, teacher)?;
    if out.diverged {
        warn!("student training diverged; checkpoint holds the last evaluated parameters");
    }
    let (student, frozen) = out.policy;
    write_rl_logs(&logs_dir(cfg).join("distill.csv"), &out.updates)?;
    write_eval_series(&logs_dir(cfg).join("distill_evals.csv"), &out.evals)?;
    artifacts::save_student(cfg, &student, &frozen, out.env_steps)?;

    // Final deterministic evaluation; `omcrl eval` on the saved checkpoint
    // reproduces these files byte for byte.
    let (records, report) = evaluate(
        &cfg.arena,
        cfg.upstream.frames,
        true,
        false,
        cfg.eval.episodes,
        cfg.eval.epsilon,
        cfg.seed ^ EVAL_SEED_SALT,
        |env| student.act_mean(&frozen, env),
    )?;
    write_eval_logs(&logs_dir(cfg), "final_eval", &records, &report)?;
    info!("student trained for {} env steps; final SR {:.1}%", out.env_steps, report.sr);
    Ok(())
}

/// Deterministic (mean-action) evaluation of a saved checkpoint. Writes
/// `eval_episodes.csv` and `eval_report.csv` and returns the report.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, force: bool) -> Result<MetricsReport> {
    cfg.validate()?;
    snapshot_config(cfg)?;
    let default_path = artifacts::student_path(cfg);
    let path = checkpoint.unwrap_or(&default_path);
    if !path.exists() {
        return Err(Error::config(format!(
            "{} not found: run `omcrl distill` (or pass --checkpoint)",
            path.display()
        )));
    }
    let component = omcrl_core::checkpoint::Checkpoint::load(path)?.component;
    let (records, report) = match component.as_str() {
        "student" => {
            let (student, frozen) = artifacts::load_student(cfg, path, force)?;
            evaluate(
                &cfg.arena,
                cfg.upstream.frames,
                true,
                false,
                cfg.eval.episodes,
                cfg.eval.epsilon,
                cfg.seed ^ EVAL_SEED_SALT,
                |env| student.act_mean(&frozen, env),
            )?
        }
        "oracle" => {
            let oracle = artifacts::load_oracle(cfg, force)?;
            evaluate(
                &cfg.arena,
                cfg.upstream.frames,
                false,
                true,
                cfg.eval.episodes,
                cfg.eval.epsilon,
                cfg.seed ^ EVAL_SEED_SALT,
                |env| oracle.act_mean(env),
            )?
        }
        other => {
            return Err(Error::config(format!(
                "cannot evaluate a '{other}' checkpoint (student or oracle expected)"
            )))
        }
    };
    write_eval_logs(&logs_dir(cfg), "eval", &records, &report)?;
    println!("{}", report.table());
    Ok(report)
}

/// Render the CSV logs into standalone SVG charts.
pub fn cmd_plot(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let logs = logs_dir(cfg);
    let plots = cfg.out_dir.join("plots");
    std::fs::create_dir_all(&plots)?;
    let mut written = Vec::new();

    // Reward-vs-step lines for whichever training logs exist.
    let mut reward_series = Vec::new();
    for (label, file) in [("oracle", "teach.csv"), ("student", "distill.csv")] {
        let path = logs.join(file);
        if path.exists() {
            let csv = CsvFile::load(&path)?;
            let steps = csv.column("step")?;
            let rets = csv.column("mean_return")?;
            let pts: Vec<(f64, f64)> = steps
                .into_iter()
                .zip(rets)
                .filter(|(_, r)| r.is_finite())
                .collect();
            if !pts.is_empty() {
                reward_series.push((label.to_string(), pts));
            }
        }
    }
    if !reward_series.is_empty() {
        let p = plots.join("reward.svg");
        plot::line_chart("episodic reward vs env steps", &reward_series, &p)?;
        written.push(p);
    }

    if logs.join("pretrain.csv").exists() {
        let csv = CsvFile::load(&logs.join("pretrain.csv"))?;
        let steps = csv.column("step")?;
        let loss = csv.column("loss")?;
        let series = vec![("loss".to_string(), steps.into_iter().zip(loss).collect())];
        let p = plots.join("pretrain.svg");
        plot::line_chart("contrastive loss vs step", &series, &p)?;
        written.push(p);
    }

    if logs.join("drift.csv").exists() {
        let csv = CsvFile::load(&logs.join("drift.csv"))?;
        let steps = csv.column("step")?;
        let dz = csv.column("d_z")?;
        let series = vec![("d_z".to_string(), steps.into_iter().zip(dz).collect())];
        let p = plots.join("drift.svg");
        plot::line_chart("representation drift d_z", &series, &p)?;
        written.push(p);
    }

    for (stem, file) in [("final_eval", "final_eval_report.csv"), ("eval", "eval_report.csv")] {
        let path = logs.join(file);
        if !path.exists() {
            continue;
        }
        let csv = CsvFile::load(&path)?;
        let row = &csv.rows[0];
        let mut bars = Vec::new();
        for (i, name) in csv.columns.iter().enumerate() {
            if name == "tts" || name == "episodes" {
                continue;
            }
            let v: f64 = row[i].parse().unwrap_or(0.0);
            let v = if name == "spl" { v * 100.0 } else { v };
            let label = if name == "spl" { "spl×100".to_string() } else { name.clone() };
            bars.push((label, v));
        }
        let p = plots.join(format!("{stem}_metrics.svg"));
        plot::bar_chart("evaluation metrics", &bars, &p)?;
        written.push(p);
    }

    if written.is_empty() {
        return Err(Error::config(format!(
            "no CSV logs under {}: run a training stage first",
            logs.display()
        )));
    }
    info!("wrote {} plot(s)", written.len());
    Ok(written)
}
