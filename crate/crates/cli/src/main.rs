use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use omcrl::commands::{self, DistillOptions, PretrainOptions};
use omcrl_core::config::{DecayKind, RunConfig};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "omcrl", version, about = "Two-stage visuomotor policy learning pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply for a missing file only
    /// when --allow-default-config is set.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Run with built-in defaults when --config is omitted.
    #[arg(long)]
    allow_default_config: bool,

    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override the Bernoulli masking probability ρ_m.
    #[arg(long)]
    mask_prob: Option<f64>,

    /// Override the α decay schedule.
    #[arg(long, value_parser = parse_decay)]
    decay: Option<DecayKind>,

    /// Drop the projection head φ (ablation).
    #[arg(long)]
    no_projection: bool,

    /// Accept checkpoints whose config hash differs from this run's.
    #[arg(long)]
    force: bool,
}

fn parse_decay(s: &str) -> Result<DecayKind, String> {
    match s {
        "linear" => Ok(DecayKind::Linear),
        "exp" | "exponential" => Ok(DecayKind::Exponential),
        "fixed" => Ok(DecayKind::Fixed),
        other => Err(format!("unknown decay kind '{other}' (linear|exp|fixed)")),
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None if self.allow_default_config => RunConfig::default(),
            None => bail!("--config is required (or pass --allow-default-config)"),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(p) = self.mask_prob {
            cfg.upstream.mask_prob = p;
        }
        if let Some(kind) = self.decay {
            cfg.decay.kind = kind;
        }
        if self.no_projection {
            cfg.upstream.use_projection = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Record simulator episodes into the offline corpus.
    Collect {
        #[command(flatten)]
        common: Common,
    },
    /// Masked contrastive pretraining (or the CURL ablation).
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Frame-level contrastive baseline instead of masked sequences.
        #[arg(long)]
        curl_mode: bool,
    },
    /// Train the privileged oracle teacher with PPO.
    Teach {
        #[command(flatten)]
        common: Common,
    },
    /// Train the deployment policy under the frozen encoder.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Disable oracle guidance (α ≡ 0 ablation).
        #[arg(long)]
        no_oracle: bool,
    },
    /// Deterministic evaluation of a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (defaults to the run's student.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render SVG charts from the run's CSV logs.
    Plot {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Collect { common } => {
            commands::cmd_collect(&common.resolve()?)?;
        }
        Cmd::Pretrain { common, curl_mode } => {
            commands::cmd_pretrain(&common.resolve()?, PretrainOptions { curl_mode })?;
        }
        Cmd::Teach { common } => {
            commands::cmd_teach(&common.resolve()?)?;
        }
        Cmd::Distill { common, no_oracle } => {
            let force = common.force;
            commands::cmd_distill(&common.resolve()?, DistillOptions { no_oracle, force })?;
        }
        Cmd::Eval { common, checkpoint } => {
            let force = common.force;
            commands::cmd_eval(&common.resolve()?, checkpoint.as_deref(), force)?;
        }
        Cmd::Plot { common } => {
            commands::cmd_plot(&common.resolve()?)?;
        }
    }
    Ok(())
}
