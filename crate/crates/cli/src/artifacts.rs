//! Checkpoint wiring per component: construction of the right network
//! shapes from config, save/load, and the provenance checks (config hash,
//! architecture metadata, frozen-encoder hash).

use omcrl_core::checkpoint::Checkpoint;
use omcrl_core::config::RunConfig;
use omcrl_core::contrastive::UpstreamNets;
use omcrl_core::nn::{Encoder, ParamSet, Projection};
use omcrl_core::rng::{stream_rng, Stream};
use omcrl_core::train::{FrozenEncoder, OraclePolicy, StudentPolicy};
use omcrl_core::{Error, Result};
use std::path::{Path, PathBuf};

pub fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("checkpoints")
}

pub fn encoder_path(cfg: &RunConfig) -> PathBuf {
    checkpoint_dir(cfg).join("encoder.ckpt")
}

pub fn projection_path(cfg: &RunConfig) -> PathBuf {
    checkpoint_dir(cfg).join("projection.ckpt")
}

pub fn transformer_path(cfg: &RunConfig) -> PathBuf {
    checkpoint_dir(cfg).join("transformer.ckpt")
}

pub fn oracle_path(cfg: &RunConfig) -> PathBuf {
    checkpoint_dir(cfg).join("oracle.ckpt")
}

pub fn student_path(cfg: &RunConfig) -> PathBuf {
    checkpoint_dir(cfg).join("student.ckpt")
}

fn arch_meta(cfg: &RunConfig) -> Vec<(String, String)> {
    vec![
        ("latent".into(), cfg.upstream.latent.to_string()),
        ("crop".into(), cfg.upstream.crop.to_string()),
        ("frames".into(), cfg.upstream.frames.to_string()),
        ("img".into(), cfg.arena.img.to_string()),
    ]
}

fn check_meta(ck: &Checkpoint, key: &str, expect: usize, path: &Path) -> Result<()> {
    match ck.meta(key) {
        Some(v) if v == expect.to_string() => Ok(()),
        Some(v) => Err(Error::config(format!(
            "{}: {key} = {v} in checkpoint but {expect} in config",
            path.display()
        ))),
        None => Err(Error::config(format!("{}: checkpoint missing {key}", path.display()))),
    }
}

fn check_config_hash(ck: &Checkpoint, cfg: &RunConfig, path: &Path, force: bool) -> Result<()> {
    if ck.config_hash != cfg.hash() && !force {
        return Err(Error::config(format!(
            "{}: config hash {} does not match this run's {} (pass --force to override)",
            path.display(),
            &ck.config_hash[..12.min(ck.config_hash.len())],
            &cfg.hash()[..12]
        )));
    }
    Ok(())
}

/// Persist the three upstream components (the mode tag records whether the
/// run was masked or the CURL ablation).
pub fn save_upstream(
    cfg: &RunConfig,
    nets: &UpstreamNets,
    step: u64,
    mode: &str,
) -> Result<()> {
    let hash = cfg.hash();
    let meta = {
        let mut m = arch_meta(cfg);
        m.push(("mode".into(), mode.to_string()));
        m
    };
    let mut enc = Checkpoint::from_params("encoder", &hash, cfg.seed, step, &nets.encoder.named());
    enc.metadata = meta.clone();
    enc.save(&encoder_path(cfg))?;
    let mut proj =
        Checkpoint::from_params("projection", &hash, cfg.seed, step, &nets.projection.named());
    proj.metadata = meta.clone();
    proj.save(&projection_path(cfg))?;
    let mut tf = Checkpoint::from_params(
        "transformer",
        &hash,
        cfg.seed,
        step,
        &nets.transformer.named(),
    );
    tf.metadata = meta;
    tf.save(&transformer_path(cfg))?;
    Ok(())
}

/// Load the frozen upstream backbone for downstream training. The
/// projection is skipped under the --no-projection ablation.
pub fn load_frozen_encoder(cfg: &RunConfig, force: bool) -> Result<FrozenEncoder> {
    let enc_path = encoder_path(cfg);
    if !enc_path.exists() {
        return Err(Error::config(format!(
            "{} not found: run `omcrl pretrain` first",
            enc_path.display()
        )));
    }
    let ck = Checkpoint::load(&enc_path)?;
    if ck.component != "encoder" {
        return Err(Error::format(format!("{}: component {}", enc_path.display(), ck.component)));
    }
    check_config_hash(&ck, cfg, &enc_path, force)?;
    check_meta(&ck, "latent", cfg.upstream.latent, &enc_path)?;
    check_meta(&ck, "crop", cfg.upstream.crop, &enc_path)?;
    check_meta(&ck, "frames", cfg.upstream.frames, &enc_path)?;
    let mut encoder = Encoder::new(
        3 * cfg.upstream.frames,
        cfg.upstream.crop,
        cfg.upstream.latent,
        &mut stream_rng(0, Stream::Init, 0),
    )?;
    ck.restore_into(&mut encoder.named_mut())?;

    let projection = if cfg.upstream.use_projection {
        let proj_path = projection_path(cfg);
        if !proj_path.exists() {
            return Err(Error::config(format!(
                "{} not found: run `omcrl pretrain` first",
                proj_path.display()
            )));
        }
        let pck = Checkpoint::load(&proj_path)?;
        check_config_hash(&pck, cfg, &proj_path, force)?;
        let mut p = Projection::new(
            cfg.upstream.latent,
            cfg.upstream.latent,
            &mut stream_rng(0, Stream::Init, 0),
        );
        pck.restore_into(&mut p.named_mut())?;
        Some(p)
    } else {
        None
    };
    Ok(FrozenEncoder { encoder, projection, crop: cfg.upstream.crop })
}

pub fn save_oracle(cfg: &RunConfig, policy: &OraclePolicy, step: u64) -> Result<()> {
    let mut ck = Checkpoint::from_params("oracle", &cfg.hash(), cfg.seed, step, &policy.named());
    ck.metadata = arch_meta(cfg);
    ck.save(&oracle_path(cfg))
}

pub fn load_oracle(cfg: &RunConfig, force: bool) -> Result<OraclePolicy> {
    let path = oracle_path(cfg);
    if !path.exists() {
        return Err(Error::config(format!(
            "{} not found: run `omcrl teach` first",
            path.display()
        )));
    }
    let ck = Checkpoint::load(&path)?;
    if ck.component != "oracle" {
        return Err(Error::format(format!("{}: component {}", path.display(), ck.component)));
    }
    check_config_hash(&ck, cfg, &path, force)?;
    check_meta(&ck, "latent", cfg.upstream.latent, &path)?;
    check_meta(&ck, "img", cfg.arena.img, &path)?;
    let mut policy =
        OraclePolicy::new(cfg.upstream.frames, cfg.arena.img, cfg.upstream.latent, 0)?;
    ck.restore_into(&mut policy.named_mut())?;
    Ok(policy)
}

/// The student checkpoint stores actor/critic parameters plus references to
/// the frozen encoder artifacts (paths and the encoder parameter hash).
pub fn save_student(
    cfg: &RunConfig,
    student: &StudentPolicy,
    frozen: &FrozenEncoder,
    step: u64,
) -> Result<()> {
    let mut ck = Checkpoint::from_params("student", &cfg.hash(), cfg.seed, step, &student.named());
    ck.metadata = arch_meta(cfg);
    ck.metadata.push(("encoder_path".into(), encoder_path(cfg).display().to_string()));
    ck.metadata.push(("projection_path".into(), projection_path(cfg).display().to_string()));
    ck.metadata.push(("encoder_hash".into(), frozen.param_hash()));
    ck.metadata.push(("use_projection".into(), cfg.upstream.use_projection.to_string()));
    ck.save(&student_path(cfg))
}

pub fn load_student(
    cfg: &RunConfig,
    path: &Path,
    force: bool,
) -> Result<(StudentPolicy, FrozenEncoder)> {
    let ck = Checkpoint::load(path)?;
    if ck.component != "student" {
        return Err(Error::format(format!("{}: component {}", path.display(), ck.component)));
    }
    check_config_hash(&ck, cfg, path, force)?;
    check_meta(&ck, "latent", cfg.upstream.latent, path)?;
    let frozen = load_frozen_encoder(cfg, force)?;
    if let Some(expect) = ck.meta("encoder_hash") {
        let got = frozen.param_hash();
        if got != expect {
            return Err(Error::config(format!(
                "{}: frozen encoder hash mismatch (checkpoint {} vs loaded {})",
                path.display(),
                &expect[..12.min(expect.len())],
                &got[..12]
            )));
        }
    }
    let mut student = StudentPolicy::new(cfg.upstream.latent, 0);
    ck.restore_into(&mut student.named_mut())?;
    Ok((student, frozen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use omcrl_core::config::RunConfig;
    use omcrl_core::sim::ArenaConfig;

    fn tiny_cfg(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.to_path_buf();
        cfg.arena = ArenaConfig { img: 8, h_max: 30, ..ArenaConfig::default() };
        cfg.upstream.latent = 8;
        cfg.upstream.crop = 8;
        cfg
    }

    #[test]
    fn upstream_round_trip_and_hash_guard() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let nets = UpstreamNets::new(&cfg.upstream, 3).unwrap();
        save_upstream(&cfg, &nets, 100, "masked").unwrap();

        let frozen = load_frozen_encoder(&cfg, false).unwrap();
        // Blob storage is f32; restored values match at that precision.
        for ((_, a), (_, b)) in frozen.encoder.named().iter().zip(nets.encoder.named().iter()) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                assert_eq!(x as f32, y as f32);
                assert_eq!(x, f64::from(y as f32)); // loaded value is the quantized one
            }
        }
        assert!(frozen.projection.is_some());

        // different seed → different config hash → refuse without --force
        let mut other = cfg.clone();
        other.seed = 999;
        assert!(load_frozen_encoder(&other, false).is_err());
        assert!(load_frozen_encoder(&other, true).is_ok());
    }

    #[test]
    fn missing_prerequisite_names_the_prior_command() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let err = load_frozen_encoder(&cfg, false).unwrap_err().to_string();
        assert!(err.contains("pretrain"), "{err}");
        let err = load_oracle(&cfg, false).unwrap_err().to_string();
        assert!(err.contains("teach"), "{err}");
    }

    #[test]
    fn architecture_drift_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let nets = UpstreamNets::new(&cfg.upstream, 3).unwrap();
        save_upstream(&cfg, &nets, 0, "masked").unwrap();
        let mut other = cfg.clone();
        other.upstream.latent = 16; // shape drift
        let err = load_frozen_encoder(&other, true).unwrap_err().to_string();
        assert!(err.contains("latent"), "{err}");
    }
}
