//! On-disk corpus layout: an index manifest (`manifest.toml`) plus one
//! binary frame file per episode (`ep_XXXXX.bin`, f32 little-endian).

use omcrl_core::autodiff::Tensor;
use omcrl_core::contrastive::{Episode, PolicyKind, SequenceCorpus};
use omcrl_core::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const EP_MAGIC: &[u8; 4] = b"OMCE";
const VERSION: u32 = 1;

pub fn save(corpus: &SequenceCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str(&format!(
        "version = {VERSION}\nimg = {}\nframes_l = {}\nepisodes = {}\n",
        corpus.img,
        corpus.frames_l,
        corpus.episodes.len()
    ));
    for (i, ep) in corpus.episodes.iter().enumerate() {
        let file = format!("ep_{i:05}.bin");
        manifest.push_str(&format!(
            "\n[[episode]]\nfile = \"{file}\"\nframes = {}\npolicy = \"{}\"\n",
            ep.frames.len(),
            ep.policy.as_str()
        ));
        let mut w = std::fs::File::create(dir.join(&file))?;
        w.write_all(EP_MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(ep.frames.len() as u32).to_le_bytes())?;
        let shape = ep.frames[0].shape();
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for frame in &ep.frames {
            for &v in frame.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    std::fs::write(dir.join("manifest.toml"), manifest)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<SequenceCorpus> {
    let manifest_path = dir.join("manifest.toml");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::format(format!("read {}: {e}", manifest_path.display())))?;
    let manifest: toml::Value =
        toml::from_str(&text).map_err(|e| Error::format(format!("manifest: {e}")))?;
    let version = manifest.get("version").and_then(toml::Value::as_integer).unwrap_or(0);
    if version != i64::from(VERSION) {
        return Err(Error::format(format!("corpus manifest version {version}")));
    }
    let img = manifest
        .get("img")
        .and_then(toml::Value::as_integer)
        .ok_or_else(|| Error::format("manifest missing img"))? as usize;
    let frames_l = manifest
        .get("frames_l")
        .and_then(toml::Value::as_integer)
        .ok_or_else(|| Error::format("manifest missing frames_l"))? as usize;
    let entries = manifest
        .get("episode")
        .and_then(toml::Value::as_array)
        .ok_or_else(|| Error::format("manifest missing episodes"))?;

    let mut episodes = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let file = e
            .get("file")
            .and_then(toml::Value::as_str)
            .ok_or_else(|| Error::format(format!("episode {i} missing file")))?;
        let policy = match e.get("policy").and_then(toml::Value::as_str) {
            Some("scripted") => PolicyKind::Scripted,
            Some("random") => PolicyKind::Random,
            other => return Err(Error::format(format!("episode {i} policy {other:?}"))),
        };
        episodes.push(load_episode(&dir.join(file), policy)?);
    }
    Ok(SequenceCorpus { episodes, img, frames_l })
}

fn load_episode(path: &Path, policy: PolicyKind) -> Result<Episode> {
    let mut r = std::fs::File::open(path)
        .map_err(|e| Error::format(format!("open {}: {e}", path.display())))?;
    let mut magic = [0u8; 4];
    read(&mut r, &mut magic, path)?;
    if &magic != EP_MAGIC {
        return Err(Error::format(format!("{}: bad episode magic", path.display())));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::format(format!("{}: episode version {version}", path.display())));
    }
    let n_frames = read_u32(&mut r, path)? as usize;
    let c = read_u32(&mut r, path)? as usize;
    let h = read_u32(&mut r, path)? as usize;
    let w = read_u32(&mut r, path)? as usize;
    let mut frames = Vec::with_capacity(n_frames);
    let per = c * h * w;
    let mut buf = vec![0u8; per * 4];
    for _ in 0..n_frames {
        read(&mut r, &mut buf, path)?;
        let data: Vec<f64> = buf
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        frames.push(Tensor::new(vec![c, h, w], data)?);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::format(format!("{}: trailing bytes", path.display())));
    }
    Ok(Episode { frames, policy })
}

fn read(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("{}: truncated episode file", path.display())))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use omcrl_core::config::CorpusConfig;
    use omcrl_core::contrastive::collect_corpus;
    use omcrl_core::sim::ArenaConfig;

    #[test]
    fn corpus_round_trips_through_disk() {
        let arena = ArenaConfig { img: 8, h_max: 30, ..ArenaConfig::default() };
        let cc = CorpusConfig { episodes: 4, scripted_fraction: 0.5, max_episode_len: 12 };
        let corpus = collect_corpus(&arena, &cc, 4, 3, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&corpus, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back.img, corpus.img);
        assert_eq!(back.frames_l, corpus.frames_l);
        assert_eq!(back.episodes.len(), corpus.episodes.len());
        for (a, b) in corpus.episodes.iter().zip(&back.episodes) {
            assert_eq!(a.policy, b.policy);
            assert_eq!(a.frames.len(), b.frames.len());
            // f64 → f32 → f64: values must survive exactly once quantized
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                for (&va, &vb) in fa.data().iter().zip(fb.data()) {
                    assert_eq!(va as f32, vb as f32);
                }
            }
        }
    }

    #[test]
    fn truncated_episode_detected() {
        let arena = ArenaConfig { img: 8, h_max: 30, ..ArenaConfig::default() };
        let cc = CorpusConfig { episodes: 2, scripted_fraction: 0.0, max_episode_len: 10 };
        let corpus = collect_corpus(&arena, &cc, 4, 3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&corpus, dir.path()).unwrap();
        let ep = dir.path().join("ep_00000.bin");
        let bytes = std::fs::read(&ep).unwrap();
        std::fs::write(&ep, &bytes[..bytes.len() - 7]).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
