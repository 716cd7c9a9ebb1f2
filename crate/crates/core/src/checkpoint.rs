//! Versioned binary checkpoints: named parameter blobs stored as 32-bit
//! little-endian values plus run provenance (config hash, seed, step).
//! Writes go through a temp file and an atomic rename so a crash never
//! leaves a corrupt checkpoint behind.

use crate::autodiff::Tensor;
use crate::config::sha256_hex;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"OMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Component tag: encoder, projection, transformer, oracle, student.
    pub component: String,
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
    pub metadata: Vec<(String, String)>,
    pub blobs: Vec<Blob>,
}

impl Checkpoint {
    pub fn from_params(
        component: &str,
        config_hash: &str,
        seed: u64,
        step: u64,
        params: &[(String, &Tensor)],
    ) -> Self {
        let blobs = params
            .iter()
            .map(|(name, t)| Blob {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Checkpoint {
            component: component.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            step,
            metadata: Vec::new(),
            blobs,
        }
    }

    /// Copy blob values back into an aligned parameter list (names and
    /// shapes must match exactly).
    pub fn restore_into(&self, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        if params.len() != self.blobs.len() {
            return Err(Error::format(format!(
                "checkpoint has {} blobs, target has {} parameters",
                self.blobs.len(),
                params.len()
            )));
        }
        for (blob, (name, t)) in self.blobs.iter().zip(params.iter_mut()) {
            if &blob.name != name {
                return Err(Error::format(format!(
                    "blob '{}' does not match parameter '{name}'",
                    blob.name
                )));
            }
            if blob.shape != t.shape() {
                return Err(Error::format(format!(
                    "blob '{}' shape {:?} vs parameter shape {:?}",
                    blob.name,
                    blob.shape,
                    t.shape()
                )));
            }
            for (dst, &src) in t.data_mut().iter_mut().zip(&blob.data) {
                *dst = f64::from(src);
            }
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// SHA-256 over the blob section (names, shapes, and values).
    pub fn param_hash(&self) -> String {
        let mut bytes = Vec::new();
        for b in &self.blobs {
            bytes.extend_from_slice(b.name.as_bytes());
            for &d in &b.shape {
                bytes.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &b.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        write_str(w, &self.component)?;
        write_str(w, &self.config_hash)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.metadata.len() as u16).to_le_bytes())?;
        for (k, v) in &self.metadata {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_all(&(self.blobs.len() as u32).to_le_bytes())?;
        for b in &self.blobs {
            write_str(w, &b.name)?;
            w.write_all(&[b.shape.len() as u8])?;
            for &d in &b.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &b.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "checkpoint format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let component = read_str(r)?;
        let config_hash = read_str(r)?;
        let seed = read_u64(r)?;
        let step = read_u64(r)?;
        let n_meta = read_u16(r)?;
        let mut metadata = Vec::with_capacity(n_meta as usize);
        for _ in 0..n_meta {
            let k = read_str(r)?;
            let v = read_str(r)?;
            metadata.push((k, v));
        }
        let n_blobs = read_u32(r)?;
        let mut blobs = Vec::with_capacity(n_blobs as usize);
        for _ in 0..n_blobs {
            let name = read_str(r)?;
            let mut ndim = [0u8; 1];
            read_exact(r, &mut ndim)?;
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                shape.push(read_u32(r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 4];
                read_exact(r, &mut b)?;
                data.push(f32::from_le_bytes(b));
            }
            blobs.push(Blob { name, shape, data });
        }
        // Trailing garbage is as suspect as truncation.
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::format("trailing bytes after checkpoint payload"));
        }
        Ok(Checkpoint { component, config_hash, seed, step, metadata, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::fs::File::create(&tmp)?;
        self.write_to(&mut f)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)
            .map_err(|e| Error::format(format!("open {}: {e}", path.display())))?;
        Self::read_from(&mut f)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format("truncated checkpoint"))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u16(r)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::format("non-utf8 string in checkpoint"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Encoder, ParamSet};
    use crate::rng::{stream_rng, Stream};

    fn sample_checkpoint() -> Checkpoint {
        let enc = Encoder::new(3, 8, 4, &mut stream_rng(0, Stream::Init, 0)).unwrap();
        let mut ck = Checkpoint::from_params("encoder", "deadbeef", 7, 123, &enc.named());
        ck.metadata.push(("crop".into(), "8".into()));
        ck
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample_checkpoint();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(ck, back);
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn restore_rebuilds_f32_exact_values() {
        let mut enc = Encoder::new(3, 8, 4, &mut stream_rng(1, Stream::Init, 0)).unwrap();
        let ck = Checkpoint::from_params("encoder", "h", 0, 0, &enc.named());
        // clobber, then restore
        for (_, t) in enc.named_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        ck.restore_into(&mut enc.named_mut()).unwrap();
        let again = Checkpoint::from_params("encoder", "h", 0, 0, &enc.named());
        assert_eq!(ck.blobs, again.blobs);
        assert_eq!(ck.param_hash(), again.param_hash());
    }

    #[test]
    fn truncated_file_is_integrity_error() {
        let ck = sample_checkpoint();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        for cut in [3, 11, buf.len() / 2, buf.len() - 1] {
            let err = Checkpoint::read_from(&mut &buf[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut at {cut}: {err}");
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let ck = sample_checkpoint();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.push(0);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn version_bump_is_explicit_error() {
        let ck = sample_checkpoint();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf[4] = 99; // version field
        let err = Checkpoint::read_from(&mut buf.as_slice()).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }

    #[test]
    fn shape_mismatch_on_restore_rejected() {
        let enc = Encoder::new(3, 8, 4, &mut stream_rng(2, Stream::Init, 0)).unwrap();
        let ck = Checkpoint::from_params("encoder", "h", 0, 0, &enc.named());
        let mut other = Encoder::new(3, 8, 6, &mut stream_rng(2, Stream::Init, 0)).unwrap();
        assert!(ck.restore_into(&mut other.named_mut()).is_err());
    }

    #[test]
    fn save_load_through_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck").join("encoder.ckpt");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, back);
        assert_eq!(back.meta("crop"), Some("8"));
    }
}
