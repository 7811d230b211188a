//! Checkpoint file format.
//!
//! Layout: magic bytes `TAREC1\0`, a little-endian u64 byte length, a UTF-8
//! TOML manifest (dimensions plus the shape of every tensor in declaration
//! order), then the raw tensor data as little-endian IEEE-754 f64 in that
//! same order — encoder first, denoiser second.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{DenoiserParams, GuidanceEncoderParams, ModelDims};

pub const MAGIC: &[u8; 7] = b"TAREC1\0";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Everything needed to rebuild both parameter structs and validate them
/// against an experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub v: usize,
    pub d: usize,
    pub l: usize,
    pub t_max: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub h_ff: usize,
    pub den_layers: usize,
    pub den_hidden: usize,
    pub d_t: usize,
    pub time_base: f64,
    pub encoder_tensors: Vec<TensorShape>,
    pub denoiser_tensors: Vec<TensorShape>,
}

impl Manifest {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            v: self.v,
            d: self.d,
            l: self.l,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            h_ff: self.h_ff,
            den_layers: self.den_layers,
            den_hidden: self.den_hidden,
            d_t: self.d_t,
            time_base: self.time_base,
        }
    }
}

fn shape_table(tensors: &[(String, &crate::tape::Tensor)]) -> Vec<TensorShape> {
    tensors
        .iter()
        .map(|(name, t)| TensorShape {
            name: name.clone(),
            rows: t.rows,
            cols: t.cols,
        })
        .collect()
}

pub fn save(
    path: &Path,
    enc: &GuidanceEncoderParams,
    den: &DenoiserParams,
    t_max: usize,
) -> Result<()> {
    let dims = enc.dims;
    let manifest = Manifest {
        v: dims.v,
        d: dims.d,
        l: dims.l,
        t_max,
        n_layers: dims.n_layers,
        n_heads: dims.n_heads,
        h_ff: dims.h_ff,
        den_layers: dims.den_layers,
        den_hidden: dims.den_hidden,
        d_t: dims.d_t,
        time_base: dims.time_base,
        encoder_tensors: shape_table(&enc.tensors()),
        denoiser_tensors: shape_table(&den.tensors()),
    };
    let manifest_text =
        toml::to_string(&manifest).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut write = |bytes: &[u8]| file.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&(manifest_text.len() as u64).to_le_bytes())?;
    write(manifest_text.as_bytes())?;
    let mut buf = Vec::new();
    for (_, t) in enc.tensors().into_iter().chain(den.tensors()) {
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write(&buf)
}

pub fn load(path: &Path) -> Result<(GuidanceEncoderParams, DenoiserParams, Manifest)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 7];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic bytes".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic bytes {magic:?}, expected TAREC1\\0"
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint("truncated manifest length".into()))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)
        .map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
    let manifest_text = String::from_utf8(manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("manifest not UTF-8: {e}")))?;
    let manifest: Manifest = toml::from_str(&manifest_text)
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;

    let dims = manifest.dims();
    let mut enc = GuidanceEncoderParams::zeros(dims)
        .map_err(|e| Error::Checkpoint(format!("manifest dims invalid: {e}")))?;
    let mut den = DenoiserParams::zeros(dims)
        .map_err(|e| Error::Checkpoint(format!("manifest dims invalid: {e}")))?;

    let declared: Vec<TensorShape> = manifest
        .encoder_tensors
        .iter()
        .chain(&manifest.denoiser_tensors)
        .cloned()
        .collect();
    let actual =
        shape_table(&enc.tensors().into_iter().chain(den.tensors()).collect::<Vec<_>>());
    if declared != actual {
        let offending: Vec<String> = declared
            .iter()
            .zip(&actual)
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.name.clone())
            .collect();
        return Err(Error::Checkpoint(format!(
            "tensor shape table does not match manifest dimensions: {offending:?}"
        )));
    }

    let mut rest = Vec::new();
    file.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    let expected: usize = declared.iter().map(|s| s.rows * s.cols * 8).sum();
    if rest.len() != expected {
        return Err(Error::Checkpoint(format!(
            "tensor payload is {} bytes, expected {expected}",
            rest.len()
        )));
    }
    let mut off = 0;
    let mut fill = |t: &mut crate::tape::Tensor| {
        for v in &mut t.data {
            let mut b = [0u8; 8];
            b.copy_from_slice(&rest[off..off + 8]);
            *v = f64::from_le_bytes(b);
            off += 8;
        }
    };
    for t in enc.tensors_mut() {
        fill(t);
    }
    for t in den.tensors_mut() {
        fill(t);
    }
    Ok((enc, den, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::component_rng;

    fn dims() -> ModelDims {
        ModelDims {
            v: 6,
            d: 4,
            l: 3,
            n_layers: 1,
            n_heads: 2,
            h_ff: 8,
            den_layers: 3,
            den_hidden: 8,
            d_t: 4,
            time_base: 10_000.0,
        }
    }

    #[test]
    fn roundtrip_preserves_every_parameter() {
        let mut rng = component_rng(3, "init");
        let enc = GuidanceEncoderParams::init(dims(), &mut rng).unwrap();
        let den = DenoiserParams::init(dims(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tarec");
        save(&path, &enc, &den, 64).unwrap();
        let (enc2, den2, manifest) = load(&path).unwrap();
        assert_eq!(enc, enc2);
        assert_eq!(den, den2);
        assert_eq!(manifest.t_max, 64);
        assert_eq!(manifest.dims(), dims());
    }

    #[test]
    fn save_is_byte_deterministic() {
        let mut rng = component_rng(3, "init");
        let enc = GuidanceEncoderParams::init(dims(), &mut rng).unwrap();
        let den = DenoiserParams::init(dims(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a"), dir.path().join("b"));
        save(&p1, &enc, &den, 10).unwrap();
        save(&p2, &enc, &den, 10).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut rng = component_rng(3, "init");
        let enc = GuidanceEncoderParams::init(dims(), &mut rng).unwrap();
        let den = DenoiserParams::init(dims(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tarec");
        save(&path, &enc, &den, 10).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut rng = component_rng(3, "init");
        let enc = GuidanceEncoderParams::init(dims(), &mut rng).unwrap();
        let den = DenoiserParams::init(dims(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tarec");
        save(&path, &enc, &den, 10).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
