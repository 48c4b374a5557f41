//! Checkpoint layout: `params.bin` holds every named tensor of the encoder, and
//! `checkpoint.json` records the encoder spec, the training config, the epoch
//! and the prototype matrix.
//!
//! `params.bin` (little endian):
//!
//! ```text
//! magic  b"HSCLPRM1"
//! u64    tensor count
//! per tensor:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, u64 × rank dims
//!   f64 × prod(dims)
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::layers::Parameterized;
use super::{Encoder, EncoderSpec};
use crate::error::{HsclError, Result};
use crate::types::{HsclConfig, PrototypeBank};

const MAGIC: &[u8; 8] = b"HSCLPRM1";
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub encoder: EncoderSpec,
    pub config: HsclConfig,
    pub epoch: usize,
    pub step: u64,
    /// `[D][K]`; column `k` is prototype `k`.
    pub prototypes: Vec<Vec<f64>>,
    pub params_file: String,
}

pub fn write_params(encoder: &Encoder, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let mut count = 0u64;
    encoder.visit(&mut |_| count += 1);
    out.write_all(MAGIC)?;
    out.write_all(&count.to_le_bytes())?;
    let mut result = Ok(());
    encoder.visit(&mut |p| {
        if result.is_err() {
            return;
        }
        result = (|| -> std::io::Result<()> {
            out.write_all(&(p.name.len() as u32).to_le_bytes())?;
            out.write_all(p.name.as_bytes())?;
            out.write_all(&(p.value.ndim() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.value.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        })();
    });
    result?;
    out.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads every tensor into `encoder`, which must have the same architecture.
pub fn read_params(encoder: &mut Encoder, path: &Path) -> Result<()> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(HsclError::Checkpoint(format!("{} is not a parameter blob", path.display())));
    }
    let count = read_u64(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| HsclError::Checkpoint(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| HsclError::Checkpoint(e.to_string()))?;
        tensors.push((name, arr));
    }
    let mut expected = 0usize;
    encoder.visit(&mut |_| expected += 1);
    if expected != tensors.len() {
        return Err(HsclError::Checkpoint(format!(
            "blob holds {} tensors, encoder has {expected}",
            tensors.len()
        )));
    }
    let mut iter = tensors.into_iter();
    let mut err = None;
    encoder.visit_mut(&mut |p| {
        let (name, value) = iter.next().expect("counted");
        if err.is_some() {
            return;
        }
        if name != p.name || value.shape() != p.value.shape() {
            err = Some(HsclError::Checkpoint(format!(
                "tensor {name} {:?} does not match {} {:?}",
                value.shape(),
                p.name,
                p.value.shape()
            )));
            return;
        }
        p.value = value;
    });
    err.map_or(Ok(()), Err)
}

/// Writes `params.bin` and `checkpoint.json` into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    encoder: &Encoder,
    prototypes: &PrototypeBank,
    config: &HsclConfig,
    epoch: usize,
    step: u64,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    write_params(encoder, &dir.join(PARAMS_FILE))?;
    let manifest = CheckpointManifest {
        encoder: encoder.spec().clone(),
        config: config.clone(),
        epoch,
        step,
        prototypes: prototypes.to_nested(),
        params_file: PARAMS_FILE.to_string(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Encoder, PrototypeBank, CheckpointManifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(HsclError::Checkpoint(format!("no checkpoint at {}", dir.display())));
    }
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    // Initialization values are overwritten by the blob; any seed will do.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut encoder = Encoder::new(manifest.encoder.clone(), &mut rng)?;
    read_params(&mut encoder, &dir.join(&manifest.params_file))?;
    let prototypes = PrototypeBank::from_nested(&manifest.prototypes)?;
    Ok((encoder, prototypes, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderSpec;
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_preserves_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut spec = EncoderSpec::resnet18(1, 4, 5);
        spec.resnet_width = 2;
        let mut enc = Encoder::new(spec, &mut rng).unwrap();
        let x = Array::from_shape_simple_fn(vec![3, 1, 4, 4], || rng.random::<f64>());
        enc.forward_train(&x).unwrap(); // moves the batch-norm running statistics
        let v = PrototypeBank::new(array![[1.0], [0.0], [0.0], [0.0], [0.0]]).unwrap();
        save_checkpoint(dir.path(), &enc, &v, &HsclConfig::default(), 3, 17).unwrap();
        let (loaded, v2, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(manifest.epoch, 3);
        assert_eq!(manifest.step, 17);
        assert_eq!(v2, v);
        assert_eq!(loaded.encode(&x).unwrap(), enc.encode(&x).unwrap());
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(EncoderSpec::mlp(3, vec![4], 2), &mut rng).unwrap();
        write_params(&enc, &dir.path().join("p.bin")).unwrap();
        let mut other = Encoder::new(EncoderSpec::mlp(3, vec![5], 2), &mut rng).unwrap();
        assert!(read_params(&mut other, &dir.path().join("p.bin")).is_err());
    }

    #[test]
    fn missing_checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
