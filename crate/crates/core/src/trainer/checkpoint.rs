//! Binary checkpoint format.
//!
//! Layout, little-endian throughout:
//!
//! | field | encoding |
//! |---|---|
//! | magic | `b"MODSCKPT"` |
//! | version | `u32` |
//! | fingerprint | 32-byte SHA-256 of the model config and feature widths |
//! | precision | `u8` tag of the tensor value type |
//! | header | `u32` length + JSON (configs, progress, history) |
//! | parameters | `u32` count, then per record `u32` name length, UTF-8 name, tensor |
//! | optimizer | `u64` step, `u32` count, then first and second moment tensors per parameter |
//! | best parameters | `u32` count (0 or the parameter count), tensors in parameter order |
//! | RNG | `u64` seed, `u64` stream |
//! | checksum | 32-byte SHA-256 of every preceding byte |

use std::fs;
use std::io::{self, Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, TrainConfig};
use crate::dataio::FeatureDims;
use crate::error::{Error, Result};
use crate::numcore::{read_tensor, write_tensor, Precision, Tensor};

pub const MAGIC: &[u8; 8] = b"MODSCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Early-stopping state after the last completed epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub epochs_done: usize,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    /// Epochs since the last validation improvement.
    pub stale_epochs: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss weighted by batch size.
    pub train_loss: f64,
    pub train_regression: f64,
    pub train_nce: f64,
    pub val_mae: f64,
}

/// Shuffling is a pure function of `(seed, stream)`, the stream being the
/// next epoch index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    dims: FeatureDims,
    train: TrainConfig,
    progress: Progress,
    history: Vec<EpochRecord>,
}

/// Parameters, optimizer state and training progress.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub dims: FeatureDims,
    pub train: TrainConfig,
    pub progress: Progress,
    pub history: Vec<EpochRecord>,
    pub precision: Precision,
    /// Named tensors in model construction order.
    pub params: Vec<(String, Tensor)>,
    pub adam_step: u64,
    /// First and second moments, aligned with `params`.
    pub moments: Vec<(Tensor, Tensor)>,
    /// Best-so-far parameters aligned with `params`; empty before the first
    /// epoch and in evaluation snapshots.
    pub best_params: Vec<Tensor>,
    pub rng: RngState,
}

/// SHA-256 of the JSON encoding of the model config and feature widths.
pub fn config_fingerprint(model: &ModelConfig, dims: &FeatureDims) -> [u8; 32] {
    let json = serde_json::to_vec(&(model, dims)).expect("configs serialize");
    Sha256::digest(&json).into()
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Corrupt(detail.into())
}

fn short(e: io::Error) -> Error {
    match e.kind() {
        io::ErrorKind::UnexpectedEof => corrupt("truncated record"),
        _ => corrupt(e.to_string()),
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(short)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(short)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining {
        return Err(corrupt("truncated record"));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(short)?;
    Ok(b)
}

impl Checkpoint {
    pub fn fingerprint(&self) -> [u8; 32] {
        config_fingerprint(&self.model, &self.dims)
    }

    /// Incompatibility error unless the checkpoint was made for this config.
    pub fn check_compatible(&self, model: &ModelConfig, dims: &FeatureDims) -> Result<()> {
        if self.fingerprint() != config_fingerprint(model, dims) {
            return Err(Error::Incompatible(format!(
                "config fingerprint mismatch: checkpoint has d = {}, depth = {}, ablation = {}, dims = {:?}; \
                 requested d = {}, depth = {}, ablation = {}, dims = {:?}",
                self.model.d,
                self.model.pcca_depth,
                self.model.ablation,
                self.dims,
                model.d,
                model.pcca_depth,
                model.ablation,
                dims
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.params.len();
        if !(self.moments.is_empty() || self.moments.len() == n) || !(self.best_params.is_empty() || self.best_params.len() == n) {
            return Err(Error::InvalidArgument("optimizer or best-parameter records do not match the parameters".into()));
        }
        let header = Header {
            model: self.model.clone(),
            dims: self.dims,
            train: self.train.clone(),
            progress: self.progress.clone(),
            history: self.history.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint());
        out.push(self.precision.tag());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let tensor = |out: &mut Vec<u8>, t: &Tensor| write_tensor(out, t, self.precision).expect("Vec write");
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            tensor(&mut out, t);
        }
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        out.extend_from_slice(&(self.moments.len() as u32).to_le_bytes());
        for (m, v) in &self.moments {
            tensor(&mut out, m);
            tensor(&mut out, v);
        }
        out.extend_from_slice(&(self.best_params.len() as u32).to_le_bytes());
        for t in &self.best_params {
            tensor(&mut out, t);
        }
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 12 + 2 * DIGEST_LEN + 1 {
            return Err(corrupt("truncated header"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let expected: [u8; 32] = Sha256::digest(body).into();
        if digest != expected {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }

        let mut r = Cursor::new(body);
        r.set_position(12);
        let fingerprint = read_bytes(&mut r, DIGEST_LEN)?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(short)?;
        let precision = Precision::from_tag(tag[0]).ok_or_else(|| corrupt(format!("unknown precision tag {}", tag[0])))?;
        let len = read_u32(&mut r)? as usize;
        let header: Header =
            serde_json::from_slice(&read_bytes(&mut r, len)?).map_err(|e| corrupt(format!("header: {e}")))?;
        if fingerprint != config_fingerprint(&header.model, &header.dims) {
            return Err(corrupt("fingerprint does not match the embedded config"));
        }
        let tensor = |r: &mut Cursor<&[u8]>| read_tensor(r, precision).map_err(short);
        let n = read_u32(&mut r)? as usize;
        let mut params = Vec::new();
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, len)?).map_err(|_| corrupt("parameter name is not UTF-8"))?;
            params.push((name, tensor(&mut r)?));
        }
        let adam_step = read_u64(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        if count != 0 && count != n {
            return Err(corrupt(format!("{count} moment records for {n} parameters")));
        }
        let mut moments = Vec::new();
        for _ in 0..count {
            moments.push((tensor(&mut r)?, tensor(&mut r)?));
        }
        let count = read_u32(&mut r)? as usize;
        if count != 0 && count != n {
            return Err(corrupt(format!("{count} best-parameter records for {n} parameters")));
        }
        let best_params = (0..count).map(|_| tensor(&mut r)).collect::<Result<Vec<_>>>()?;
        let rng = RngState {
            seed: read_u64(&mut r)?,
            stream: read_u64(&mut r)?,
        };
        if r.position() as usize != body.len() {
            return Err(corrupt("trailing bytes after the RNG state"));
        }
        for ((name, p), (m, v)) in params.iter().zip(&moments) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(corrupt(format!("moment shape differs from parameter `{name}`")));
            }
        }
        Ok(Checkpoint {
            model: header.model,
            dims: header.dims,
            train: header.train,
            progress: header.progress,
            history: header.history,
            precision,
            params,
            adam_step,
            moments,
            best_params,
            rng,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(precision: Precision) -> Checkpoint {
        let p = |v: &[f64]| Tensor::row_vector(v);
        Checkpoint {
            model: ModelConfig::default(),
            dims: FeatureDims::uniform(4),
            train: TrainConfig::default(),
            progress: Progress {
                epochs_done: 2,
                best_epoch: Some(1),
                best_val_mae: Some(0.75),
                stale_epochs: 1,
                stopped_early: false,
            },
            history: vec![EpochRecord {
                epoch: 0,
                train_loss: 1.5,
                train_regression: 1.25,
                train_nce: 2.5,
                val_mae: 0.75,
            }],
            precision,
            params: vec![("a.w".into(), p(&[0.5, -1.0])), ("b".into(), Tensor::scalar(0.1))],
            adam_step: 7,
            moments: vec![(p(&[0.1, 0.2]), p(&[0.3, 0.4])), (Tensor::scalar(0.0), Tensor::scalar(1.0))],
            best_params: vec![],
            rng: RngState { seed: 3, stream: 2 },
        }
    }

    #[test]
    fn round_trip_f64_is_exact() {
        let c = sample(Precision::F64);
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn round_trip_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut c = sample(Precision::F32);
        c.best_params = vec![Tensor::row_vector(&[1.0, 2.0]), Tensor::scalar(0.5)];
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params[0].1, c.params[0].1);
        assert_eq!(back.best_params.len(), 2);
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = sample(Precision::F32).to_bytes().unwrap();
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
    }

    #[test]
    fn flipped_byte_is_corruption() {
        let mut bytes = sample(Precision::F32).to_bytes().unwrap();
        let k = bytes.len() - 40;
        bytes[k] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = sample(Precision::F32).to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { found: 9, expected: 1 })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn fingerprint_mismatch_is_incompatible() {
        let c = sample(Precision::F32);
        c.check_compatible(&c.model, &c.dims).unwrap();
        let other = ModelConfig { d: 64, ..c.model.clone() };
        assert!(matches!(c.check_compatible(&other, &c.dims), Err(Error::Incompatible(_))));
        assert!(matches!(
            c.check_compatible(&c.model, &FeatureDims::uniform(5)),
            Err(Error::Incompatible(_))
        ));
    }
}
