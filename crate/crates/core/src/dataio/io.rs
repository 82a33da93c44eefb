use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use super::{DatasetManifest, MultimodalSample};
use crate::error::{Error, Result};
use crate::numcore::{read_tensor, write_tensor, Precision, Tensor};
use crate::Modality;

pub const MANIFEST_FILE: &str = "manifest.json";

fn tensor_path(dir: &Path, id: &str, m: Modality) -> PathBuf {
    dir.join(format!("{id}.{}.bin", m.code()))
}

fn check_sample(manifest: &DatasetManifest, s: &MultimodalSample) -> Result<()> {
    if s.id.is_empty() || s.id.contains(['/', '\\']) {
        return Err(Error::Dataset(format!("invalid sample id `{}`", s.id)));
    }
    for m in Modality::PRIORITY {
        let x = s.sequence(m);
        if x.rank() != 2 {
            return Err(Error::Dataset(format!("sample `{}` modality {m} is not a matrix", s.id)));
        }
        if x.cols() != manifest.dims.get(m) {
            return Err(Error::Dataset(format!(
                "sample `{}` modality {m} has width {} but the manifest declares {}",
                s.id,
                x.cols(),
                manifest.dims.get(m)
            )));
        }
    }
    Ok(())
}

/// Writes `manifest.json` and one tensor file per sample and modality.
///
/// The manifest's `labels` and `planted_primary` maps are rebuilt from
/// `samples`; its splits must only reference those samples.
pub fn write_dataset(samples: &[MultimodalSample], manifest: &DatasetManifest, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mut manifest = manifest.clone();
    manifest.labels.clear();
    manifest.planted_primary.clear();
    let mut seen = HashSet::new();
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::DuplicateId(s.id.clone()));
        }
        check_sample(&manifest, s)?;
        manifest.labels.insert(s.id.clone(), s.label);
        if let Some(p) = s.planted_primary {
            manifest.planted_primary.insert(s.id.clone(), p);
        }
    }
    manifest.validate()?;

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        for m in Modality::PRIORITY {
            let path = tensor_path(dir, &s.id, m);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            write_tensor(&mut w, s.sequence(m), Precision::F32)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn read_one(path: &Path, id: &str, m: Modality) -> Result<Tensor> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == ErrorKind::NotFound => {
            return Err(Error::MissingModality {
                id: id.to_string(),
                modality: m.code().to_string(),
                path: path.to_path_buf(),
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut r = BufReader::new(file);
    let t = read_tensor(&mut r, Precision::F32).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Truncated {
            path: path.to_path_buf(),
            detail: "file ends before the declared tensor length".into(),
        },
        ErrorKind::InvalidData => Error::Truncated {
            path: path.to_path_buf(),
            detail: e.to_string(),
        },
        _ => Error::io(path, e),
    })?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(t),
        Ok(_) => Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "trailing bytes after the declared tensor length".into(),
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Inverse of [`write_dataset`]. Samples come back in manifest order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<MultimodalSample>)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    if let Some(id) = manifest.planted_primary.keys().find(|id| !manifest.labels.contains_key(*id)) {
        return Err(Error::Dataset(format!("planted modality given for unknown sample `{id}`")));
    }

    let mut samples = Vec::with_capacity(manifest.labels.len());
    for (id, &label) in &manifest.labels {
        let mut seqs = Vec::with_capacity(3);
        for m in Modality::PRIORITY {
            let p = tensor_path(dir, id, m);
            let t = read_one(&p, id, m)?;
            if t.rank() != 2 || t.cols() != manifest.dims.get(m) {
                return Err(Error::Dataset(format!(
                    "{} has shape {:?} but the manifest declares width {} for modality {m}",
                    p.display(),
                    t.shape(),
                    manifest.dims.get(m)
                )));
            }
            seqs.push(t);
        }
        let visual = seqs.pop().unwrap();
        let acoustic = seqs.pop().unwrap();
        let language = seqs.pop().unwrap();
        samples.push(MultimodalSample {
            id: id.clone(),
            label,
            language,
            acoustic,
            visual,
            planted_primary: manifest.planted_primary.get(id).copied(),
        });
    }
    Ok((manifest, samples))
}
