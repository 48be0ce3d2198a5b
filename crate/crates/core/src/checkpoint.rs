//! Checkpoints: a JSON manifest next to a raw little-endian f64 blob.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::heads::HeadConfig;
use crate::linalg::Tensor;
use crate::train::{Model, TrainError};

pub const BLOB_FORMAT: &str = "f64-le";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("unsupported blob format `{0}`")]
    Format(String),
    #[error("blob holds {got} bytes, manifest expects {expected}")]
    BlobSize { expected: usize, got: usize },
    #[error("parameter `{name}`: checkpoint shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter list differs: checkpoint has {found:?}, model expects {expected:?}")]
    Params {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("head mismatch: checkpoint uses {found}, config asks for {expected}")]
    Head { expected: String, found: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: RunConfig,
    pub seed: u64,
    pub step: u64,
    pub epoch: usize,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub params: Vec<ParamEntry>,
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Saves `model` as `<stem>.json` + `<stem>.bin` under `dir` and returns the
/// manifest path.
pub fn save_checkpoint(
    dir: &Path,
    stem: &str,
    config: &RunConfig,
    seed: u64,
    step: u64,
    epoch: usize,
    model: &Model,
) -> Result<PathBuf, CheckpointError> {
    let blob_name = format!("{stem}.bin");
    let mut params = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, t) in model.param_names().into_iter().zip(model.params()) {
        params.push(ParamEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: BLOB_FORMAT.into(),
        config: config.clone(),
        seed,
        step,
        epoch,
        blob: blob_name.clone(),
        params,
    };
    let blob_path = dir.join(&blob_name);
    atomic_write(&blob_path, &blob).map_err(io_err(&blob_path))?;
    let path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    atomic_write(&path, json.as_bytes()).map_err(io_err(&path))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CheckpointError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if m.format != BLOB_FORMAT {
        return Err(CheckpointError::Format(m.format));
    }
    Ok(m)
}

/// Loads the parameters in `path` into a model built from `config`, or from
/// the manifest's own config when `config` is `None`.
pub fn load_checkpoint(
    path: &Path,
    config: Option<&RunConfig>,
) -> Result<(Manifest, Model), CheckpointError> {
    let manifest = read_manifest(path)?;
    let config = config.unwrap_or(&manifest.config);
    let run = config.resolve()?;
    check_head(&run.head, &manifest.config.head_config()?)?;
    let mut model = Model::zeros(&run)?;

    let names = model.param_names();
    let found: Vec<String> = manifest.params.iter().map(|p| p.name.clone()).collect();
    if names != found {
        return Err(CheckpointError::Params {
            expected: names,
            found,
        });
    }
    let blob_path = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    let total: usize = manifest.params.iter().map(|p| p.len).sum();
    if bytes.len() != total * 8 {
        return Err(CheckpointError::BlobSize {
            expected: total * 8,
            got: bytes.len(),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    for (entry, slot) in manifest.params.iter().zip(model.params_mut()) {
        let elems: usize = entry.shape.iter().product();
        if entry.shape != slot.shape() || elems != entry.len || entry.offset + entry.len > values.len() {
            return Err(CheckpointError::Shape {
                name: entry.name.clone(),
                expected: slot.shape().to_vec(),
                found: entry.shape.clone(),
            });
        }
        let data = values[entry.offset..entry.offset + entry.len].to_vec();
        *slot = Tensor::new(entry.shape.clone(), data).expect("shape checked");
    }
    Ok((manifest, model))
}

fn check_head(expected: &HeadConfig, found: &HeadConfig) -> Result<(), CheckpointError> {
    if expected.kind != found.kind || expected.d_prob != found.d_prob {
        return Err(CheckpointError::Head {
            expected: expected.label(),
            found: found.label(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HeadName;

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.encoder.hidden = vec![8];
        cfg.encoder.d_out = 8;
        cfg
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let model = Model::init(&cfg.resolve().unwrap(), 3).unwrap();
        let path = save_checkpoint(dir.path(), "ck", &cfg, 3, 17, 2, &model).unwrap();
        let (m, loaded) = load_checkpoint(&path, None).unwrap();
        assert_eq!((m.seed, m.step, m.epoch), (3, 17, 2));
        assert_eq!(loaded, model);
        assert_eq!(m.config, cfg);
    }

    #[test]
    fn learned_key_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.head.kind = HeadName::Arcface;
        cfg.head.key = crate::heads::KeyKind::Learned;
        let model = Model::init(&cfg.resolve().unwrap(), 5).unwrap();
        assert!(model.param_names().contains(&"key".to_string()));
        let path = save_checkpoint(dir.path(), "ck", &cfg, 5, 0, 0, &model).unwrap();
        assert_eq!(load_checkpoint(&path, None).unwrap().1, model);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let model = Model::init(&cfg.resolve().unwrap(), 1).unwrap();
        let path = save_checkpoint(dir.path(), "ck", &cfg, 1, 0, 0, &model).unwrap();
        let mut other = cfg.clone();
        other.encoder.hidden = vec![9];
        match load_checkpoint(&path, Some(&other)) {
            Err(CheckpointError::Shape { name, expected, found }) => {
                assert_eq!(name, "encoder.0.w");
                assert_eq!(expected, vec![32, 9]);
                assert_eq!(found, vec![32, 8]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn head_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let model = Model::init(&cfg.resolve().unwrap(), 1).unwrap();
        let path = save_checkpoint(dir.path(), "ck", &cfg, 1, 0, 0, &model).unwrap();
        let mut other = cfg.clone();
        other.head.kind = HeadName::Arcface;
        assert!(matches!(
            load_checkpoint(&path, Some(&other)),
            Err(CheckpointError::Head { .. })
        ));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let model = Model::init(&cfg.resolve().unwrap(), 1).unwrap();
        let path = save_checkpoint(dir.path(), "ck", &cfg, 1, 0, 0, &model).unwrap();
        let blob = dir.path().join("ck.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(CheckpointError::BlobSize { .. })
        ));
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
