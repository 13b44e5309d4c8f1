//! On-disk parameter checkpoints: a JSON manifest plus one raw
//! little-endian `f64` file per parameter (and per Adam moment buffer).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{ParamEntry, ParameterStore};
use super::tensor::Tensor;
use super::DiffError;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub m_file: String,
    pub v_file: String,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Free-form architecture descriptor, compared verbatim on load.
    pub architecture: serde_json::Value,
    pub hyperparameters: serde_json::Value,
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
    #[serde(default)]
    pub extra: serde_json::Value,
    pub parameters: Vec<ParamRecord>,
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn write_f64_le(path: &Path, values: &[f64]) -> Result<(), DiffError> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| DiffError::Io(format!("{}: {e}", path.display())))
}

pub fn read_f64_le(path: &Path) -> Result<Vec<f64>, DiffError> {
    let bytes = fs::read(path).map_err(|e| DiffError::Io(format!("{}: {e}", path.display())))?;
    if bytes.len() % 8 != 0 {
        return Err(DiffError::Checkpoint(format!(
            "{}: length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes `store` under `dir`. The manifest's `parameters` list is rebuilt
/// from the store; the other manifest fields are written as given.
pub fn save_checkpoint(
    dir: &Path,
    manifest: &CheckpointManifest,
    store: &ParameterStore,
) -> Result<(), DiffError> {
    let io = |e: std::io::Error| DiffError::Io(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir.join("params")).map_err(io)?;
    let mut manifest = manifest.clone();
    manifest.format_version = FORMAT_VERSION;
    manifest.parameters.clear();
    for (name, e) in store.iter() {
        let stem = file_stem(name);
        let rec = ParamRecord {
            name: name.clone(),
            shape: e.value.shape().to_vec(),
            file: format!("params/{stem}.bin"),
            m_file: format!("params/{stem}.m.bin"),
            v_file: format!("params/{stem}.v.bin"),
            step: e.step,
        };
        write_f64_le(&dir.join(&rec.file), e.value.data())?;
        write_f64_le(&dir.join(&rec.m_file), e.m.data())?;
        write_f64_le(&dir.join(&rec.v_file), e.v.data())?;
        manifest.parameters.push(rec);
    }
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DiffError::Checkpoint(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json).map_err(io)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, ParameterStore), DiffError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| DiffError::Io(format!("{}: {e}", path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| DiffError::Checkpoint(format!("{}: corrupt manifest: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DiffError::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let mut store = ParameterStore::new();
    for rec in &manifest.parameters {
        let load = |file: &str| -> Result<Tensor, DiffError> {
            let data = read_f64_le(&dir.join(file))?;
            Tensor::new(rec.shape.clone(), data).map_err(|_| {
                DiffError::Checkpoint(format!(
                    "parameter {} in {file}: data does not match shape {:?}",
                    rec.name, rec.shape
                ))
            })
        };
        let entry = ParamEntry {
            value: load(&rec.file)?,
            m: load(&rec.m_file)?,
            v: load(&rec.v_file)?,
            step: rec.step,
        };
        store.insert_entry(rec.name.clone(), entry)?;
    }
    Ok((manifest, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> CheckpointManifest {
        CheckpointManifest {
            format_version: FORMAT_VERSION,
            architecture: serde_json::json!({"arch": "test"}),
            hyperparameters: serde_json::json!({}),
            seed: 7,
            epoch: 3,
            config_hash: "abc".into(),
            extra: serde_json::Value::Null,
            parameters: vec![],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParameterStore::new();
        store.insert("a.w", Tensor::matrix(2, 2, vec![0.1, -1e-300, f64::MAX, 3.0]).unwrap());
        store.insert("b", Tensor::row(vec![std::f64::consts::PI]));
        save_checkpoint(dir.path(), &manifest(), &store).unwrap();
        let (m, loaded) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, store);
        assert_eq!(m.epoch, 3);

        let first = fs::read(dir.path().join("params/a.w.bin")).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_checkpoint(dir2.path(), &m, &loaded).unwrap();
        assert_eq!(first, fs::read(dir2.path().join("params/a.w.bin")).unwrap());
    }

    #[test]
    fn corrupt_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("corrupt manifest"));
    }

    #[test]
    fn truncated_parameter_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::zeros(3, 3));
        save_checkpoint(dir.path(), &manifest(), &store).unwrap();
        fs::write(dir.path().join("params/w.bin"), [0u8; 16]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
