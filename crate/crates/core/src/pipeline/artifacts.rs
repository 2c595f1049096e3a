//! Stage outputs and their JSON sidecars.
//!
//! Every artifact `name` in the work directory is accompanied by
//! `name.meta.json`, holding the config hash and seed it was produced under,
//! the SHA-256 of the artifact itself and of every input it was derived from.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HazardError, Result};

pub const SIDECAR_SUFFIX: &str = ".meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub artifact: String,
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub sha256: String,
    /// Input label to its SHA-256 at the time the stage ran.
    pub inputs: BTreeMap<String, String>,
    /// Stage-specific description of the artifact's contents.
    #[serde(default)]
    pub details: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(SIDECAR_SUFFIX);
    artifact.with_file_name(name)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HazardError::io(path, e))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_bytes(path)?)?)
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HazardError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| HazardError::io(path, e))
}

/// Identity of the run that produces artifacts.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// Inputs hashed once per stage and recorded in every output sidecar.
#[derive(Debug, Clone, Default)]
pub struct Inputs(BTreeMap<String, String>);

impl Inputs {
    pub fn add(&mut self, label: &str, path: &Path) -> Result<()> {
        self.0.insert(label.to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn add_bytes(&mut self, label: &str, bytes: &[u8]) {
        self.0.insert(label.to_string(), sha256_hex(bytes));
    }
}

impl Provenance {
    /// Writes `bytes` to `path` and its sidecar next to it.
    pub fn write(
        &self,
        stage: &str,
        path: &Path,
        bytes: &[u8],
        inputs: &Inputs,
        details: serde_json::Value,
    ) -> Result<()> {
        write_file(path, bytes)?;
        let sidecar = Sidecar {
            artifact: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            stage: stage.to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            sha256: sha256_hex(bytes),
            inputs: inputs.0.clone(),
            details,
        };
        write_file(&sidecar_path(path), &to_json_bytes(&sidecar)?)
    }
}

pub fn read_sidecar(artifact: &Path) -> Result<Sidecar> {
    read_json(&sidecar_path(artifact))
}

/// Loads the sidecar of `artifact` and checks that it belongs to the run
/// `expected_hash` and that the artifact is unchanged since it was written.
pub fn verify(artifact: &Path, expected_hash: &str) -> Result<Sidecar> {
    let sidecar = read_sidecar(artifact)?;
    if sidecar.config_hash != expected_hash {
        return Err(HazardError::Artifact(format!(
            "{} was produced under config {} but the current config is {}",
            artifact.display(),
            sidecar.config_hash,
            expected_hash
        )));
    }
    let actual = file_sha256(artifact)?;
    if actual != sidecar.sha256 {
        return Err(HazardError::Artifact(format!(
            "{} was modified after its sidecar was written",
            artifact.display()
        )));
    }
    Ok(sidecar)
}

/// Loads the sidecar details of `artifact` as `T`.
pub fn details<T: DeserializeOwned>(artifact: &Path) -> Result<T> {
    let sidecar = read_sidecar(artifact)?;
    serde_json::from_value(sidecar.details)
        .map_err(|e| HazardError::Artifact(format!("sidecar of {} is malformed: {e}", artifact.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_round_trip_and_tamper_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let prov = Provenance {
            config_hash: "abc".into(),
            seed: 9,
        };
        let mut inputs = Inputs::default();
        inputs.add_bytes("x", b"hello");
        prov.write("demo", &path, b"1,2\n", &inputs, serde_json::json!({"k": 1})).unwrap();
        let s = verify(&path, "abc").unwrap();
        assert_eq!(s.inputs["x"], sha256_hex(b"hello"));
        assert_eq!(s.seed, 9);
        assert!(matches!(verify(&path, "other"), Err(HazardError::Artifact(_))));
        fs::write(&path, b"1,3\n").unwrap();
        assert!(matches!(verify(&path, "abc"), Err(HazardError::Artifact(_))));
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(sidecar_path(Path::new("w/x.csv")), PathBuf::from("w/x.csv.meta.json"));
    }
}
