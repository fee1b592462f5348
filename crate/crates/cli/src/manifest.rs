//! Stage manifests and checksum-verified artifact access.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// What one stage read and wrote. Paths are relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub details: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub const MANIFEST_DIR: &str = "manifests";

/// Output directory plus every manifest found in it.
pub struct Workspace {
    root: PathBuf,
    manifests: BTreeMap<String, Manifest>,
}

impl Workspace {
    pub fn open(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root.join(MANIFEST_DIR)).map_err(|e| io_err(root, e))?;
        let mut manifests = BTreeMap::new();
        let dir = root.join(MANIFEST_DIR);
        for entry in std::fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
            let path = entry.map_err(|e| io_err(&dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let m: Manifest = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("manifest {}: {e}", path.display())))?;
            manifests.insert(m.stage.clone(), m);
        }
        Ok(Self { root: root.to_path_buf(), manifests })
    }

    pub fn manifest(&self, stage: &str) -> Option<&Manifest> {
        self.manifests.get(stage)
    }

    pub fn manifests(&self) -> impl Iterator<Item = &Manifest> {
        self.manifests.values()
    }

    fn producer(&self, rel: &str) -> Option<&Manifest> {
        self.manifests.values().find(|m| m.outputs.contains_key(rel))
    }

    /// Checks `rel` against the manifest that wrote it, then that manifest's
    /// own inputs, so an artifact built from since-replaced inputs is stale.
    fn verify(&self, rel: &str, seen: &mut BTreeSet<String>) -> Result<String, CliError> {
        let path = self.root.join(rel);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(_) => {
                let expected = self.producer(rel).map(|m| m.outputs[rel].clone());
                return Err(CliError::Artifact(match expected {
                    Some(sum) => format!("missing artifact {rel} (expected sha256 {sum})"),
                    None => format!("missing artifact {rel}; run the stage that produces it first"),
                }));
            }
        };
        let actual = sha256_hex(&bytes);
        if !seen.insert(rel.to_string()) {
            return Ok(actual);
        }
        let Some(m) = self.producer(rel) else { return Ok(actual) };
        let expected = &m.outputs[rel];
        if *expected != actual {
            return Err(CliError::Artifact(format!(
                "stale artifact {rel}: manifest {} records sha256 {expected}, file has sha256 {actual}",
                m.stage
            )));
        }
        for (input, recorded) in &m.inputs {
            let now = self.verify(input, seen)?;
            if now != *recorded {
                return Err(CliError::Artifact(format!(
                    "stale artifact {rel}: stage {} read {input} with sha256 {recorded}, which now has sha256 {now}",
                    m.stage
                )));
            }
        }
        Ok(actual)
    }

    pub fn stage(&self, name: &str) -> Stage<'_> {
        Stage { ws: self, name: name.to_string(), inputs: BTreeMap::new(), outputs: BTreeMap::new() }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Records inputs and outputs of a running stage.
pub struct Stage<'a> {
    ws: &'a Workspace,
    name: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Stage<'_> {
    /// Verified contents of an input artifact.
    pub fn read(&mut self, rel: &str) -> Result<Vec<u8>, CliError> {
        let sum = self.ws.verify(rel, &mut BTreeSet::new())?;
        let bytes = std::fs::read(self.ws.root.join(rel)).map_err(|e| io_err(&self.ws.root.join(rel), e))?;
        if sha256_hex(&bytes) != sum {
            return Err(CliError::Artifact(format!("artifact {rel} changed while being read")));
        }
        self.inputs.insert(rel.to_string(), sum);
        Ok(bytes)
    }

    /// Reads a file outside the output directory, recorded by its path as given.
    pub fn read_external(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Artifact(format!("missing input {}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.ws.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn finish(self, config_hash: String, seed: u64, details: serde_json::Value) -> Result<Manifest, CliError> {
        let m = Manifest { stage: self.name, config_hash, seed, inputs: self.inputs, outputs: self.outputs, details };
        let text = serde_json::to_string_pretty(&m).expect("manifest is serializable") + "\n";
        let path = self.ws.root.join(MANIFEST_DIR).join(format!("{}.json", m.stage));
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn produce(ws: &Workspace, stage: &str, input: Option<&str>, out: &str, body: &[u8]) {
        let mut s = ws.stage(stage);
        if let Some(i) = input {
            s.read(i).unwrap();
        }
        s.write(out, body).unwrap();
        s.finish("h".into(), 0, serde_json::Value::Null).unwrap();
    }

    #[test]
    fn stale_inputs_are_named_with_their_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        produce(&ws, "a", None, "a.txt", b"one");
        let ws = Workspace::open(dir.path()).unwrap();
        produce(&ws, "b", Some("a.txt"), "b.txt", b"two");

        let ws = Workspace::open(dir.path()).unwrap();
        assert!(ws.stage("c").read("b.txt").is_ok());

        std::fs::write(dir.path().join("a.txt"), b"edited").unwrap();
        let err = ws.stage("c").read("b.txt").unwrap_err().to_string();
        assert!(err.contains("stale artifact") && err.contains(&sha256_hex(b"one")), "{err}");

        // regenerating the upstream artifact without rerunning b leaves b stale
        produce(&ws, "a", None, "a.txt", b"new");
        let ws = Workspace::open(dir.path()).unwrap();
        let err = ws.stage("c").read("b.txt").unwrap_err().to_string();
        assert!(err.contains("a.txt"), "{err}");
    }

    #[test]
    fn missing_artifacts_report_the_expected_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        produce(&ws, "a", None, "a.txt", b"one");
        std::fs::remove_file(dir.path().join("a.txt")).unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        let err = ws.stage("b").read("a.txt").unwrap_err();
        assert!(matches!(err, CliError::Artifact(ref m) if m.contains(&sha256_hex(b"one"))));
        assert!(matches!(ws.stage("b").read("never.txt"), Err(CliError::Artifact(_))));
    }

    #[test]
    fn manifests_carry_no_volatile_fields() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        produce(&ws, "a", None, "a.txt", b"one");
        let first = std::fs::read(dir.path().join("manifests/a.json")).unwrap();
        produce(&ws, "a", None, "a.txt", b"one");
        assert_eq!(first, std::fs::read(dir.path().join("manifests/a.json")).unwrap());
    }
}
