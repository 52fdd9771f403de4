use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashedInput {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to a command's outputs before the work
/// starts. Deliberately free of timestamps so reruns produce the same bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub robot: HashedInput,
    pub inputs: Vec<HashedInput>,
    pub artifacts: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn hashed(role: &str, path: &Path) -> Result<HashedInput> {
    Ok(HashedInput {
        role: role.to_owned(),
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, robot: &Path) -> Result<Self> {
        Ok(Self {
            command: command.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            seed,
            robot: hashed("robot", robot)?,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn input(mut self, role: &str, path: &Path) -> Result<Self> {
        self.inputs.push(hashed(role, path)?);
        Ok(self)
    }

    pub fn artifact(mut self, path: &Path) -> Self {
        self.artifacts.push(path.display().to_string());
        self
    }

    /// Roles whose hash differs from `previous` (a role missing on either
    /// side counts as a change).
    pub fn changed_roles(&self, previous: &RunManifest) -> Vec<String> {
        let mine = std::iter::once(&self.robot).chain(&self.inputs);
        let mut changed: Vec<String> = mine
            .filter(|h| {
                !std::iter::once(&previous.robot)
                    .chain(&previous.inputs)
                    .any(|p| p.role == h.role && p.sha256 == h.sha256)
            })
            .map(|h| h.role.clone())
            .collect();
        for p in &previous.inputs {
            if !self.inputs.iter().any(|h| h.role == p.role) && !changed.contains(&p.role) {
                changed.push(p.role.clone());
            }
        }
        changed
    }

    /// Writes the manifest to `path`, warning on stderr when a previous
    /// manifest there recorded different input hashes.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(previous) = std::fs::read_to_string(path)
            .ok()
            .and_then(|text| serde_json::from_str::<RunManifest>(&text).ok())
        {
            let changed = self.changed_roles(&previous);
            if !changed.is_empty() {
                eprintln!(
                    "warning: inputs differ from the previous run recorded in {} ({})",
                    path.display(),
                    changed.join(", ")
                );
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Manifest location for a single output file: `<file>.manifest.json`.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    file.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(robot_hash: &str, inputs: &[(&str, &str)]) -> RunManifest {
        let h = |role: &str, sha: &str| HashedInput {
            role: role.into(),
            path: format!("{role}.json"),
            sha256: sha.into(),
        };
        RunManifest {
            command: "solve".into(),
            tool_version: "0".into(),
            seed: Some(1),
            robot: h("robot", robot_hash),
            inputs: inputs.iter().map(|(r, s)| h(r, s)).collect(),
            artifacts: vec![],
        }
    }

    #[test]
    fn identical_inputs_report_no_change() {
        let a = manifest("aa", &[("model", "bb")]);
        assert!(a.changed_roles(&a.clone()).is_empty());
    }

    #[test]
    fn changed_and_missing_roles_are_reported() {
        let old = manifest("aa", &[("model", "bb"), ("targets", "cc")]);
        let new = manifest("ab", &[("model", "bb")]);
        assert_eq!(
            new.changed_roles(&old),
            vec!["robot".to_string(), "targets".to_string()]
        );
    }

    #[test]
    fn beside_appends_suffix() {
        assert_eq!(
            beside(Path::new("out/sol.csv")),
            PathBuf::from("out/sol.csv.manifest.json")
        );
    }
}
