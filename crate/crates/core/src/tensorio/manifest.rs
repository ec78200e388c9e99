use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Activations,
    Weights,
    Calibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportFile {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub sha256: String,
    pub kind: FileKind,
    /// `train`, `eval` or `calibration` for activation shards.
    #[serde(default)]
    pub split: Option<String>,
    /// Module path for weight matrices and calibration streams.
    #[serde(default)]
    pub name: Option<String>,
}

/// JSON manifest describing a directory of exported FGT1 files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub model_id: String,
    #[serde(default)]
    pub layers: Vec<usize>,
    #[serde(default = "default_site")]
    pub site: String,
    #[serde(default)]
    pub token_counts: BTreeMap<String, u64>,
    #[serde(default = "default_dtype_policy")]
    pub dtype_policy: String,
    pub files: Vec<ExportFile>,
    #[serde(skip)]
    root: PathBuf,
}

fn default_site() -> String {
    "resid_post".into()
}

fn default_dtype_policy() -> String {
    "float32".into()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl ExportManifest {
    pub fn new(model_id: impl Into<String>, root: impl Into<PathBuf>) -> Self {
        Self {
            model_id: model_id.into(),
            layers: Vec::new(),
            site: default_site(),
            token_counts: BTreeMap::new(),
            dtype_policy: default_dtype_policy(),
            files: Vec::new(),
            root: root.into(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Registers a file already written under the manifest root.
    pub fn add_file(
        &mut self,
        rel: impl Into<PathBuf>,
        kind: FileKind,
        split: Option<&str>,
        name: Option<&str>,
    ) -> Result<()> {
        let rel = rel.into();
        let sha256 = file_sha256(&self.root.join(&rel))?;
        self.files.push(ExportFile {
            path: rel,
            sha256,
            kind,
            split: split.map(str::to_owned),
            name: name.map(str::to_owned),
        });
        Ok(())
    }

    /// Parses and hash-verifies every listed file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: ExportManifest = serde_json::from_str(&text)?;
        m.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        m.verify()?;
        Ok(m)
    }

    pub fn verify(&self) -> Result<()> {
        if self.dtype_policy.to_ascii_lowercase().contains("16") && self.dtype_policy != "bfloat16" {
            return Err(Error::InvalidArgument(format!(
                "dtype policy {:?} permits float16 accumulation",
                self.dtype_policy
            )));
        }
        for f in &self.files {
            let p = self.root.join(&f.path);
            let got = file_sha256(&p)?;
            if got != f.sha256 {
                return Err(Error::Format(format!(
                    "hash mismatch for {}: manifest {}, file {got}",
                    p.display(),
                    f.sha256
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        super::atomic_write(path.as_ref(), text.as_bytes())
    }

    pub fn paths(&self, kind: FileKind, split: Option<&str>) -> Vec<PathBuf> {
        self.files
            .iter()
            .filter(|f| f.kind == kind && (split.is_none() || f.split.as_deref() == split))
            .map(|f| self.root.join(&f.path))
            .collect()
    }

    pub fn named(&self, kind: FileKind) -> Vec<(String, PathBuf)> {
        self.files
            .iter()
            .filter(|f| f.kind == kind)
            .map(|f| {
                let name = f
                    .name
                    .clone()
                    .unwrap_or_else(|| f.path.to_string_lossy().into_owned());
                (name, self.root.join(&f.path))
            })
            .collect()
    }
}
