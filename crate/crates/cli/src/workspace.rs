//! Content-addressed stage cache.
//!
//! Each stage lives in `<run_dir>/<stage>/` next to a `manifest.json` that
//! records the hash of its inputs (parameters plus the current content of
//! every input file) and the hashes of its outputs. A stage is a cache hit
//! when the recomputed input hash matches and every listed output exists.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub input_hash: String,
    pub outputs: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub cached: bool,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files below `path` in sorted relative order (or `path` itself).
fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    let meta = fs::metadata(path).map_err(|e| CliError::io(path, e))?;
    if meta.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(path)
        .map_err(|e| CliError::io(path, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::io(path, e))?;
    entries.sort();
    for p in entries {
        if p.file_name().is_some_and(|n| n == MANIFEST) {
            continue;
        }
        out.extend(files_under(&p)?);
    }
    Ok(out)
}

/// Hash of a file, or of every (relative name, content) pair under a
/// directory. Stage manifests are excluded.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for f in files_under(path)? {
        let rel = f.strip_prefix(path).unwrap_or(&f);
        let bytes = fs::read(&f).map_err(|e| CliError::io(&f, e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(h.finalize()))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    featgeom::tensorio::atomic_write(path, bytes)?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Runs the stages of one run directory and records cache hits.
pub struct StageRunner {
    pub run_dir: PathBuf,
    pub records: Vec<StageRecord>,
}

impl StageRunner {
    pub fn new(run_dir: impl Into<PathBuf>) -> Result<Self> {
        let run_dir = run_dir.into();
        fs::create_dir_all(&run_dir).map_err(|e| CliError::io(&run_dir, e))?;
        Ok(Self {
            run_dir,
            records: Vec::new(),
        })
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.run_dir.join(stage)
    }

    /// Executes `body` in a scratch directory unless the stage is cached,
    /// then moves the scratch directory into place. `outputs` are paths
    /// relative to the stage directory that `body` must create.
    pub fn run<P, F>(&mut self, stage: &str, params: &P, inputs: &[PathBuf], outputs: &[String], body: F) -> Result<PathBuf>
    where
        P: Serialize,
        F: FnOnce(&Path) -> Result<()>,
    {
        let dir = self.stage_dir(stage);
        let input_hash = input_hash(stage, params, inputs)?;
        if is_cached(&dir, &input_hash, outputs) {
            self.records.push(StageRecord {
                stage: stage.to_string(),
                cached: true,
            });
            return Ok(dir);
        }
        let tmp = self.run_dir.join(format!(".{stage}.tmp"));
        for d in [&tmp, &dir] {
            if d.exists() {
                fs::remove_dir_all(d).map_err(|e| CliError::io(d, e))?;
            }
        }
        fs::create_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        if let Err(e) = body(&tmp) {
            let _ = fs::remove_dir_all(&tmp);
            return Err(e);
        }
        let mut hashes = Vec::with_capacity(outputs.len());
        for o in outputs {
            let p = tmp.join(o);
            if !p.exists() {
                let _ = fs::remove_dir_all(&tmp);
                return Err(CliError::Config(format!("stage {stage} did not produce {o}")));
            }
            hashes.push((o.clone(), hash_path(&p)?));
        }
        write_json(
            &tmp.join(MANIFEST),
            &StageManifest {
                stage: stage.to_string(),
                input_hash,
                outputs: hashes,
            },
        )?;
        fs::rename(&tmp, &dir).map_err(|e| CliError::io(&dir, e))?;
        self.records.push(StageRecord {
            stage: stage.to_string(),
            cached: false,
        });
        Ok(dir)
    }
}

fn input_hash(stage: &str, params: &impl Serialize, inputs: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(params)?);
    for p in inputs {
        h.update([0]);
        h.update(hash_path(p)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn is_cached(dir: &Path, input_hash: &str, outputs: &[String]) -> bool {
    let Ok(m) = read_json::<StageManifest>(&dir.join(MANIFEST)) else {
        return false;
    };
    m.input_hash == input_hash
        && m.outputs.len() == outputs.len()
        && m.outputs.iter().zip(outputs).all(|((name, _), o)| name == o)
        && outputs.iter().all(|o| dir.join(o).exists())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_hit_and_input_change() {
        let ws = tempfile::tempdir().unwrap();
        let input = ws.path().join("in.txt");
        fs::write(&input, "a").unwrap();
        let mut r = StageRunner::new(ws.path().join("run")).unwrap();
        let outs = vec!["out.txt".to_string()];
        let body = |d: &Path| -> Result<()> {
            fs::write(d.join("out.txt"), "x").map_err(|e| CliError::io(d, e))
        };
        r.run("s", &1, std::slice::from_ref(&input), &outs, body).unwrap();
        r.run("s", &1, std::slice::from_ref(&input), &outs, body).unwrap();
        fs::write(&input, "b").unwrap();
        r.run("s", &1, std::slice::from_ref(&input), &outs, body).unwrap();
        r.run("s", &2, std::slice::from_ref(&input), &outs, body).unwrap();
        let cached: Vec<bool> = r.records.iter().map(|s| s.cached).collect();
        assert_eq!(cached, vec![false, true, false, false]);
    }

    #[test]
    fn failed_body_leaves_no_stage_dir() {
        let ws = tempfile::tempdir().unwrap();
        let mut r = StageRunner::new(ws.path()).unwrap();
        let err = r.run("s", &(), &[], &["o".into()], |_| Err(CliError::Config("boom".into())));
        assert!(err.is_err());
        assert!(!ws.path().join("s").exists());
        assert!(!ws.path().join(".s.tmp").exists());
        assert!(r.run("t", &(), &[], &["missing".into()], |_| Ok(())).is_err());
    }

    #[test]
    fn directory_hash_tracks_content_and_names() {
        let ws = tempfile::tempdir().unwrap();
        fs::write(ws.path().join("a"), "1").unwrap();
        let h1 = hash_path(ws.path()).unwrap();
        fs::write(ws.path().join(MANIFEST), "ignored").unwrap();
        assert_eq!(hash_path(ws.path()).unwrap(), h1);
        fs::write(ws.path().join("a"), "2").unwrap();
        assert_ne!(hash_path(ws.path()).unwrap(), h1);
    }
}
