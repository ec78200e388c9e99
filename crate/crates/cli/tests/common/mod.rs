#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Value};

/// One run entry with a small toy model so a whole matrix runs in seconds.
pub fn tiny_run(id: &str, method: &str, sparsity: f64, seeds: &[u64], sae_steps: usize) -> Value {
    json!({
        "run_id": id,
        "model_source": {"kind": "toy", "seed": 7, "config": {
            "vocab_size": 64, "d_model": 16, "n_layers": 2, "n_heads": 2,
            "d_mlp": 32, "max_seq_len": 32, "hook_layer": 1
        }},
        "method": method,
        "sparsity": sparsity,
        "seeds": seeds,
        "sae": {"steps": sae_steps, "batch_size": 64, "lr": 3e-3, "resample_every": 100,
                "expansion_factor": 4, "k": 4, "log_every": 50},
        "train_tokens": 2048,
        "eval_tokens": 1024,
        "calibration_tokens": 256,
        "prompt_len": 32,
        "ablation": {"n": 4, "prompts": 2, "tokens_per_prompt": 16}
    })
}

pub fn write_matrix(path: &Path, runs: Vec<Value>) {
    fs::write(path, serde_json::to_string_pretty(&json!({ "runs": runs })).unwrap()).unwrap();
}

/// Relative path -> bytes for every file under `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    fn walk(root: &Path, d: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(d).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    walk(dir, dir, &mut out);
    out
}

pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}
