//! Unstructured one-shot pruning: global magnitude thresholding and the
//! activation-aware Wanda score `|W_ij| * ||x_j||` applied per output row.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensorio::{self, ActivationBatch, ExportManifest, FileKind, Meta, TensorFile};

/// Ordered collection of named (out_dim x in_dim) weight matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightSet {
    layers: IndexMap<String, Array2<f32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightManifest {
    layers: Vec<WeightEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    file: String,
}

impl WeightSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, w: Array2<f32>) -> Result<()> {
        let name = name.into();
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("weights of layer {name}")));
        }
        if self.layers.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate layer name {name}")));
        }
        self.layers.insert(name, w);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f32>> {
        self.layers.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f32>)> {
        self.layers.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.layers.keys()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn total_weights(&self) -> usize {
        self.layers.values().map(|w| w.len()).sum()
    }

    pub fn min_layer_size(&self) -> usize {
        self.layers.values().map(|w| w.len()).min().unwrap_or(0)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, (name, w)) in self.layers.iter().enumerate() {
            let file = format!("{i:04}.fgt");
            let meta = Meta::from([("name".to_string(), name.clone())]);
            tensorio::write_tensor_file(dir.join(&file), &TensorFile::from_matrix(w, meta))?;
            entries.push(WeightEntry {
                name: name.clone(),
                file,
            });
        }
        let m = WeightManifest { layers: entries };
        tensorio::atomic_write(&dir.join("weights.json"), serde_json::to_string_pretty(&m)?.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mp = dir.join("weights.json");
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let m: WeightManifest = serde_json::from_str(&text)?;
        let mut ws = WeightSet::new();
        for e in m.layers {
            let t = tensorio::read_tensor_file(dir.join(&e.file))?;
            ws.insert(e.name, t.into_matrix()?)?;
        }
        Ok(ws)
    }

    /// Weight matrices listed in an exporter manifest, in manifest order.
    pub fn from_export(manifest: &ExportManifest) -> Result<Self> {
        let mut ws = WeightSet::new();
        for (name, path) in manifest.named(FileKind::Weights) {
            let t = tensorio::read_tensor_file(&path)?;
            let name = t.meta.get("name").cloned().unwrap_or(name);
            ws.insert(name, t.into_matrix()?)?;
        }
        if ws.is_empty() {
            return Err(Error::Empty("manifest lists no weight files".into()));
        }
        Ok(ws)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    Magnitude,
    Wanda,
}

impl PruneMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneMethod::Magnitude => "magnitude",
            PruneMethod::Wanda => "wanda",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    pub weights: WeightSet,
    pub requested_sparsity: f64,
    pub measured_sparsity: f64,
    pub method: PruneMethod,
}

impl PruneResult {
    /// `method,sparsity_requested,sparsity_measured`
    pub fn summary_csv(&self) -> String {
        format!(
            "method,sparsity_requested,sparsity_measured\n{},{},{}\n",
            self.method.as_str(),
            self.requested_sparsity,
            self.measured_sparsity
        )
    }
}

/// Per-input-channel l2 norms of each layer's calibration inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationNorms {
    pub norms: IndexMap<String, Vec<f64>>,
    pub token_count: usize,
}

/// Streaming accumulator of squared input-channel sums (f64).
#[derive(Debug, Clone, Default)]
pub struct WandaNormAccumulator {
    sums: IndexMap<String, Vec<f64>>,
    tokens: IndexMap<String, usize>,
}

impl WandaNormAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, layer: &str, batch: &ActivationBatch) -> Result<()> {
        let rows = batch.rows();
        self.add_rows(layer, rows.as_slice().expect("standard layout"), rows.ncols())
    }

    /// `rows` is a row-major block of width `width`.
    pub fn add_rows(&mut self, layer: &str, rows: &[f32], width: usize) -> Result<()> {
        let sums = self
            .sums
            .entry(layer.to_string())
            .or_insert_with(|| vec![0.0; width]);
        if sums.len() != width {
            return Err(Error::Shape(format!(
                "calibration input for {layer} has width {width}, earlier batches {}",
                sums.len()
            )));
        }
        for row in rows.chunks_exact(width) {
            for (s, &v) in sums.iter_mut().zip(row) {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("calibration input for {layer}")));
                }
                *s += v as f64 * v as f64;
            }
        }
        *self.tokens.entry(layer.to_string()).or_insert(0) += rows.len() / width.max(1);
        Ok(())
    }

    pub fn finish(self) -> Result<CalibrationNorms> {
        let token_count = self.tokens.values().copied().max().unwrap_or(0);
        if let Some((name, _)) = self.tokens.iter().find(|(_, n)| **n == 0) {
            return Err(Error::Empty(format!("no calibration tokens for layer {name}")));
        }
        if token_count == 0 {
            return Err(Error::Empty("no calibration tokens".into()));
        }
        let norms = self
            .sums
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(f64::sqrt).collect()))
            .collect();
        Ok(CalibrationNorms { norms, token_count })
    }
}

/// `norms[layer][j] = sqrt(sum over tokens of x_j²)`.
pub fn compute_wanda_norms<'a, I, S>(per_layer_inputs: I) -> Result<CalibrationNorms>
where
    I: IntoIterator<Item = (&'a str, S)>,
    S: IntoIterator<Item = &'a ActivationBatch>,
{
    let mut acc = WandaNormAccumulator::new();
    for (layer, stream) in per_layer_inputs {
        let mut any = false;
        for b in stream {
            acc.add(layer, b)?;
            any = any || !b.is_empty();
        }
        if !any {
            return Err(Error::Empty(format!("calibration stream for layer {layer} is empty")));
        }
    }
    acc.finish()
}

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("sparsity {s} outside [0, 1]")));
    }
    Ok(())
}

/// Fraction of exactly-zero entries.
pub fn measured_sparsity(weights: &WeightSet) -> f64 {
    let total = weights.total_weights();
    if total == 0 {
        return 0.0;
    }
    let zeros: usize = weights
        .iter()
        .map(|(_, w)| w.iter().filter(|v| **v == 0.0).count())
        .sum();
    zeros as f64 / total as f64
}

/// Zeroes exactly `floor(s * N)` weights with the smallest `|w|` across all
/// layers; ties go to the earlier (layer, row, column).
pub fn magnitude_prune(weights: &WeightSet, sparsity: f64, exec: Exec) -> Result<PruneResult> {
    check_sparsity(sparsity)?;
    if weights.is_empty() || weights.total_weights() == 0 {
        return Err(Error::Empty("weight set has no weights".into()));
    }
    let total = weights.total_weights();
    let n_prune = ((sparsity * total as f64).floor() as usize).min(total);
    let mut out = weights.clone();
    if n_prune > 0 {
        // (|w|, global index); global index order = (layer, row, column).
        let mut keys: Vec<(f32, usize)> = Vec::with_capacity(total);
        for (_, w) in weights.iter() {
            let base = keys.len();
            keys.extend(w.iter().enumerate().map(|(i, v)| (v.abs(), base + i)));
        }
        let cmp = |a: &(f32, usize), b: &(f32, usize)| -> Ordering { a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)) };
        if n_prune < total {
            keys.select_nth_unstable_by(n_prune - 1, cmp);
        }
        let mut chosen: Vec<usize> = keys[..n_prune].iter().map(|k| k.1).collect();
        exec.sort_by(&mut chosen, |a, b| a.cmp(b));
        let mut offset = 0usize;
        let mut it = chosen.into_iter().peekable();
        for (_, w) in out.layers.iter_mut() {
            let len = w.len();
            let flat = w.as_slice_mut().expect("standard layout");
            while let Some(&g) = it.peek() {
                if g >= offset + len {
                    break;
                }
                flat[g - offset] = 0.0;
                it.next();
            }
            offset += len;
        }
    }
    let measured = measured_sparsity(&out);
    Ok(PruneResult {
        weights: out,
        requested_sparsity: sparsity,
        measured_sparsity: measured,
        method: PruneMethod::Magnitude,
    })
}

fn prune_row(row: &mut [f32], norms: &[f64], n_prune: usize) {
    if n_prune == 0 {
        return;
    }
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let score = |j: usize| (row[j].abs() as f64) * norms[j];
    let cmp = |a: &usize, b: &usize| score(*a).total_cmp(&score(*b)).then(a.cmp(b));
    if n_prune < row.len() {
        idx.select_nth_unstable_by(n_prune - 1, cmp);
    }
    for &j in &idx[..n_prune] {
        row[j] = 0.0;
    }
}

/// Within every row, zeroes the `floor(s * in_dim)` entries with the smallest
/// `|W_ij| * norm_j`; ties go to the lower column.
pub fn wanda_prune(weights: &WeightSet, norms: &CalibrationNorms, sparsity: f64, exec: Exec) -> Result<PruneResult> {
    check_sparsity(sparsity)?;
    if weights.is_empty() {
        return Err(Error::Empty("weight set has no layers".into()));
    }
    let mut out = weights.clone();
    for (name, w) in out.layers.iter_mut() {
        let n = norms
            .norms
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no calibration norms for layer {name}")))?;
        let in_dim = w.ncols();
        if n.len() != in_dim {
            return Err(Error::Shape(format!(
                "layer {name}: {} norms for in_dim {in_dim}",
                n.len()
            )));
        }
        let n_prune = ((sparsity * in_dim as f64).floor() as usize).min(in_dim);
        if in_dim == 0 || n_prune == 0 {
            continue;
        }
        let flat = w.as_slice_mut().expect("standard layout");
        exec.for_each_chunk_mut(flat, in_dim, |_, row| prune_row(row, n, n_prune));
    }
    let measured = measured_sparsity(&out);
    Ok(PruneResult {
        weights: out,
        requested_sparsity: sparsity,
        measured_sparsity: measured,
        method: PruneMethod::Wanda,
    })
}
