use std::borrow::Borrow;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ActivationBatch;
use crate::error::{Error, Result};

/// Lower bound applied to every per-channel standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel mean and population standard deviation, accumulated in f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub sample_count: usize,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Identity statistics (mean 0, std 1).
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
            sample_count: 1,
        }
    }

    pub fn normalize_row(&self, x: &[f32], out: &mut [f64]) {
        for (((o, &v), m), s) in out.iter_mut().zip(x).zip(&self.mean).zip(&self.std) {
            *o = (v as f64 - m) / s;
        }
    }

    pub fn denormalize_row(&self, x: &[f64], out: &mut [f32]) {
        for (((o, &v), m), s) in out.iter_mut().zip(x).zip(&self.mean).zip(&self.std) {
            *o = (v * s + m) as f32;
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::Shape(format!(
                "batch has {d} columns, statistics have {}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Welford accumulation over the first `max_samples` rows of the stream.
pub fn compute_norm_stats<I, B>(stream: I, max_samples: usize) -> Result<NormStats>
where
    I: IntoIterator<Item = B>,
    B: Borrow<ActivationBatch>,
{
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    let mut n = 0usize;
    'outer: for batch in stream {
        let batch = batch.borrow();
        if mean.is_empty() {
            mean = vec![0.0; batch.dim()];
            m2 = vec![0.0; batch.dim()];
        } else if batch.dim() != mean.len() {
            return Err(Error::Shape(format!(
                "batch width {} differs from stream width {}",
                batch.dim(),
                mean.len()
            )));
        }
        for row in batch.rows().rows() {
            if n >= max_samples {
                break 'outer;
            }
            n += 1;
            let inv = 1.0 / n as f64;
            for ((&x, mu), acc) in row.iter().zip(mean.iter_mut()).zip(m2.iter_mut()) {
                if !x.is_finite() {
                    return Err(Error::NonFinite("normalization input".into()));
                }
                let x = x as f64;
                let delta = x - *mu;
                *mu += delta * inv;
                *acc += delta * (x - *mu);
            }
        }
    }
    if n < 2 {
        return Err(Error::Empty(format!(
            "need at least 2 rows for normalization statistics, got {n}"
        )));
    }
    let std = m2
        .iter()
        .map(|&s| (s / n as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormStats {
        mean,
        std,
        sample_count: n,
    })
}

/// `(x - mean) / std` per column.
pub fn normalize(batch: &ActivationBatch, stats: &NormStats) -> Result<ActivationBatch> {
    stats.check_dim(batch.dim())?;
    let mut out = Array2::<f32>::zeros(batch.rows().dim());
    let mut buf = vec![0.0f64; batch.dim()];
    for (row, mut o) in batch.rows().rows().into_iter().zip(out.rows_mut()) {
        stats.normalize_row(row.as_slice().unwrap_or(&row.to_vec()), &mut buf);
        for (dst, &v) in o.iter_mut().zip(&buf) {
            *dst = v as f32;
        }
    }
    ActivationBatch::new(out, batch.meta.clone())
}

/// Inverse of [`normalize`].
pub fn denormalize(batch: &ActivationBatch, stats: &NormStats) -> Result<ActivationBatch> {
    stats.check_dim(batch.dim())?;
    let mut out = batch.rows().clone();
    for mut row in out.rows_mut() {
        for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v as f64 * s + m) as f32;
        }
    }
    ActivationBatch::new(out, batch.meta.clone())
}
