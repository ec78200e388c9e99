use std::collections::VecDeque;
use std::path::PathBuf;

use ndarray::{s, Array2};

use super::{read_tensor, ActivationBatch};
use crate::error::{Error, Result};

/// Splits a batch into consecutive chunks of `size` rows; the last chunk may
/// be shorter.
pub fn chunk_batches(batch: &ActivationBatch, size: usize) -> Vec<ActivationBatch> {
    assert!(size > 0, "chunk size must be positive");
    let n = batch.n_rows();
    (0..n)
        .step_by(size)
        .map(|start| {
            let end = (start + size).min(n);
            let rows = batch.rows().slice(s![start..end, ..]).to_owned();
            ActivationBatch::new(rows, batch.meta.clone()).expect("sub-batch of a finite batch")
        })
        .collect()
}

/// Streams fixed-size batches from a sequence of FGT1 shards.
///
/// Rows carry over shard boundaries; the final partial batch is yielded.
pub struct BatchReader {
    paths: VecDeque<PathBuf>,
    batch_size: usize,
    pending: Vec<f32>,
    width: Option<usize>,
    done: bool,
}

impl BatchReader {
    pub fn new(paths: impl IntoIterator<Item = PathBuf>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(Self {
            paths: paths.into_iter().collect(),
            batch_size,
            pending: Vec::new(),
            width: None,
            done: false,
        })
    }

    fn pending_rows(&self) -> usize {
        self.width.map_or(0, |w| self.pending.len() / w.max(1))
    }

    fn emit(&mut self, rows: usize) -> Result<ActivationBatch> {
        let w = self.width.unwrap_or(0);
        let rest = self.pending.split_off(rows * w);
        let data = std::mem::replace(&mut self.pending, rest);
        let m = Array2::from_shape_vec((rows, w), data).map_err(|e| Error::Shape(e.to_string()))?;
        ActivationBatch::from_rows(m)
    }
}

impl Iterator for BatchReader {
    type Item = Result<ActivationBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        while self.pending_rows() < self.batch_size {
            let Some(path) = self.paths.pop_front() else {
                break;
            };
            let shard = match read_tensor(&path) {
                Ok(b) => b,
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            };
            match self.width {
                None => self.width = Some(shard.dim()),
                Some(w) if w != shard.dim() => {
                    self.done = true;
                    return Some(Err(Error::Shape(format!(
                        "shard {} has width {}, expected {w}",
                        path.display(),
                        shard.dim()
                    ))));
                }
                _ => {}
            }
            self.pending.extend(shard.rows().iter().copied());
        }
        let available = self.pending_rows();
        if available == 0 {
            self.done = true;
            return None;
        }
        Some(self.emit(available.min(self.batch_size)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::write_tensor;

    #[test]
    fn reader_carries_rows_across_shards_and_keeps_remainder() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        let mut value = 0.0f32;
        for (i, n) in [3usize, 4, 2].iter().enumerate() {
            let m = Array2::from_shape_fn((*n, 2), |_| {
                value += 1.0;
                value
            });
            let p = dir.path().join(format!("s{i}.fgt"));
            write_tensor(&p, &ActivationBatch::from_rows(m).unwrap()).unwrap();
            paths.push(p);
        }
        let batches: Vec<_> = BatchReader::new(paths, 4)
            .unwrap()
            .collect::<Result<Vec<_>>>()
            .unwrap();
        let sizes: Vec<_> = batches.iter().map(|b| b.n_rows()).collect();
        assert_eq!(sizes, vec![4, 4, 1]);
        let flat: Vec<f32> = batches.iter().flat_map(|b| b.rows().iter().copied().collect::<Vec<_>>()).collect();
        assert_eq!(flat, (1..=18).map(|v| v as f32).collect::<Vec<_>>());
    }

    #[test]
    fn chunks_keep_partial_tail() {
        let b = ActivationBatch::from_rows(Array2::zeros((10, 3))).unwrap();
        let c = chunk_batches(&b, 4);
        assert_eq!(c.iter().map(|b| b.n_rows()).collect::<Vec<_>>(), vec![4, 4, 2]);
    }
}
