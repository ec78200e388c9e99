use std::borrow::Borrow;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::train::reconstruct;
use super::SaeModel;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensorio::{ActivationBatch, NormStats};

/// Row-chunk size for partial sums; fixed so results do not depend on the
/// number of threads.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeEvalReport {
    pub fvu: f64,
    pub l0: f64,
    pub firing_rate: Vec<f64>,
    pub alive_count: usize,
    pub n_tokens: usize,
}

#[derive(Default)]
struct Partial {
    sq_err: f64,
    sum_x: Vec<f64>,
    sum_x2: f64,
    nnz: u64,
    fires: Vec<u64>,
}

impl Partial {
    fn merge(&mut self, o: Partial) {
        self.sq_err += o.sq_err;
        self.sum_x2 += o.sum_x2;
        self.nnz += o.nnz;
        if self.sum_x.is_empty() {
            self.sum_x = o.sum_x;
            self.fires = o.fires;
        } else {
            self.sum_x.iter_mut().zip(o.sum_x).for_each(|(a, b)| *a += b);
            self.fires.iter_mut().zip(o.fires).for_each(|(a, b)| *a += b);
        }
    }
}

fn chunk_partial(sae: &SaeModel, x: &Array2<f64>) -> Partial {
    let (recon, supports, codes) = reconstruct(sae, x.view());
    let mut p = Partial {
        sum_x: vec![0.0; sae.d()],
        fires: vec![0; sae.d_sae()],
        ..Default::default()
    };
    for (row, rec) in x.rows().into_iter().zip(recon.rows()) {
        for ((&v, &r), sx) in row.iter().zip(rec.iter()).zip(p.sum_x.iter_mut()) {
            p.sq_err += (v - r) * (v - r);
            p.sum_x2 += v * v;
            *sx += v;
        }
    }
    for (support, vals) in supports.iter().zip(&codes) {
        for (&i, &v) in support.iter().zip(vals) {
            if v != 0.0 {
                p.fires[i] += 1;
                p.nnz += 1;
            }
        }
    }
    p
}

/// FVU, L0 and per-feature firing rates over an evaluation stream.
///
/// `stats` may come from a different model than `eval_data`; applying a
/// dense-trained SAE to pruned activations is exactly that case.
pub fn evaluate_sae<I, B>(sae: &SaeModel, eval_data: I, stats: &NormStats, exec: Exec) -> Result<SaeEvalReport>
where
    I: IntoIterator<Item = B>,
    B: Borrow<ActivationBatch>,
{
    if stats.dim() != sae.d() {
        return Err(Error::Shape(format!(
            "statistics width {} != SAE d {}",
            stats.dim(),
            sae.d()
        )));
    }
    let mut total = Partial::default();
    let mut n = 0usize;
    for batch in eval_data {
        let batch = batch.borrow();
        if batch.dim() != sae.d() {
            return Err(Error::Shape(format!("eval width {} != SAE d {}", batch.dim(), sae.d())));
        }
        let rows = batch.n_rows();
        n += rows;
        let n_chunks = rows.div_ceil(EVAL_CHUNK);
        let partials = exec.map(n_chunks, |c| {
            let start = c * EVAL_CHUNK;
            let end = (start + EVAL_CHUNK).min(rows);
            let raw = batch.rows().slice(s![start..end, ..]);
            let mut x = Array2::<f64>::zeros(raw.raw_dim());
            for (src, mut dst) in raw.rows().into_iter().zip(x.rows_mut()) {
                for (((o, &v), m), sd) in dst.iter_mut().zip(src.iter()).zip(&stats.mean).zip(&stats.std) {
                    *o = (v as f64 - m) / sd;
                }
            }
            chunk_partial(sae, &x)
        });
        for p in partials {
            total.merge(p);
        }
    }
    if n == 0 {
        return Err(Error::Empty("evaluation stream has no rows".into()));
    }
    let nf = n as f64;
    let mean_sq: f64 = total.sum_x.iter().map(|s| s * s).sum::<f64>() / nf;
    let variance = total.sum_x2 - mean_sq;
    if variance.is_nan() || variance <= 1e-12 * total.sum_x2.max(1.0) {
        return Err(Error::Degenerate("evaluation set has zero variance".into()));
    }
    let firing_rate: Vec<f64> = total.fires.iter().map(|&c| c as f64 / nf).collect();
    let alive_count = firing_rate.iter().filter(|r| **r > 0.0).count();
    Ok(SaeEvalReport {
        fvu: total.sq_err / variance,
        l0: total.nnz as f64 / nf,
        firing_rate,
        alive_count,
        n_tokens: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::chunk_batches;
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn copier(d: usize) -> SaeModel {
        let mut w = Array2::zeros((2 * d, d));
        let mut wd = Array2::zeros((d, 2 * d));
        for i in 0..d {
            w[[i, i]] = 1.0;
            wd[[i, i]] = 1.0;
        }
        SaeModel::from_parts(w, Array1::zeros(2 * d), wd, Array1::zeros(d), 2 * d, 0).unwrap()
    }

    fn random_batch(seed: u64, n: usize, d: usize) -> ActivationBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ActivationBatch::from_rows(Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0f32..2.0))).unwrap()
    }

    #[test]
    fn copier_has_zero_fvu() {
        let b = random_batch(1, 300, 3);
        let r = evaluate_sae(&copier(3), [&b], &NormStats::identity(3), Exec::default()).unwrap();
        assert!(r.fvu < 1e-12);
    }

    #[test]
    fn mean_predictor_has_unit_fvu() {
        let b = random_batch(2, 500, 4);
        let stats = crate::tensorio::compute_norm_stats([&b], usize::MAX).unwrap();
        let d = 4;
        // Decoder ignores the code; b_dec is the normalized eval mean (zero).
        let sae = SaeModel::from_parts(
            Array2::zeros((8, d)),
            Array1::zeros(8),
            Array2::zeros((d, 8)),
            Array1::zeros(d),
            2,
            0,
        )
        .unwrap();
        let r = evaluate_sae(&sae, [&b], &stats, Exec::default()).unwrap();
        assert!((r.fvu - 1.0).abs() < 1e-9, "{}", r.fvu);
    }

    #[test]
    fn l0_and_alive_invariants() {
        let b = random_batch(3, 700, 5);
        let sae = SaeModel::init(5, 4, 3, 1).unwrap();
        let r = evaluate_sae(&sae, chunk_batches(&b, 100), &NormStats::identity(5), Exec::default()).unwrap();
        assert!(r.l0 <= 3.0);
        assert!(r.firing_rate.iter().all(|f| (0.0..=1.0).contains(f)));
        assert_eq!(r.alive_count, r.firing_rate.iter().filter(|f| **f > 0.0).count());
        assert_eq!(r.n_tokens, 700);
    }

    #[test]
    fn fvu_invariant_to_stream_order_and_exec() {
        let b = random_batch(4, 1000, 6);
        let sae = SaeModel::init(6, 2, 3, 2).unwrap();
        let stats = crate::tensorio::compute_norm_stats([&b], usize::MAX).unwrap();
        let mut chunks = chunk_batches(&b, 128);
        let a = evaluate_sae(&sae, &chunks, &stats, Exec::Parallel).unwrap();
        let s = evaluate_sae(&sae, &chunks, &stats, Exec::Sequential).unwrap();
        assert_eq!(a, s);
        chunks.reverse();
        let r = evaluate_sae(&sae, &chunks, &stats, Exec::Parallel).unwrap();
        assert!((a.fvu - r.fvu).abs() < 1e-9);
        assert_eq!(a.firing_rate, r.firing_rate);
    }

    #[test]
    fn empty_and_constant_streams_error() {
        let sae = copier(2);
        let none: Vec<ActivationBatch> = Vec::new();
        assert!(matches!(evaluate_sae(&sae, &none, &NormStats::identity(2), Exec::default()), Err(Error::Empty(_))));
        let c = ActivationBatch::from_rows(Array2::from_elem((10, 2), 1.0f32)).unwrap();
        assert!(matches!(evaluate_sae(&sae, [&c], &NormStats::identity(2), Exec::default()), Err(Error::Degenerate(_))));
    }
}
