//! TopK sparse autoencoder.
//!
//! `z = TopK(W_enc x̂ + b_enc, k)` and `x̂_rec = W_dec z + b_dec`, where `x̂` is
//! the activation normalized with the SAE's [`NormStats`]. Parameters are kept
//! in f64; on disk they are FGT1 float32 tensors plus a JSON manifest.
//!
//! TopK keeps the k largest pre-activations as they are (no ReLU); ties are
//! broken towards the lower feature index.

mod eval;
mod train;

pub use eval::{evaluate_sae, SaeEvalReport};
pub use train::{
    cycle_batches, loss_and_grads, resample_dead, train_sae, AdamState, LrSchedule,
    SaeGrads, TrainConfig, TrainLog, TrainLogEntry, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
    RESAMPLE_ENCODER_SCALE,
};

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{self, Meta, NormStats, TensorFile};

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    /// d_sae x d
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    /// d x d_sae; column i is feature i's decoder direction.
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
    pub k: usize,
    pub seed: u64,
}

/// Sparse code: ascending feature indices and their values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseCode {
    pub fn nnz(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    pub fn to_dense(&self, d_sae: usize) -> Vec<f64> {
        let mut z = vec![0.0; d_sae];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            z[i] = v;
        }
        z
    }

    pub fn from_dense(z: &[f64]) -> Self {
        let (indices, values) = z
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        Self { indices, values }
    }

    /// Zeroes feature `f` if present.
    pub fn ablate(&mut self, f: usize) {
        if let Ok(pos) = self.indices.binary_search(&f) {
            self.values[pos] = 0.0;
        }
    }
}

/// Indices of the `k` largest entries (ties to the lower index), ascending.
pub fn top_k_indices(pre: &[f64], k: usize) -> Vec<usize> {
    let n = pre.len();
    if k >= n {
        return (0..n).collect();
    }
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering { pre[*b].total_cmp(&pre[*a]).then(a.cmp(b)) };
    idx.select_nth_unstable_by(k - 1, cmp);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SaeManifest {
    k: usize,
    d: usize,
    d_sae: usize,
    seed: u64,
}

impl SaeModel {
    /// Decoder columns are unit-norm Gaussian directions, `W_enc = W_decᵀ`,
    /// biases zero.
    pub fn init(d: usize, expansion: usize, k: usize, seed: u64) -> Result<Self> {
        if d == 0 || expansion == 0 {
            return Err(Error::InvalidArgument(format!(
                "d ({d}) and expansion ({expansion}) must be positive"
            )));
        }
        let d_sae = d * expansion;
        if k == 0 || k > d_sae {
            return Err(Error::InvalidArgument(format!("k = {k} outside 1..={d_sae}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w_dec = Array2::<f64>::zeros((d, d_sae));
        for mut col in w_dec.columns_mut() {
            loop {
                col.iter_mut()
                    .for_each(|v| *v = StandardNormal.sample(&mut rng));
                let norm = col.dot(&col).sqrt();
                if norm > 1e-12 {
                    col.mapv_inplace(|v| v / norm);
                    break;
                }
            }
        }
        Ok(Self {
            w_enc: w_dec.t().to_owned(),
            b_enc: Array1::zeros(d_sae),
            w_dec,
            b_dec: Array1::zeros(d),
            k,
            seed,
        })
    }

    pub fn from_parts(
        w_enc: Array2<f64>,
        b_enc: Array1<f64>,
        w_dec: Array2<f64>,
        b_dec: Array1<f64>,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        let (d_sae, d) = w_enc.dim();
        if w_dec.dim() != (d, d_sae) || b_enc.len() != d_sae || b_dec.len() != d {
            return Err(Error::Shape(format!(
                "inconsistent SAE parts: w_enc {:?}, b_enc {}, w_dec {:?}, b_dec {}",
                w_enc.dim(),
                b_enc.len(),
                w_dec.dim(),
                b_dec.len()
            )));
        }
        if k == 0 || k > d_sae {
            return Err(Error::InvalidArgument(format!("k = {k} outside 1..={d_sae}")));
        }
        let all_finite = w_enc.iter().chain(&b_enc).chain(&w_dec).chain(&b_dec).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("SAE parameters".into()));
        }
        Ok(Self {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            k,
            seed,
        })
    }

    pub fn d(&self) -> usize {
        self.w_dec.nrows()
    }

    pub fn d_sae(&self) -> usize {
        self.w_dec.ncols()
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.d() {
            return Err(Error::Shape(format!("input length {len}, SAE expects {}", self.d())));
        }
        Ok(())
    }

    pub fn pre_activations(&self, x_hat: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x_hat.len())?;
        Ok(self
            .w_enc
            .rows()
            .into_iter()
            .zip(&self.b_enc)
            .map(|(row, b)| row.iter().zip(x_hat).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect())
    }

    pub fn encode(&self, x_hat: &[f64]) -> Result<SparseCode> {
        if x_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder input".into()));
        }
        let pre = self.pre_activations(x_hat)?;
        let indices = top_k_indices(&pre, self.k);
        let values = indices.iter().map(|&i| pre[i]).collect();
        Ok(SparseCode { indices, values })
    }

    pub fn decode(&self, z: &SparseCode) -> Result<Vec<f64>> {
        let d_sae = self.d_sae();
        if let Some(&bad) = z.indices.iter().find(|&&i| i >= d_sae) {
            return Err(Error::Shape(format!("code index {bad} >= d_sae {d_sae}")));
        }
        let mut out = self.b_dec.to_vec();
        for (&i, &v) in z.indices.iter().zip(&z.values) {
            if v == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.w_dec.column(i)) {
                *o += v * w;
            }
        }
        Ok(out)
    }

    /// Dense-code decode; `z.len()` must equal `d_sae`.
    pub fn decode_dense(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.d_sae() {
            return Err(Error::Shape(format!("code length {}, d_sae {}", z.len(), self.d_sae())));
        }
        self.decode(&SparseCode::from_dense(z))
    }

    /// Pre-activations for a batch of normalized rows (B x d_sae).
    pub(crate) fn pre_activations_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut pre = x.dot(&self.w_enc.t());
        pre.rows_mut()
            .into_iter()
            .for_each(|mut r| r += &self.b_enc);
        pre
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let to32 = |a: &Array2<f64>| a.mapv(|v| v as f32);
        let vec32 = |a: &Array1<f64>| a.iter().map(|&v| v as f32).collect::<Vec<_>>();
        let meta = |name: &str| Meta::from([("param".to_string(), name.to_string())]);
        tensorio::write_tensor_file(dir.join("w_enc.fgt"), &TensorFile::from_matrix(&to32(&self.w_enc), meta("w_enc")))?;
        tensorio::write_tensor_file(dir.join("b_enc.fgt"), &TensorFile::from_vector(&vec32(&self.b_enc), meta("b_enc")))?;
        tensorio::write_tensor_file(dir.join("w_dec.fgt"), &TensorFile::from_matrix(&to32(&self.w_dec), meta("w_dec")))?;
        tensorio::write_tensor_file(dir.join("b_dec.fgt"), &TensorFile::from_vector(&vec32(&self.b_dec), meta("b_dec")))?;
        let manifest = SaeManifest {
            k: self.k,
            d: self.d(),
            d_sae: self.d_sae(),
            seed: self.seed,
        };
        tensorio::atomic_write(&dir.join("sae.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join("sae.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: SaeManifest = serde_json::from_str(&text)?;
        let mat = |name: &str| -> Result<Array2<f64>> {
            Ok(tensorio::read_tensor_file(dir.join(name))?.into_matrix()?.mapv(|v| v as f64))
        };
        let vec = |name: &str| -> Result<Array1<f64>> {
            let t = tensorio::read_tensor_file(dir.join(name))?;
            Ok(t.data.iter().map(|&v| v as f64).collect())
        };
        let sae = Self::from_parts(mat("w_enc.fgt")?, vec("b_enc.fgt")?, mat("w_dec.fgt")?, vec("b_dec.fgt")?, m.k, m.seed)?;
        if sae.d() != m.d || sae.d_sae() != m.d_sae {
            return Err(Error::Format(format!(
                "SAE manifest says d={} d_sae={}, tensors are d={} d_sae={}",
                m.d,
                m.d_sae,
                sae.d(),
                sae.d_sae()
            )));
        }
        Ok(sae)
    }
}

/// Saves an SAE and its normalization statistics side by side.
pub fn save_with_stats(sae: &SaeModel, stats: &NormStats, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    sae.save(dir)?;
    tensorio::atomic_write(&dir.join("norm_stats.json"), serde_json::to_string(stats)?.as_bytes())
}

pub fn load_with_stats(dir: impl AsRef<Path>) -> Result<(SaeModel, NormStats)> {
    let dir = dir.as_ref();
    let sae = SaeModel::load(dir)?;
    let p = dir.join("norm_stats.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok((sae, serde_json::from_str(&text)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn padded_identity() -> SaeModel {
        let d = 4;
        let d_sae = 8;
        let mut w_enc = Array2::zeros((d_sae, d));
        let mut w_dec = Array2::zeros((d, d_sae));
        for i in 0..d {
            w_enc[[i, i]] = 1.0;
            w_dec[[i, i]] = 1.0;
        }
        SaeModel::from_parts(w_enc, Array1::zeros(d_sae), w_dec, Array1::zeros(d), 2, 0).unwrap()
    }

    #[test]
    fn init_shapes_and_expansion() {
        let sae = SaeModel::init(4, 8, 4, 1).unwrap();
        assert_eq!(sae.d_sae(), 32);
        assert_eq!(sae.w_enc.dim(), (32, 4));
        assert_eq!(sae.w_enc, sae.w_dec.t().to_owned());
        for col in sae.w_dec.columns() {
            assert!((col.dot(&col).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn init_deterministic_and_validates_k() {
        assert_eq!(SaeModel::init(6, 2, 3, 9).unwrap(), SaeModel::init(6, 2, 3, 9).unwrap());
        assert_ne!(SaeModel::init(6, 2, 3, 9).unwrap(), SaeModel::init(6, 2, 3, 10).unwrap());
        assert!(SaeModel::init(4, 2, 9, 0).is_err());
        assert!(SaeModel::init(4, 2, 0, 0).is_err());
    }

    #[test]
    fn encode_keeps_two_largest() {
        let sae = padded_identity();
        let z = sae.encode(&[3.0, 1.0, 2.0, 0.0]).unwrap();
        assert_eq!(z.indices, vec![0, 2]);
        assert_eq!(z.values, vec![3.0, 2.0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[1.0, 2.0, 2.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.0; 5], 3), vec![0, 1, 2]);
    }

    #[test]
    fn full_k_is_identity_on_preactivations() {
        let mut sae = SaeModel::init(3, 2, 6, 4).unwrap();
        sae.b_enc = Array1::from(vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.6]);
        let x = [0.5, -1.0, 2.0];
        let z = sae.encode(&x).unwrap();
        assert_eq!(z.to_dense(6), sae.pre_activations(&x).unwrap());
    }

    #[test]
    fn topk_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let pre: Vec<f64> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
            let k = rng.random_range(1..=40);
            let mut order: Vec<usize> = (0..40).collect();
            order.sort_by(|a, b| pre[*b].partial_cmp(&pre[*a]).unwrap());
            let mut expect = order[..k].to_vec();
            expect.sort();
            let got = top_k_indices(&pre, k);
            assert_eq!(got, expect);
            assert_eq!(got.len(), k);
        }
    }

    #[test]
    fn decode_zero_and_basis() {
        let sae = SaeModel::init(5, 2, 3, 2).unwrap();
        let mut sae = sae;
        sae.b_dec = Array1::from(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let zero = sae.decode_dense(&[0.0; 10]).unwrap();
        assert_eq!(zero, sae.b_dec.to_vec());
        let mut e = vec![0.0; 10];
        e[7] = 1.0;
        let col: Vec<f64> = sae.w_dec.column(7).iter().zip(&sae.b_dec).map(|(w, b)| w + b).collect();
        assert_eq!(sae.decode_dense(&e).unwrap(), col);
    }

    #[test]
    fn decode_matches_dense_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sae = SaeModel::init(6, 3, 4, 3).unwrap();
        let z: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dense = sae.w_dec.dot(&Array1::from(z.clone())) + &sae.b_dec;
        for (a, b) in sae.decode_dense(&z).unwrap().iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_errors() {
        let sae = padded_identity();
        assert!(matches!(sae.encode(&[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(matches!(sae.decode_dense(&[0.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn save_load_roundtrip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let sae = SaeModel::init(4, 2, 3, 8).unwrap();
        sae.save(dir.path()).unwrap();
        let back = SaeModel::load(dir.path()).unwrap();
        assert_eq!(back.k, 3);
        assert_eq!(back.seed, 8);
        for (a, b) in back.w_dec.iter().zip(sae.w_dec.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        back.save(dir.path()).unwrap();
        assert_eq!(SaeModel::load(dir.path()).unwrap(), back);
    }
}
