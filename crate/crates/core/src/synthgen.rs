//! Ground-truth sparse dictionaries and samples drawn from them.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matching::{cosine_matrix, dictionary_from_sae, one_way_rate, Dictionary};
use crate::sae::SaeModel;
use crate::tensorio::{ActivationBatch, Meta, NormStats};

pub const DEFAULT_ZIPF_EXPONENT: f64 = 1.1;
/// Offset added to |N(0, 1)| coefficients.
pub const COEFF_OFFSET: f64 = 0.1;
// Distinct ChaCha streams so equal seeds across generators never correlate.
const DICT_STREAM: u64 = 0x5D1C;
const SAMPLE_STREAM: u64 = 0x5A3F;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FreqProfile {
    Uniform,
    Zipf { exponent: f64 },
}

impl Default for FreqProfile {
    fn default() -> Self {
        FreqProfile::Zipf {
            exponent: DEFAULT_ZIPF_EXPONENT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum CoeffDist {
    /// |N(0, 1)| + 0.1
    #[default]
    HalfNormal,
    Constant(f64),
}

impl CoeffDist {
    fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            CoeffDist::HalfNormal => {
                let z: f64 = StandardNormal.sample(rng);
                z.abs() + COEFF_OFFSET
            }
            CoeffDist::Constant(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthDictionary {
    /// d x n_atoms, unit columns.
    pub atoms: Array2<f64>,
    pub atom_frequencies: Vec<f64>,
    pub seed: u64,
}

impl GroundTruthDictionary {
    pub fn d(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.ncols()
    }

    /// Atom directions after per-dimension normalization by `stats`, where
    /// `x̂ = (x - mean) / std` maps direction `a` to `a / std`.
    pub fn dictionary(&self, stats: Option<&NormStats>) -> Result<Dictionary> {
        let mut cols = self.atoms.clone();
        if let Some(st) = stats {
            if st.dim() != self.d() {
                return Err(Error::Shape(format!("stats width {} vs d {}", st.dim(), self.d())));
            }
            for (mut row, s) in cols.rows_mut().into_iter().zip(&st.std) {
                row /= *s;
            }
        }
        Dictionary::from_columns(cols.view(), Meta::from([("source".into(), "ground_truth".into())]))
    }
}

pub fn frequencies(n_atoms: usize, profile: FreqProfile) -> Result<Vec<f64>> {
    let raw: Vec<f64> = match profile {
        FreqProfile::Uniform => vec![1.0; n_atoms],
        FreqProfile::Zipf { exponent } => {
            if !exponent.is_finite() || exponent < 0.0 {
                return Err(Error::InvalidArgument(format!("zipf exponent {exponent}")));
            }
            (1..=n_atoms).map(|r| (r as f64).powf(-exponent)).collect()
        }
    };
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Random unit atoms; atom `i` has rank `i + 1` under a zipf profile.
pub fn gen_dictionary(d: usize, n_atoms: usize, profile: FreqProfile, seed: u64) -> Result<GroundTruthDictionary> {
    if d == 0 || n_atoms == 0 {
        return Err(Error::InvalidArgument(format!("d={d}, n_atoms={n_atoms} must be positive")));
    }
    let atom_frequencies = frequencies(n_atoms, profile)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DICT_STREAM);
    let mut atoms = Array2::<f64>::zeros((d, n_atoms));
    for mut col in atoms.columns_mut() {
        loop {
            col.mapv_inplace(|_| StandardNormal.sample(&mut rng));
            let n = col.dot(&col).sqrt();
            if n > 1e-8 {
                col /= n;
                break;
            }
        }
    }
    Ok(GroundTruthDictionary {
        atoms,
        atom_frequencies,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub k_active: usize,
    pub n: usize,
    pub noise_sigma: f64,
    pub coeff: CoeffDist,
}

/// Generated samples with the active atoms of every row.
#[derive(Debug, Clone)]
pub struct SyntheticSamples {
    pub batch: ActivationBatch,
    pub active: Vec<Vec<usize>>,
}

/// `k_active` distinct atoms per sample, drawn by frequency (duplicates are
/// redrawn), with positive coefficients and isotropic Gaussian noise.
pub fn gen_samples(
    dict: &GroundTruthDictionary,
    k_active: usize,
    n: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<ActivationBatch> {
    let cfg = SampleConfig {
        k_active,
        n,
        noise_sigma,
        coeff: CoeffDist::default(),
    };
    Ok(gen_samples_traced(dict, &cfg, seed)?.batch)
}

pub fn gen_samples_traced(dict: &GroundTruthDictionary, cfg: &SampleConfig, seed: u64) -> Result<SyntheticSamples> {
    let n_atoms = dict.n_atoms();
    if cfg.k_active == 0 || cfg.k_active > n_atoms {
        return Err(Error::InvalidArgument(format!(
            "k_active {} must be in 1..={n_atoms}",
            cfg.k_active
        )));
    }
    if cfg.n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    if !cfg.noise_sigma.is_finite() || cfg.noise_sigma < 0.0 {
        return Err(Error::InvalidArgument(format!("noise_sigma {}", cfg.noise_sigma)));
    }
    if let CoeffDist::Constant(c) = cfg.coeff {
        if !c.is_finite() {
            return Err(Error::InvalidArgument(format!("coefficient {c}")));
        }
    }
    let weights = WeightedIndex::new(&dict.atom_frequencies)
        .map_err(|e| Error::InvalidArgument(format!("atom frequencies: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLE_STREAM);
    let d = dict.d();
    let mut rows = Array2::<f32>::zeros((cfg.n, d));
    let mut active = Vec::with_capacity(cfg.n);
    let mut used = vec![false; n_atoms];
    let mut x = vec![0.0f64; d];
    for mut row in rows.rows_mut() {
        let mut chosen = Vec::with_capacity(cfg.k_active);
        while chosen.len() < cfg.k_active {
            let a = weights.sample(&mut rng);
            if !used[a] {
                used[a] = true;
                chosen.push(a);
            }
        }
        x.iter_mut().for_each(|v| *v = 0.0);
        for &a in &chosen {
            let c = cfg.coeff.sample(&mut rng);
            for (v, w) in x.iter_mut().zip(dict.atoms.column(a)) {
                *v += c * w;
            }
            used[a] = false;
        }
        if cfg.noise_sigma > 0.0 {
            for v in x.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += cfg.noise_sigma * z;
            }
        }
        for (o, v) in row.iter_mut().zip(&x) {
            *o = *v as f32;
        }
        chosen.sort_unstable();
        active.push(chosen);
    }
    let meta = Meta::from([
        ("source".into(), "synthetic".into()),
        ("seed".into(), seed.to_string()),
        ("k_active".into(), cfg.k_active.to_string()),
    ]);
    Ok(SyntheticSamples {
        batch: ActivationBatch::new(rows, meta)?,
        active,
    })
}

/// Fraction of true atoms whose best SAE decoder direction has cosine ≥ τ.
/// Pass the SAE's normalization stats to compare in its normalized space.
pub fn recovery_score(sae: &SaeModel, truth: &GroundTruthDictionary, tau: f64, stats: Option<&NormStats>) -> Result<f64> {
    if sae.d() != truth.d() {
        return Err(Error::Shape(format!("SAE width {} vs truth width {}", sae.d(), truth.d())));
    }
    let sim = cosine_matrix(&truth.dictionary(stats)?, &dictionary_from_sae(sae)?, Exec::default())?;
    Ok(one_way_rate(sim.view(), tau)?.rate)
}
