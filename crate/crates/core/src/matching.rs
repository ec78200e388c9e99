//! Decoder-space dictionary comparison.
//!
//! Three rates at a threshold τ, for dictionaries A (rows of the similarity
//! matrix) and B (columns):
//!
//! * one-way: A features whose best match in B has cosine ≥ τ;
//! * MNN: A features that are the best match of their own best match, ≥ τ;
//! * greedy: A features assigned when pairs are accepted in descending
//!   similarity with each index used at most once, ≥ τ.
//!
//! Argmax ties go to the lowest index; the greedy sort breaks ties by the
//! (row, column) pair. For every τ, `mnn <= greedy <= one_way`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::sae::SaeModel;
use crate::tensorio::Meta;

pub const TAU_GRID: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
pub const PRIMARY_TAU: f64 = 0.7;

const NORM_TOL: f64 = 1e-5;
const ROW_BLOCK: usize = 64;

/// Unit-norm feature directions, stored feature-major (n_features x d).
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Array2<f32>,
    pub source: Meta,
}

impl Dictionary {
    /// Normalizes the columns of a d x n matrix. Zero columns are an error
    /// listing every offending index.
    pub fn from_columns(columns: ArrayView2<f64>, source: Meta) -> Result<Self> {
        let (d, n) = columns.dim();
        let mut atoms = Array2::<f32>::zeros((n, d));
        let mut zero = Vec::new();
        for (i, col) in columns.columns().into_iter().enumerate() {
            let norm = col.dot(&col).sqrt();
            if !norm.is_finite() || norm <= 0.0 {
                zero.push(i);
                continue;
            }
            for (dst, &v) in atoms.row_mut(i).iter_mut().zip(col.iter()) {
                *dst = (v / norm) as f32;
            }
        }
        if !zero.is_empty() {
            return Err(Error::Degenerate(format!("zero decoder columns at indices {zero:?}")));
        }
        Ok(Self { atoms, source })
    }

    /// Checks unit norms of already-normalized feature rows (n x d).
    pub fn from_unit_rows(atoms: Array2<f32>, source: Meta) -> Result<Self> {
        for (i, row) in atoms.rows().into_iter().enumerate() {
            let n: f64 = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if (n - 1.0).abs() > NORM_TOL {
                return Err(Error::InvalidArgument(format!("atom {i} has norm {n}")));
            }
        }
        Ok(Self { atoms, source })
    }

    pub fn n_features(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn d(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn atom(&self, i: usize) -> ArrayView1<'_, f32> {
        self.atoms.row(i)
    }

    pub fn atoms(&self) -> &Array2<f32> {
        &self.atoms
    }
}

/// Unit-normalized decoder columns; `b_dec` plays no part.
pub fn dictionary_from_sae(sae: &SaeModel) -> Result<Dictionary> {
    let source = Meta::from([("seed".to_string(), sae.seed.to_string())]);
    Dictionary::from_columns(sae.w_dec.view(), source)
}

/// n_A x n_B cosine similarities, f64 accumulation per dot product, clamped
/// to [-1, 1].
pub fn cosine_matrix(a: &Dictionary, b: &Dictionary, exec: Exec) -> Result<Array2<f32>> {
    if a.d() != b.d() {
        return Err(Error::Shape(format!("dictionary widths {} and {}", a.d(), b.d())));
    }
    let (na, nb) = (a.n_features(), b.n_features());
    let mut sim = Array2::<f32>::zeros((na, nb));
    if na == 0 || nb == 0 {
        return Ok(sim);
    }
    let flat = sim.as_slice_mut().expect("standard layout");
    exec.for_each_chunk_mut(flat, ROW_BLOCK * nb, |blk, out| {
        for (r, row_out) in out.chunks_mut(nb).enumerate() {
            let ai = a.atom(blk * ROW_BLOCK + r);
            let ai = ai.as_slice().expect("contiguous atom");
            for (j, o) in row_out.iter_mut().enumerate() {
                let bj = b.atom(j);
                let dot: f64 = ai
                    .iter()
                    .zip(bj.as_slice().expect("contiguous atom"))
                    .map(|(&x, &y)| x as f64 * y as f64)
                    .sum();
                *o = dot.clamp(-1.0, 1.0) as f32;
            }
        }
    });
    Ok(sim)
}

fn check_sim(sim: ArrayView2<f32>) -> Result<()> {
    if sim.nrows() == 0 || sim.ncols() == 0 {
        return Err(Error::Empty("similarity matrix is empty".into()));
    }
    if sim.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    Ok(())
}

fn argmax(values: impl Iterator<Item = f32>) -> (usize, f32) {
    let mut best = (0usize, f32::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Best column (and its score) for every row.
pub fn best_per_row(sim: ArrayView2<f32>, exec: Exec) -> Vec<(usize, f32)> {
    exec.map(sim.nrows(), |i| argmax(sim.row(i).iter().copied()))
}

/// Best row for every column.
pub fn best_per_col(sim: ArrayView2<f32>, exec: Exec) -> Vec<(usize, f32)> {
    exec.map(sim.ncols(), |j| argmax(sim.column(j).iter().copied()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneWay {
    pub rate: f64,
    pub best: Vec<(usize, f32)>,
}

pub fn one_way_rate(sim: ArrayView2<f32>, tau: f64) -> Result<OneWay> {
    check_sim(sim)?;
    let best = best_per_row(sim, Exec::default());
    let hits = best.iter().filter(|(_, s)| *s as f64 >= tau).count();
    Ok(OneWay {
        rate: hits as f64 / sim.nrows() as f64,
        best,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mnn {
    pub rate: f64,
    pub matched: Vec<bool>,
    pub pairs: Vec<(usize, usize)>,
}

/// Mutual best partner of every row, ignoring the threshold.
fn mutual_partners(rows: &[(usize, f32)], cols: &[(usize, f32)]) -> Vec<Option<usize>> {
    rows.iter()
        .enumerate()
        .map(|(i, &(j, _))| (cols[j].0 == i).then_some(j))
        .collect()
}

pub fn mnn_rate(sim: ArrayView2<f32>, tau: f64) -> Result<Mnn> {
    check_sim(sim)?;
    let exec = Exec::default();
    let rows = best_per_row(sim, exec);
    let cols = best_per_col(sim, exec);
    let partners = mutual_partners(&rows, &cols);
    let mut pairs = Vec::new();
    let matched: Vec<bool> = partners
        .iter()
        .enumerate()
        .map(|(i, p)| match p {
            Some(j) if rows[i].1 as f64 >= tau => {
                pairs.push((i, *j));
                true
            }
            _ => false,
        })
        .collect();
    Ok(Mnn {
        rate: pairs.len() as f64 / sim.nrows() as f64,
        matched,
        pairs,
    })
}

/// Greedy 1-to-1 acceptance over all pairs with similarity ≥ `tau`, in
/// descending similarity (ties by (row, column)). Returns accepted pairs in
/// acceptance order, i.e. by non-increasing score.
pub fn greedy_assignment(sim: ArrayView2<f32>, tau: f64, exec: Exec) -> Vec<(usize, usize, f32)> {
    let per_row = exec.map(sim.nrows(), |i| {
        sim.row(i)
            .iter()
            .enumerate()
            .filter(|(_, s)| **s as f64 >= tau)
            .map(|(j, s)| (i, j, *s))
            .collect::<Vec<_>>()
    });
    let mut cand: Vec<(usize, usize, f32)> = per_row.into_iter().flatten().collect();
    exec.sort_by(&mut cand, |a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut row_used = vec![false; sim.nrows()];
    let mut col_used = vec![false; sim.ncols()];
    let mut accepted = Vec::new();
    for (i, j, s) in cand {
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            accepted.push((i, j, s));
        }
    }
    accepted
}

#[derive(Debug, Clone, PartialEq)]
pub struct Greedy {
    pub rate: f64,
    pub assignment: Vec<Option<usize>>,
}

pub fn greedy_rate(sim: ArrayView2<f32>, tau: f64) -> Result<Greedy> {
    check_sim(sim)?;
    let accepted = greedy_assignment(sim, tau, Exec::default());
    let mut assignment = vec![None; sim.nrows()];
    for &(i, j, _) in &accepted {
        assignment[i] = Some(j);
    }
    Ok(Greedy {
        rate: accepted.len() as f64 / sim.nrows() as f64,
        assignment,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub thresholds: Vec<f64>,
    pub one_way: Vec<f64>,
    pub mnn: Vec<f64>,
    pub greedy: Vec<f64>,
    /// Best B index and cosine for every A feature.
    pub per_feature_best: Vec<(usize, f32)>,
    /// Whether each A feature is a mutual best match (at any threshold).
    pub mutual: Vec<bool>,
    /// MNN membership of each A feature, one vector per threshold.
    pub per_feature_mnn_at: Vec<Vec<bool>>,
}

impl MatchReport {
    pub fn n_features(&self) -> usize {
        self.per_feature_best.len()
    }

    /// MNN membership at any τ, not only those in the grid.
    pub fn mnn_at(&self, tau: f64) -> Vec<bool> {
        self.mutual
            .iter()
            .zip(&self.per_feature_best)
            .map(|(&m, &(_, s))| m && s as f64 >= tau)
            .collect()
    }

    pub fn rates_at(&self, tau: f64) -> Option<(f64, f64, f64)> {
        self.thresholds
            .iter()
            .position(|t| (t - tau).abs() < 1e-12)
            .map(|i| (self.one_way[i], self.mnn[i], self.greedy[i]))
    }

    /// `tau,one_way,mnn,greedy`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau,one_way,mnn,greedy\n");
        for i in 0..self.thresholds.len() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                self.thresholds[i], self.one_way[i], self.mnn[i], self.greedy[i]
            ));
        }
        s
    }

    /// `feature_id,best_match,score,mnn_at_0.7`
    pub fn per_feature_csv(&self) -> String {
        let mnn = self.mnn_at(PRIMARY_TAU);
        let mut s = String::from("feature_id,best_match,score,mnn_at_0.7\n");
        for (i, (&(j, score), m)) in self.per_feature_best.iter().zip(mnn).enumerate() {
            s.push_str(&format!("{i},{j},{score},{}\n", m as u8));
        }
        s
    }
}

/// All three rates on a τ grid from one pass over `sim`.
pub fn match_report(sim: ArrayView2<f32>, thresholds: &[f64], exec: Exec) -> Result<MatchReport> {
    check_sim(sim)?;
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("empty threshold grid".into()));
    }
    let n = sim.nrows() as f64;
    let rows = best_per_row(sim, exec);
    let cols = best_per_col(sim, exec);
    let mutual: Vec<bool> = mutual_partners(&rows, &cols).iter().map(Option::is_some).collect();
    let tau_min = thresholds.iter().copied().fold(f64::INFINITY, f64::min);
    let accepted = greedy_assignment(sim, tau_min, exec);

    let mut report = MatchReport {
        thresholds: thresholds.to_vec(),
        one_way: Vec::new(),
        mnn: Vec::new(),
        greedy: Vec::new(),
        per_feature_best: rows.clone(),
        mutual: mutual.clone(),
        per_feature_mnn_at: Vec::new(),
    };
    for &tau in thresholds {
        let one = rows.iter().filter(|(_, s)| *s as f64 >= tau).count();
        let mnn: Vec<bool> = mutual
            .iter()
            .zip(&rows)
            .map(|(&m, &(_, s))| m && s as f64 >= tau)
            .collect();
        // Decisions for pairs ≥ τ never depend on lower-scoring pairs.
        let greedy = accepted.iter().filter(|(_, _, s)| *s as f64 >= tau).count();
        report.one_way.push(one as f64 / n);
        report.mnn.push(mnn.iter().filter(|m| **m).count() as f64 / n);
        report.greedy.push(greedy as f64 / n);
        report.per_feature_mnn_at.push(mnn);
    }
    Ok(report)
}

pub fn match_dictionaries(a: &Dictionary, b: &Dictionary, thresholds: &[f64], exec: Exec) -> Result<MatchReport> {
    let sim = cosine_matrix(a, b, exec)?;
    match_report(sim.view(), thresholds, exec)
}

/// Dense A -> pruned B comparison, and the reverse B -> A direction.
pub fn survival_report(dense: &SaeModel, pruned: &SaeModel, thresholds: &[f64], exec: Exec) -> Result<MatchReport> {
    if dense.d() != pruned.d() {
        return Err(Error::Shape(format!("SAE widths {} and {}", dense.d(), pruned.d())));
    }
    match_dictionaries(&dictionary_from_sae(dense)?, &dictionary_from_sae(pruned)?, thresholds, exec)
}

pub fn survival_reports_both_ways(
    dense: &SaeModel,
    pruned: &SaeModel,
    thresholds: &[f64],
    exec: Exec,
) -> Result<(MatchReport, MatchReport)> {
    if dense.d() != pruned.d() {
        return Err(Error::Shape(format!("SAE widths {} and {}", dense.d(), pruned.d())));
    }
    let sim = cosine_matrix(&dictionary_from_sae(dense)?, &dictionary_from_sae(pruned)?, exec)?;
    let fwd = match_report(sim.view(), thresholds, exec)?;
    let rev = match_report(sim.t(), thresholds, exec)?;
    Ok((fwd, rev))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStabilityReport {
    pub thresholds: Vec<f64>,
    pub mean: Vec<f64>,
    /// Population standard deviation over seed pairs.
    pub std: Vec<f64>,
    pub pair_count: usize,
}

/// Pairwise MNN rates between SAEs trained with different seeds.
pub fn seed_stability(saes: &[SaeModel], thresholds: &[f64], exec: Exec) -> Result<SeedStabilityReport> {
    if saes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "seed stability needs at least 2 SAEs, got {}",
            saes.len()
        )));
    }
    let dicts = saes.iter().map(dictionary_from_sae).collect::<Result<Vec<_>>>()?;
    let mut rates: Vec<Vec<f64>> = Vec::new();
    for i in 0..dicts.len() {
        for j in i + 1..dicts.len() {
            rates.push(match_dictionaries(&dicts[i], &dicts[j], thresholds, exec)?.mnn);
        }
    }
    let p = rates.len() as f64;
    let mean: Vec<f64> = (0..thresholds.len())
        .map(|t| rates.iter().map(|r| r[t]).sum::<f64>() / p)
        .collect();
    let std = (0..thresholds.len())
        .map(|t| {
            let v = rates.iter().map(|r| (r[t] - mean[t]).powi(2)).sum::<f64>() / p;
            v.sqrt()
        })
        .collect();
    Ok(SeedStabilityReport {
        thresholds: thresholds.to_vec(),
        mean,
        std,
        pair_count: rates.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn unit_column_from_three_four() {
        let d = Dictionary::from_columns(array![[3.0], [4.0]].view(), Meta::new()).unwrap();
        assert!((d.atom(0)[0] - 0.6).abs() < 1e-7);
        assert!((d.atom(0)[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_columns_listed() {
        let err = Dictionary::from_columns(array![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]].view(), Meta::new()).unwrap_err();
        assert!(err.to_string().contains("[1, 2]"), "{err}");
    }

    #[test]
    fn sae_dictionary_is_unit() {
        let sae = SaeModel::init(8, 4, 2, 3).unwrap();
        let d = dictionary_from_sae(&sae).unwrap();
        for i in 0..d.n_features() {
            let n: f32 = d.atom(i).dot(&d.atom(i)).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_atoms() {
        let eye = Array2::<f64>::eye(4);
        let a = Dictionary::from_columns(eye.view(), Meta::new()).unwrap();
        let sim = cosine_matrix(&a, &a, Exec::default()).unwrap();
        assert_eq!(sim, Array2::<f32>::eye(4));
        assert_eq!(one_way_rate(sim.view(), 0.7).unwrap().rate, 1.0);
        assert_eq!(mnn_rate(sim.view(), 0.7).unwrap().rate, 1.0);
        assert_eq!(greedy_rate(sim.view(), 0.7).unwrap().rate, 1.0);
    }

    #[test]
    fn all_zero_similarity() {
        let sim = Array2::<f32>::zeros((3, 3));
        assert_eq!(one_way_rate(sim.view(), 0.5).unwrap().rate, 0.0);
    }

    #[test]
    fn hand_enumerated_two_by_two() {
        let sim = array![[0.9f32, 0.8], [0.95, 0.1]];
        let m = mnn_rate(sim.view(), 0.7).unwrap();
        assert_eq!(m.pairs, vec![(1, 0)]);
        assert_eq!(m.rate, 0.5);
        let g = greedy_rate(sim.view(), 0.7).unwrap();
        assert_eq!(g.assignment, vec![Some(1), Some(0)]);
        assert_eq!(g.rate, 1.0);
        let mt = mnn_rate(sim.t(), 0.7).unwrap();
        assert_eq!(mt.pairs, vec![(0, 1)]);
    }

    #[test]
    fn empty_matrix_errors() {
        let sim = Array2::<f32>::zeros((0, 3));
        assert!(one_way_rate(sim.view(), 0.5).is_err());
        assert!(mnn_rate(sim.view(), 0.5).is_err());
        assert!(greedy_rate(sim.view(), 0.5).is_err());
    }

    #[test]
    fn report_agrees_with_single_tau_functions() {
        let sim = array![[0.9f32, 0.8, 0.2], [0.95, 0.1, 0.65], [0.3, 0.75, 0.55]];
        let r = match_report(sim.view(), &TAU_GRID, Exec::default()).unwrap();
        for (t, &tau) in TAU_GRID.iter().enumerate() {
            assert_eq!(r.one_way[t], one_way_rate(sim.view(), tau).unwrap().rate);
            assert_eq!(r.mnn[t], mnn_rate(sim.view(), tau).unwrap().rate);
            assert_eq!(r.greedy[t], greedy_rate(sim.view(), tau).unwrap().rate);
            assert_eq!(r.per_feature_mnn_at[t], r.mnn_at(tau));
        }
    }

    #[test]
    fn identical_saes_are_fully_stable() {
        let s = SaeModel::init(6, 2, 2, 1).unwrap();
        let r = seed_stability(&[s.clone(), s], &TAU_GRID, Exec::default()).unwrap();
        assert!(r.mean.iter().all(|m| *m == 1.0));
        assert!(r.std.iter().all(|s| *s == 0.0));
        assert_eq!(r.pair_count, 1);
    }

    #[test]
    fn three_seeds_three_pairs() {
        let saes: Vec<_> = (0..3).map(|s| SaeModel::init(6, 2, 2, s).unwrap()).collect();
        assert_eq!(seed_stability(&saes, &TAU_GRID, Exec::default()).unwrap().pair_count, 3);
        assert!(seed_stability(&saes[..1], &TAU_GRID, Exec::default()).is_err());
    }

    #[test]
    fn survival_against_self_and_permutation() {
        let dense = SaeModel::init(8, 2, 2, 5).unwrap();
        let r = survival_report(&dense, &dense, &TAU_GRID, Exec::default()).unwrap();
        assert!(r.one_way.iter().chain(&r.mnn).chain(&r.greedy).all(|v| *v == 1.0));
        let mut permuted = dense.clone();
        let n = dense.d_sae();
        for i in 0..n {
            permuted.w_dec.column_mut(i).assign(&dense.w_dec.column((i * 5 + 3) % n));
        }
        let r = survival_report(&dense, &permuted, &TAU_GRID, Exec::default()).unwrap();
        assert!(r.mnn.iter().all(|v| *v == 1.0));
        let small = SaeModel::init(4, 2, 2, 5).unwrap();
        assert!(survival_report(&dense, &small, &TAU_GRID, Exec::default()).is_err());
    }

    #[test]
    fn csv_layouts() {
        let sim = array![[0.9f32, 0.8], [0.95, 0.1]];
        let r = match_report(sim.view(), &[0.7], Exec::default()).unwrap();
        assert_eq!(r.to_csv(), "tau,one_way,mnn,greedy\n0.7,1,0.5,1\n");
        assert_eq!(
            r.per_feature_csv(),
            "feature_id,best_match,score,mnn_at_0.7\n0,0,0.9,0\n1,0,0.95,1\n"
        );
    }
}
