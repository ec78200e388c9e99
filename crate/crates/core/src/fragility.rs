//! Firing-rate quintile survival, the exact Spearman permutation test, and the
//! two-predictor logistic survival model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_QUINTILES: usize = 5;
/// Tolerance used when comparing permuted |ρ| against the observed |ρ|.
const PERM_TOL: f64 = 1e-12;
pub const IRLS_GRAD_TOL: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 200;
/// Standardized coefficient norm past which the data is treated as separated.
pub const SEPARATION_CAP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuintileBinning {
    /// Q1 (rarest) .. Q5 (most frequent), feature indices in sorted order.
    pub bins: Vec<Vec<usize>>,
    /// Largest firing rate in each of Q1..Q4.
    pub boundaries: Vec<f64>,
    pub alive_mask: Vec<bool>,
    /// Arithmetic mean firing rate per bin.
    pub mean_rates: Vec<f64>,
}

/// Stable ascending sort of alive features by rate (ties by index), split into
/// five contiguous bins; the first `n % 5` bins get one extra member.
pub fn quintile_bins(firing_rates: &[f64], alive_mask: &[bool]) -> Result<QuintileBinning> {
    if firing_rates.len() != alive_mask.len() {
        return Err(Error::Shape(format!(
            "{} firing rates vs {} alive flags",
            firing_rates.len(),
            alive_mask.len()
        )));
    }
    if firing_rates.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("firing rates".into()));
    }
    let mut alive: Vec<usize> = (0..firing_rates.len()).filter(|&i| alive_mask[i]).collect();
    if alive.len() < N_QUINTILES {
        return Err(Error::InvalidArgument(format!(
            "need at least {N_QUINTILES} alive features, got {}",
            alive.len()
        )));
    }
    alive.sort_by(|&a, &b| firing_rates[a].total_cmp(&firing_rates[b]));
    let (base, extra) = (alive.len() / N_QUINTILES, alive.len() % N_QUINTILES);
    let mut bins = Vec::with_capacity(N_QUINTILES);
    let mut start = 0;
    for q in 0..N_QUINTILES {
        let len = base + usize::from(q < extra);
        bins.push(alive[start..start + len].to_vec());
        start += len;
    }
    let boundaries = bins[..N_QUINTILES - 1]
        .iter()
        .map(|b| firing_rates[*b.last().expect("non-empty bin")])
        .collect();
    let mean_rates = bins
        .iter()
        .map(|b| b.iter().map(|&i| firing_rates[i]).sum::<f64>() / b.len() as f64)
        .collect();
    Ok(QuintileBinning {
        bins,
        boundaries,
        alive_mask: alive_mask.to_vec(),
        mean_rates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragilityReport {
    pub survival_by_quintile: Vec<f64>,
    pub mean_rate_by_quintile: Vec<f64>,
    /// None when either profile has no variance.
    pub spearman_rho: Option<f64>,
    pub p_value: Option<f64>,
    /// None when Q5 survival is zero.
    pub q1_q5_ratio: Option<f64>,
    pub bin_sizes: Vec<usize>,
}

impl FragilityReport {
    /// `quintile,mean_firing_rate,survival_rate` rows, then the
    /// `rho,p,q1_q5_ratio` summary. Missing values are written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("quintile,mean_firing_rate,survival_rate\n");
        for q in 0..self.survival_by_quintile.len() {
            s.push_str(&format!(
                "Q{},{},{}\n",
                q + 1,
                self.mean_rate_by_quintile[q],
                self.survival_by_quintile[q]
            ));
        }
        s.push_str("rho,p,q1_q5_ratio\n");
        s.push_str(&format!(
            "{},{},{}\n",
            opt(self.spearman_rho),
            opt(self.p_value),
            opt(self.q1_q5_ratio)
        ));
        s
    }
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

pub fn quintile_survival(binning: &QuintileBinning, survived: &[bool]) -> Result<FragilityReport> {
    let frac: Vec<f64> = survived.iter().map(|&s| f64::from(u8::from(s))).collect();
    quintile_survival_fraction(binning, &frac)
}

/// Like [`quintile_survival`] with per-feature survival fractions in [0, 1],
/// e.g. the share of pruned seeds a dense feature is matched in.
pub fn quintile_survival_fraction(binning: &QuintileBinning, survival: &[f64]) -> Result<FragilityReport> {
    if survival.len() != binning.alive_mask.len() {
        return Err(Error::Shape(format!(
            "{} survival values vs {} features",
            survival.len(),
            binning.alive_mask.len()
        )));
    }
    let mut rates = Vec::with_capacity(binning.bins.len());
    for (q, bin) in binning.bins.iter().enumerate() {
        if bin.is_empty() {
            return Err(Error::Empty(format!("quintile Q{} has no members", q + 1)));
        }
        rates.push(bin.iter().map(|&i| survival[i]).sum::<f64>() / bin.len() as f64);
    }
    let (rho, p) = match spearman_exact(&binning.mean_rates, &rates) {
        Ok((r, p)) => (Some(r), Some(p)),
        Err(Error::Degenerate(_)) => (None, None),
        Err(e) => return Err(e),
    };
    let q5 = rates[N_QUINTILES - 1];
    Ok(FragilityReport {
        q1_q5_ratio: (q5 > 0.0).then(|| rates[0] / q5),
        survival_by_quintile: rates,
        mean_rate_by_quintile: binning.mean_rates.clone(),
        spearman_rho: rho,
        p_value: p,
        bin_sizes: binning.bins.iter().map(Vec::len).collect(),
    })
}

/// Mid-ranks (1-based), ties share the average of their positions.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Lexicographic successor in place; false once the last permutation is reached.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Spearman ρ on mid-ranks with a two-tailed p-value from all 5! permutations.
pub fn spearman_exact(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != N_QUINTILES || y.len() != N_QUINTILES {
        return Err(Error::InvalidArgument(format!(
            "spearman_exact takes two {N_QUINTILES}-vectors, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    let (rx, ry) = (midranks(x), midranks(y));
    for (name, r) in [("x", &rx), ("y", &ry)] {
        if r.iter().all(|&v| v == r[0]) {
            return Err(Error::Degenerate(format!("{name} has zero rank variance")));
        }
    }
    let rho = pearson(&rx, &ry);
    let mut perm: Vec<usize> = (0..N_QUINTILES).collect();
    let (mut total, mut extreme) = (0usize, 0usize);
    let mut permuted = ry.clone();
    loop {
        for (dst, &k) in permuted.iter_mut().zip(&perm) {
            *dst = ry[k];
        }
        total += 1;
        if pearson(&rx, &permuted).abs() >= rho.abs() - PERM_TOL {
            extreme += 1;
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok((rho, extreme as f64 / total as f64))
}

fn check_labels(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate(format!("single-class labels ({pos} positive, {neg} negative)")));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC; tied scores count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("auc scores".into()));
    }
    let (pos, neg) = check_labels(labels)?;
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Natural log of a firing rate floored at one event per evaluation set.
pub fn log_firing_rate(rate: f64, eval_tokens: usize) -> f64 {
    rate.max(1.0 / eval_tokens.max(1) as f64).ln()
}

/// Share of conditions (e.g. pruned seeds) in which each feature survived.
pub fn survival_fraction(matched: &[Vec<bool>]) -> Result<Vec<f64>> {
    let first = matched.first().ok_or_else(|| Error::Empty("no match vectors".into()))?;
    if matched.iter().any(|m| m.len() != first.len()) {
        return Err(Error::Shape("match vectors differ in length".into()));
    }
    let n = matched.len() as f64;
    Ok((0..first.len())
        .map(|i| matched.iter().filter(|m| m[i]).count() as f64 / n)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSample {
    pub log_fire: f64,
    pub sparsity: f64,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalPredictor {
    pub tau: f64,
    /// Coefficients on z-scored predictors.
    pub intercept: f64,
    pub beta_log_fire: f64,
    pub beta_sparsity: f64,
    /// The same fit in raw predictor units.
    pub raw_intercept: f64,
    pub raw_beta_log_fire: f64,
    pub raw_beta_sparsity: f64,
    pub auc: f64,
    pub accuracy: f64,
    pub n_samples: usize,
    /// Coefficient norm hit the separation cap; the fit is capped, not converged.
    pub separated: bool,
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl SurvivalPredictor {
    pub fn linear(&self, log_fire: f64, sparsity: f64) -> f64 {
        let z = self.standardize(log_fire, sparsity);
        self.intercept + self.beta_log_fire * z[0] + self.beta_sparsity * z[1]
    }

    /// Survival probability.
    pub fn predict(&self, log_fire: f64, sparsity: f64) -> f64 {
        sigmoid(self.linear(log_fire, sparsity))
    }

    fn standardize(&self, log_fire: f64, sparsity: f64) -> [f64; 2] {
        let z = |v: f64, k: usize| if self.std[k] > 0.0 { (v - self.mean[k]) / self.std[k] } else { 0.0 };
        [z(log_fire, 0), z(sparsity, 1)]
    }

    pub const CSV_HEADER: &'static str = "tau,intercept,beta_log_fire,beta_sparsity,auc,accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.tau, self.intercept, self.beta_log_fire, self.beta_sparsity, self.auc, self.accuracy
        )
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Solves the k x k system (k <= 3) by Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
fn solve(mut a: [[f64; 3]; 3], mut b: [f64; 3], k: usize) -> Option<[f64; 3]> {
    for c in 0..k {
        let p = (c..k).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs().is_nan() || a[p][c].abs() <= 1e-300 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..k {
            let f = a[r][c] / a[c][c];
            for j in c..k {
                a[r][j] -= f * a[c][j];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..k).rev() {
        let s: f64 = (r + 1..k).map(|j| a[r][j] * x[j]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

fn log_likelihood(x: &[[f64; 3]], y: &[f64], beta: &[f64; 3], k: usize) -> f64 {
    x.iter()
        .zip(y)
        .map(|(row, &yi)| {
            let t: f64 = (0..k).map(|j| row[j] * beta[j]).sum();
            // log σ(t) = -softplus(-t), log(1-σ(t)) = -softplus(t)
            let sp = |u: f64| if u > 0.0 { u + (-u).exp().ln_1p() } else { u.exp().ln_1p() };
            -(yi * sp(-t) + (1.0 - yi) * sp(t))
        })
        .sum()
}

/// Maximum-likelihood logistic fit by IRLS on z-scored predictors.
///
/// A predictor with zero variance (e.g. sparsity within one condition) is
/// dropped from the fit and gets a zero coefficient.
pub fn fit_survival_predictor(samples: &[SurvivalSample], tau: f64) -> Result<SurvivalPredictor> {
    if samples.is_empty() {
        return Err(Error::Empty("no survival samples".into()));
    }
    if samples.iter().any(|s| !s.log_fire.is_finite() || !s.sparsity.is_finite()) {
        return Err(Error::NonFinite("survival predictors".into()));
    }
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    check_labels(&labels)?;
    let n = samples.len() as f64;
    let col = |k: usize, s: &SurvivalSample| if k == 0 { s.log_fire } else { s.sparsity };
    let mut mean = [0.0; 2];
    let mut std = [0.0; 2];
    for k in 0..2 {
        mean[k] = samples.iter().map(|s| col(k, s)).sum::<f64>() / n;
        std[k] = (samples.iter().map(|s| (col(k, s) - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
    }
    let active: Vec<usize> = (0..2).filter(|&k| std[k] > 1e-12 * (1.0 + mean[k].abs())).collect();
    let p = 1 + active.len();
    let x: Vec<[f64; 3]> = samples
        .iter()
        .map(|s| {
            let mut r = [1.0, 0.0, 0.0];
            for (slot, &k) in active.iter().enumerate() {
                r[slot + 1] = (col(k, s) - mean[k]) / std[k];
            }
            r
        })
        .collect();
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();

    let mut beta = [0.0; 3];
    let mut separated = false;
    let mut converged = false;
    let mut ll = log_likelihood(&x, &y, &beta, p);
    for _ in 0..IRLS_MAX_ITER {
        let mut grad = [0.0; 3];
        let mut hess = [[0.0; 3]; 3];
        for (row, &yi) in x.iter().zip(&y) {
            let t: f64 = (0..p).map(|j| row[j] * beta[j]).sum();
            let pi = sigmoid(t);
            let w = pi * (1.0 - pi);
            for a in 0..p {
                grad[a] += row[a] * (yi - pi);
                for b in 0..p {
                    hess[a][b] += w * row[a] * row[b];
                }
            }
        }
        let gnorm = grad[..p].iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < IRLS_GRAD_TOL {
            converged = true;
            break;
        }
        let Some(step) = solve(hess, grad, p) else {
            separated = true;
            break;
        };
        let step_norm = step[..p].iter().map(|v| v * v).sum::<f64>().sqrt();
        if step_norm < 1e-12 * (1.0 + beta[..p].iter().map(|b| b * b).sum::<f64>().sqrt()) {
            converged = true;
            break;
        }
        // Step halving keeps the likelihood non-decreasing up to rounding.
        let slack = 1e-12 * (1.0 + ll.abs());
        let mut scale = 1.0;
        let mut next = beta;
        let mut improved = false;
        for _ in 0..30 {
            for j in 0..p {
                next[j] = beta[j] + scale * step[j];
            }
            let nll = log_likelihood(&x, &y, &next, p);
            if nll >= ll - slack {
                ll = nll;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            return Err(Error::Degenerate(format!("IRLS line search failed, gradient norm {gnorm:e}")));
        }
        beta = next;
        let norm = beta[1..p].iter().map(|b| b * b).sum::<f64>().sqrt();
        if norm > SEPARATION_CAP {
            let f = SEPARATION_CAP / norm;
            for b in &mut beta[1..p] {
                *b *= f;
            }
            separated = true;
            break;
        }
    }
    if !converged && !separated {
        return Err(Error::Degenerate(format!("IRLS did not converge in {IRLS_MAX_ITER} iterations")));
    }

    let mut coef = [0.0; 2];
    for (slot, &k) in active.iter().enumerate() {
        coef[k] = beta[slot + 1];
    }
    let raw = [
        if std[0] > 0.0 && active.contains(&0) { coef[0] / std[0] } else { 0.0 },
        if std[1] > 0.0 && active.contains(&1) { coef[1] / std[1] } else { 0.0 },
    ];
    let raw_intercept = beta[0] - raw[0] * mean[0] - raw[1] * mean[1];
    let mut std_used = std;
    for (k, s) in std_used.iter_mut().enumerate() {
        if !active.contains(&k) {
            *s = 0.0;
        }
    }
    let mut model = SurvivalPredictor {
        tau,
        intercept: beta[0],
        beta_log_fire: coef[0],
        beta_sparsity: coef[1],
        raw_intercept,
        raw_beta_log_fire: raw[0],
        raw_beta_sparsity: raw[1],
        auc: 0.0,
        accuracy: 0.0,
        n_samples: samples.len(),
        separated,
        mean,
        std: std_used,
    };
    let scores: Vec<f64> = samples.iter().map(|s| model.linear(s.log_fire, s.sparsity)).collect();
    model.auc = auc(&scores, &labels)?;
    let correct = scores.iter().zip(&labels).filter(|(&t, &l)| (t >= 0.0) == l).count();
    model.accuracy = correct as f64 / n;
    Ok(model)
}
