use std::borrow::Borrow;
use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{top_k_indices, SaeModel};
use crate::error::{Error, Result};
use crate::tensorio::{ActivationBatch, NormStats};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Encoder rows of resampled features are this multiple of the new direction.
pub const RESAMPLE_ENCODER_SCALE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Anneals from the base rate at step 0 to 0 at the final step.
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub resample_every: usize,
    pub expansion_factor: usize,
    pub k: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 2048,
            lr: 5e-5,
            lr_schedule: LrSchedule::Cosine,
            resample_every: 2000,
            expansion_factor: 8,
            k: 64,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.steps == 0 {
            return bad("sae.steps must be > 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("sae.lr must be a positive finite number");
        }
        if self.resample_every == 0 {
            return bad("sae.resample_every must be > 0");
        }
        if self.batch_size == 0 {
            return bad("sae.batch_size must be > 0");
        }
        if self.expansion_factor == 0 || self.k == 0 {
            return bad("sae.expansion_factor and sae.k must be > 0");
        }
        if self.log_every == 0 {
            return bad("sae.log_every must be > 0");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Cosine => {
                if self.steps <= 1 {
                    self.lr
                } else {
                    let t = step as f64 / (self.steps - 1) as f64;
                    0.5 * self.lr * (1.0 + (PI * t).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeGrads {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
}

impl SaeGrads {
    fn zeros(d: usize, d_sae: usize) -> Self {
        Self {
            w_enc: Array2::zeros((d_sae, d)),
            b_enc: Array1::zeros(d_sae),
            w_dec: Array2::zeros((d, d_sae)),
            b_dec: Array1::zeros(d),
        }
    }
}

pub(crate) struct ForwardBackward {
    pub loss: f64,
    pub grads: SaeGrads,
    pub supports: Vec<Vec<usize>>,
    pub codes: Vec<Vec<f64>>,
}

/// Per-row reconstructions for normalized input `x` (B x d).
pub(crate) fn reconstruct(sae: &SaeModel, x: ArrayView2<f64>) -> (Array2<f64>, Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let pre = sae.pre_activations_batch(x);
    let wdt = sae.w_dec.t();
    let mut recon = Array2::<f64>::zeros(x.raw_dim());
    let mut supports = Vec::with_capacity(x.nrows());
    let mut codes = Vec::with_capacity(x.nrows());
    for (b, mut out) in recon.rows_mut().into_iter().enumerate() {
        let row = pre.row(b);
        let row = row.as_slice().expect("row-major pre-activations");
        let support = top_k_indices(row, sae.k);
        let vals: Vec<f64> = support.iter().map(|&i| row[i]).collect();
        out.assign(&sae.b_dec);
        for (&i, &v) in support.iter().zip(&vals) {
            out.scaled_add(v, &wdt.row(i));
        }
        supports.push(support);
        codes.push(vals);
    }
    (recon, supports, codes)
}

/// Loss `mean_b ||x̂_rec - x̂||²` and its exact gradient for the fixed TopK
/// support (selected units pass gradient straight through, dropped units get
/// none).
pub(crate) fn forward_backward(sae: &SaeModel, x: ArrayView2<f64>) -> ForwardBackward {
    let (batch, d) = x.dim();
    let d_sae = sae.d_sae();
    let (recon, supports, codes) = reconstruct(sae, x);
    let resid = &recon - &x;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / batch as f64;
    let g = resid * (2.0 / batch as f64);

    let mut grads = SaeGrads::zeros(d, d_sae);
    grads.b_dec = g.sum_axis(Axis(0));
    let mut dw_dec_t = Array2::<f64>::zeros((d_sae, d));
    let wdt = sae.w_dec.t();
    for b in 0..batch {
        let gb = g.row(b);
        let xb = x.row(b);
        for (&i, &z) in supports[b].iter().zip(&codes[b]) {
            dw_dec_t.row_mut(i).scaled_add(z, &gb);
            let dz = gb.dot(&wdt.row(i));
            grads.b_enc[i] += dz;
            grads.w_enc.row_mut(i).scaled_add(dz, &xb);
        }
    }
    grads.w_dec = dw_dec_t.reversed_axes().as_standard_layout().to_owned();
    ForwardBackward {
        loss,
        grads,
        supports,
        codes,
    }
}

fn to_f64_normalized(batch: &ActivationBatch, stats: &NormStats) -> Result<Array2<f64>> {
    if batch.dim() != stats.dim() {
        return Err(Error::Shape(format!(
            "batch width {} != statistics width {}",
            batch.dim(),
            stats.dim()
        )));
    }
    let mut out = Array2::<f64>::zeros((batch.n_rows(), batch.dim()));
    for (src, mut dst) in batch.rows().rows().into_iter().zip(out.rows_mut()) {
        for (((o, &v), m), s) in dst.iter_mut().zip(src.iter()).zip(&stats.mean).zip(&stats.std) {
            *o = (v as f64 - m) / s;
        }
    }
    Ok(out)
}

fn to_f64(batch: &ActivationBatch) -> Array2<f64> {
    batch.rows().mapv(|v| v as f64)
}

/// Loss and gradients on an already-normalized batch.
pub fn loss_and_grads(sae: &SaeModel, batch: &ActivationBatch) -> Result<(f64, SaeGrads)> {
    if batch.dim() != sae.d() {
        return Err(Error::Shape(format!("batch width {} != SAE d {}", batch.dim(), sae.d())));
    }
    if batch.is_empty() {
        return Err(Error::Empty("loss on an empty batch".into()));
    }
    let fb = forward_backward(sae, to_f64(batch).view());
    Ok((fb.loss, fb.grads))
}

/// First and second Adam moments for every SAE parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: SaeGrads,
    v: SaeGrads,
    t: u64,
}

impl AdamState {
    pub fn new(sae: &SaeModel) -> Self {
        Self {
            m: SaeGrads::zeros(sae.d(), sae.d_sae()),
            v: SaeGrads::zeros(sae.d(), sae.d_sae()),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, sae: &mut SaeModel, g: &SaeGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        macro_rules! apply {
            ($f:ident) => {
                ndarray::Zip::from(&mut sae.$f)
                    .and(&g.$f)
                    .and(&mut self.m.$f)
                    .and(&mut self.v.$f)
                    .for_each(|p, &g, m, v| {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let mh = *m / bc1;
                        let vh = *v / bc2;
                        *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    })
            };
        }
        apply!(w_enc);
        apply!(b_enc);
        apply!(w_dec);
        apply!(b_dec);
    }

    fn clear_feature(&mut self, i: usize) {
        for st in [&mut self.m, &mut self.v] {
            st.w_enc.row_mut(i).fill(0.0);
            st.w_dec.column_mut(i).fill(0.0);
            st.b_enc[i] = 0.0;
        }
    }
}

/// Revives features that never fired since the last resample.
///
/// Dead features (ascending index) are assigned batch examples in order of
/// decreasing reconstruction error (ties by row). Each gets the normalized
/// residual of its example as decoder column, `0.2x` that direction as encoder
/// row, a zero encoder bias, and cleared Adam moments. Returns the resampled
/// feature indices. `batch` must already be normalized.
pub fn resample_dead(
    sae: &mut SaeModel,
    firing_counts: &[u64],
    batch: &ActivationBatch,
    opt: &mut AdamState,
) -> Result<Vec<usize>> {
    if firing_counts.len() != sae.d_sae() {
        return Err(Error::Shape(format!(
            "{} firing counts for {} features",
            firing_counts.len(),
            sae.d_sae()
        )));
    }
    if batch.dim() != sae.d() {
        return Err(Error::Shape(format!("batch width {} != SAE d {}", batch.dim(), sae.d())));
    }
    resample_dead_f64(sae, firing_counts, to_f64(batch).view(), opt)
}

fn resample_dead_f64(
    sae: &mut SaeModel,
    firing_counts: &[u64],
    x: ArrayView2<f64>,
    opt: &mut AdamState,
) -> Result<Vec<usize>> {
    let dead: Vec<usize> = firing_counts
        .iter()
        .enumerate()
        .filter(|(_, c)| **c == 0)
        .map(|(i, _)| i)
        .collect();
    if dead.is_empty() || x.nrows() == 0 {
        return Ok(Vec::new());
    }
    let (recon, _, _) = reconstruct(sae, x);
    let resid = &x - &recon;
    let err: Vec<f64> = resid.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.sort_by(|&a, &b| err[b].total_cmp(&err[a]).then(a.cmp(&b)));

    let mut revived = Vec::with_capacity(dead.len());
    for (n, &f) in dead.iter().enumerate() {
        let row = order[n % order.len()];
        let r = resid.row(row);
        let rn = r.dot(&r).sqrt();
        let dir = if rn > 1e-12 {
            r.mapv(|v| v / rn)
        } else {
            let xr = x.row(row);
            let xn = xr.dot(&xr).sqrt();
            if xn <= 1e-12 {
                continue;
            }
            xr.mapv(|v| v / xn)
        };
        sae.w_dec.column_mut(f).assign(&dir);
        sae.w_enc.row_mut(f).assign(&(&dir * RESAMPLE_ENCODER_SCALE));
        sae.b_enc[f] = 0.0;
        opt.clear_feature(f);
        revived.push(f);
    }
    Ok(revived)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub dead_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
    pub resampled: Vec<(usize, usize)>,
}

impl TrainLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.entries.first().map(|e| e.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }

    /// `step,loss,lr,dead_count`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr,dead_count\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{},{}\n", e.step, e.loss, e.lr, e.dead_count));
        }
        s
    }
}

/// Endless stream of `batch_size`-row batches drawn from a reshuffled copy of
/// `corpus` each epoch.
pub fn cycle_batches(
    corpus: &ActivationBatch,
    batch_size: usize,
    seed: u64,
) -> impl Iterator<Item = ActivationBatch> + '_ {
    let n = corpus.n_rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut pos = 0usize;
    std::iter::from_fn(move || {
        if n == 0 || batch_size == 0 {
            return None;
        }
        let mut idx = Vec::with_capacity(batch_size);
        while idx.len() < batch_size {
            if pos == n {
                perm.shuffle(&mut rng);
                pos = 0;
            }
            idx.push(perm[pos]);
            pos += 1;
        }
        let rows = corpus.rows().select(Axis(0), &idx);
        Some(ActivationBatch::new(rows, corpus.meta.clone()).expect("rows of a finite batch"))
    })
}

/// Trains a TopK SAE on `data` (raw activations, normalized here with
/// `stats`) with Adam and the configured learning-rate schedule.
pub fn train_sae<I, B>(config: &TrainConfig, data: I, stats: &NormStats) -> Result<(SaeModel, TrainLog)>
where
    I: IntoIterator<Item = B>,
    B: Borrow<ActivationBatch>,
{
    let mut sae = SaeModel::init(stats.dim(), config.expansion_factor, config.k, config.seed)?;
    let mut log = TrainLog::default();
    if config.steps == 0 {
        return Ok((sae, log));
    }
    config.validate()?;
    let mut opt = AdamState::new(&sae);
    let mut counts = vec![0u64; sae.d_sae()];
    let mut data = data.into_iter();
    for step in 0..config.steps {
        let batch = data.next().ok_or_else(|| {
            if step == 0 {
                Error::Empty("training stream yielded no batches".into())
            } else {
                Error::InvalidArgument(format!("training stream exhausted at step {step}"))
            }
        })?;
        let x = to_f64_normalized(batch.borrow(), stats)?;
        if x.nrows() == 0 {
            return Err(Error::Empty(format!("empty batch at step {step}")));
        }
        let fb = forward_backward(&sae, x.view());
        if !fb.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        for (support, vals) in fb.supports.iter().zip(&fb.codes) {
            for (&i, &v) in support.iter().zip(vals) {
                if v != 0.0 {
                    counts[i] += 1;
                }
            }
        }
        let lr = config.lr_at(step);
        opt.step(&mut sae, &fb.grads, lr);
        if sae.w_enc.iter().chain(&sae.w_dec).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        if step % config.log_every == 0 || step + 1 == config.steps {
            log.entries.push(TrainLogEntry {
                step,
                loss: fb.loss,
                lr,
                dead_count: counts.iter().filter(|c| **c == 0).count(),
            });
        }
        if (step + 1) % config.resample_every == 0 && step + 1 < config.steps {
            let revived = resample_dead_f64(&mut sae, &counts, x.view(), &mut opt)?;
            if !revived.is_empty() {
                log.resampled.push((step, revived.len()));
            }
            counts.fill(0);
        }
    }
    Ok((sae, log))
}
