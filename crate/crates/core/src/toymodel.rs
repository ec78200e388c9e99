//! A small forward-only pre-norm transformer used as a stand-in language
//! model, plus the single-feature ablation protocol.
//!
//! Linear weights are stored `(out, in)` and applied as `y = x Wᵀ`; there are
//! no linear biases. Only the per-block linears are exposed to pruning.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matching::MatchReport;
use crate::pruning::{WandaNormAccumulator, WeightSet};
use crate::sae::{SaeModel, SparseCode};
use crate::tensorio::{self, ActivationBatch, Meta, NormStats};

pub type Token = u32;

const LN_EPS: f32 = 1e-5;
pub const LINEAR_NAMES: [&str; 6] = ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o", "mlp.w_in", "mlp.w_out"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
    /// Residual stream after this block (0-based) is the capture site.
    pub hook_layer: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_mlp: 256,
            max_seq_len: 256,
            hook_layer: 1,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_mlp == 0 || self.max_seq_len == 0 {
            return bad(format!("toy model dimensions must be positive: {self:?}"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.hook_layer >= self.n_layers {
            return bad(format!("hook_layer {} >= n_layers {}", self.hook_layer, self.n_layers));
        }
        if self.vocab_size > Token::MAX as usize {
            return bad(format!("vocab_size {} too large", self.vocab_size));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        let (v, d, t, m, l) = (self.vocab_size, self.d_model, self.max_seq_len, self.d_mlp, self.n_layers);
        2 * v * d + t * d + l * (4 * d * d + 2 * d * m + 4 * d) + 2 * d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    fn apply(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let n = row.len() as f32;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.gamma).zip(&self.beta) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLM {
    pub config: ToyConfig,
    pub seed: u64,
    pub embed: Array2<f32>,
    pub pos_embed: Array2<f32>,
    pub unembed: Array2<f32>,
    /// `blocks.{l}.attn.w_q` .. `blocks.{l}.mlp.w_out`.
    linears: WeightSet,
    pub ln1: Vec<LayerNorm>,
    pub ln2: Vec<LayerNorm>,
    pub ln_f: LayerNorm,
}

pub fn linear_name(layer: usize, which: &str) -> String {
    format!("blocks.{layer}.{which}")
}

fn gelu(x: f32) -> f32 {
    let c = (2.0f32 / std::f32::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f32> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn(shape, || normal.sample(rng) as f32)
}

/// Which captured tensor feeds which linear layer.
#[derive(Default)]
struct Capture<'a> {
    wanda: Option<&'a mut WandaNormAccumulator>,
}

impl Capture<'_> {
    fn add(&mut self, layer: usize, which: &str, x: &Array2<f32>) -> Result<()> {
        if let Some(acc) = self.wanda.as_deref_mut() {
            let x = x.as_standard_layout();
            acc.add_rows(&linear_name(layer, which), x.as_slice().expect("standard layout"), x.ncols())?;
        }
        Ok(())
    }
}

/// Per-layer residual stream of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Token plus positional embedding.
    pub embedded: Array2<f32>,
    /// `resid_post[l]` is the stream after block `l`.
    pub resid_post: Vec<Array2<f32>>,
    pub logits: Array2<f32>,
}

impl ToyLM {
    pub fn init(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x70E1);
        let (v, d, m) = (config.vocab_size, config.d_model, config.d_mlp);
        let embed = gaussian(&mut rng, (v, d), 1.0);
        let pos_embed = gaussian(&mut rng, (config.max_seq_len, d), 0.3);
        let mut linears = WeightSet::new();
        for l in 0..config.n_layers {
            for (which, shape) in [
                ("attn.w_q", (d, d)),
                ("attn.w_k", (d, d)),
                ("attn.w_v", (d, d)),
                ("attn.w_o", (d, d)),
                ("mlp.w_in", (m, d)),
                ("mlp.w_out", (d, m)),
            ] {
                let w = gaussian(&mut rng, shape, 1.0 / (shape.1 as f64).sqrt());
                linears.insert(linear_name(l, which), w)?;
            }
        }
        let unembed = gaussian(&mut rng, (v, d), 1.0 / (d as f64).sqrt());
        let jitter = |rng: &mut ChaCha8Rng| {
            let mut ln = LayerNorm::identity(d);
            ln.gamma.mapv_inplace(|g| g + rng.random_range(-0.1..0.1f32));
            ln
        };
        let ln1 = (0..config.n_layers).map(|_| jitter(&mut rng)).collect();
        let ln2 = (0..config.n_layers).map(|_| jitter(&mut rng)).collect();
        Ok(Self {
            ln_f: LayerNorm::identity(d),
            config,
            seed,
            embed,
            pos_embed,
            unembed,
            linears,
            ln1,
            ln2,
        })
    }

    pub fn param_count(&self) -> usize {
        self.embed.len()
            + self.pos_embed.len()
            + self.unembed.len()
            + self.linears.total_weights()
            + self.ln1.iter().chain(&self.ln2).chain([&self.ln_f]).map(|ln| ln.gamma.len() + ln.beta.len()).sum::<usize>()
    }

    /// The block linears, i.e. what pruning operates on.
    pub fn linears(&self) -> &WeightSet {
        &self.linears
    }

    /// Copy of the model with its block linears replaced (names and shapes
    /// must match).
    pub fn with_linears(&self, linears: WeightSet) -> Result<Self> {
        if linears.len() != self.linears.len() {
            return Err(Error::Shape(format!(
                "expected {} linear layers, got {}",
                self.linears.len(),
                linears.len()
            )));
        }
        for (name, w) in self.linears.iter() {
            let other = linears.get(name).ok_or_else(|| Error::Shape(format!("missing layer {name}")))?;
            if other.dim() != w.dim() {
                return Err(Error::Shape(format!("layer {name}: {:?} vs {:?}", other.dim(), w.dim())));
            }
        }
        Ok(Self { linears, ..self.clone() })
    }

    fn w(&self, layer: usize, which: &str) -> &Array2<f32> {
        self.linears.get(&linear_name(layer, which)).expect("validated layer")
    }

    fn embed_tokens(&self, tokens: &[Token]) -> Result<Array2<f32>> {
        if tokens.is_empty() {
            return Err(Error::Empty("empty prompt".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "prompt of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        let mut x = Array2::<f32>::zeros((tokens.len(), self.config.d_model));
        for (t, (&tok, mut row)) in tokens.iter().zip(x.rows_mut()).enumerate() {
            if tok as usize >= self.config.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "token {tok} out of range for vocab {}",
                    self.config.vocab_size
                )));
            }
            row.assign(&(&self.embed.row(tok as usize) + &self.pos_embed.row(t)));
        }
        Ok(x)
    }

    fn attention(&self, layer: usize, h: &Array2<f32>, cap: &mut Capture) -> Result<Array2<f32>> {
        cap.add(layer, "attn.w_q", h)?;
        cap.add(layer, "attn.w_k", h)?;
        cap.add(layer, "attn.w_v", h)?;
        let q = h.dot(&self.w(layer, "attn.w_q").t());
        let k = h.dot(&self.w(layer, "attn.w_k").t());
        let v = h.dot(&self.w(layer, "attn.w_v").t());
        let (n, dh) = (h.nrows(), self.config.d_head());
        let scale = 1.0 / (dh as f32).sqrt();
        let mut heads = Array2::<f32>::zeros((n, self.config.d_model));
        for hd in 0..self.config.n_heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
            let mut scores = qh.dot(&kh.t());
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                let mut mx = f32::NEG_INFINITY;
                for j in 0..=i {
                    row[j] *= scale;
                    mx = mx.max(row[j]);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    row[j] = if j <= i { (row[j] - mx).exp() } else { 0.0 };
                    sum += row[j];
                }
                row.mapv_inplace(|p| p / sum);
            }
            heads.slice_mut(cols).assign(&scores.dot(&vh));
        }
        cap.add(layer, "attn.w_o", &heads)?;
        Ok(heads.dot(&self.w(layer, "attn.w_o").t()))
    }

    fn mlp(&self, layer: usize, h: &Array2<f32>, cap: &mut Capture) -> Result<Array2<f32>> {
        cap.add(layer, "mlp.w_in", h)?;
        let mut hidden = h.dot(&self.w(layer, "mlp.w_in").t());
        hidden.mapv_inplace(gelu);
        cap.add(layer, "mlp.w_out", &hidden)?;
        Ok(hidden.dot(&self.w(layer, "mlp.w_out").t()))
    }

    fn block_with(&self, layer: usize, x: &Array2<f32>, cap: &mut Capture) -> Result<Array2<f32>> {
        let attn = self.attention(layer, &self.ln1[layer].apply(x.view()), cap)?;
        let mid = x + &attn;
        let mlp = self.mlp(layer, &self.ln2[layer].apply(mid.view()), cap)?;
        Ok(attn + mlp)
    }

    /// Output of block `layer` on residual stream `x`, i.e. the amount the
    /// block adds to the stream.
    pub fn block_delta(&self, layer: usize, x: &Array2<f32>) -> Result<Array2<f32>> {
        if layer >= self.config.n_layers {
            return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
        }
        self.block_with(layer, x, &mut Capture::default())
    }

    fn run_blocks(&self, mut x: Array2<f32>, range: std::ops::Range<usize>, cap: &mut Capture) -> Result<Array2<f32>> {
        for l in range {
            x = &x + &self.block_with(l, &x, cap)?;
            check_finite(&x, l)?;
        }
        Ok(x)
    }

    fn logits(&self, x: &Array2<f32>) -> Array2<f32> {
        self.ln_f.apply(x.view()).dot(&self.unembed.t())
    }

    pub fn forward_trace(&self, tokens: &[Token]) -> Result<ForwardTrace> {
        let embedded = self.embed_tokens(tokens)?;
        let mut resid_post = Vec::with_capacity(self.config.n_layers);
        let mut x = embedded.clone();
        for l in 0..self.config.n_layers {
            x = self.run_blocks(x, l..l + 1, &mut Capture::default())?;
            resid_post.push(x.clone());
        }
        let logits = self.logits(&x);
        Ok(ForwardTrace {
            embedded,
            resid_post,
            logits,
        })
    }

    /// Logits (tokens x vocab) and the hook-layer residual stream.
    pub fn forward(&self, tokens: &[Token]) -> Result<(Array2<f32>, ActivationBatch)> {
        let hook = self.config.hook_layer;
        let x = self.run_blocks(self.embed_tokens(tokens)?, 0..hook + 1, &mut Capture::default())?;
        let resid = ActivationBatch::new(x.clone(), site_meta(hook))?;
        let x = self.run_blocks(x, hook + 1..self.config.n_layers, &mut Capture::default())?;
        Ok((self.logits(&x), resid))
    }

    /// Hook-layer residuals for every token of every prompt, in prompt order.
    pub fn collect_activations(&self, prompts: &[Vec<Token>], exec: Exec) -> Result<ActivationBatch> {
        let parts = exec.map(prompts.len(), |i| self.forward(&prompts[i]).map(|(_, r)| r));
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        let mut batch = ActivationBatch::concat(&parts)?;
        batch.meta = site_meta(self.config.hook_layer);
        Ok(batch)
    }

    /// Adds the inputs seen by every block linear to `acc`.
    pub fn capture_linear_inputs(&self, tokens: &[Token], acc: &mut WandaNormAccumulator) -> Result<()> {
        let mut cap = Capture { wanda: Some(acc) };
        self.run_blocks(self.embed_tokens(tokens)?, 0..self.config.n_layers, &mut cap)?;
        Ok(())
    }

    /// Forward pass with the hook-layer stream replaced by its SAE
    /// reconstruction, optionally with one feature zeroed.
    pub fn forward_with_sae_patch(
        &self,
        tokens: &[Token],
        sae: &SaeModel,
        stats: &NormStats,
        ablate_feature: Option<usize>,
    ) -> Result<Array2<f32>> {
        let prefix = self.patch_prefix(tokens, sae, stats)?;
        let x = match ablate_feature {
            None => prefix.patched.clone(),
            Some(f) => {
                check_feature(sae, f)?;
                prefix.ablated(sae, stats, f)?.unwrap_or_else(|| prefix.patched.clone())
            }
        };
        let x = self.run_blocks(x, self.config.hook_layer + 1..self.config.n_layers, &mut Capture::default())?;
        Ok(self.logits(&x))
    }

    fn patch_prefix(&self, tokens: &[Token], sae: &SaeModel, stats: &NormStats) -> Result<PatchPrefix> {
        if sae.d() != self.config.d_model || stats.dim() != self.config.d_model {
            return Err(Error::Shape(format!(
                "SAE width {} / stats width {} vs d_model {}",
                sae.d(),
                stats.dim(),
                self.config.d_model
            )));
        }
        let x = self.run_blocks(self.embed_tokens(tokens)?, 0..self.config.hook_layer + 1, &mut Capture::default())?;
        let d = self.config.d_model;
        let mut patched = Array2::<f32>::zeros(x.dim());
        let mut codes = Vec::with_capacity(x.nrows());
        let mut xh = vec![0.0; d];
        for (row, mut out) in x.rows().into_iter().zip(patched.rows_mut()) {
            stats.normalize_row(row.as_slice().expect("standard layout"), &mut xh);
            let code = sae.encode(&xh)?;
            let recon = sae.decode(&code)?;
            stats.denormalize_row(&recon, out.as_slice_mut().expect("standard layout"));
            codes.push(code);
        }
        check_finite(&patched, self.config.hook_layer)?;
        Ok(PatchPrefix { patched, codes })
    }

    fn final_log_probs(&self, x: Array2<f32>) -> Result<Vec<f64>> {
        let n = x.nrows();
        let x = self.run_blocks(x, self.config.hook_layer + 1..self.config.n_layers, &mut Capture::default())?;
        let last = self.ln_f.apply(x.slice(s![n - 1..n, ..]));
        let logits = last.dot(&self.unembed.t());
        Ok(log_softmax(logits.row(0).as_slice().expect("row")))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = serde_json::to_vec_pretty(&ToyHeader {
            config: self.config.clone(),
            seed: self.seed,
        })?;
        tensorio::atomic_write(&dir.join("toy.json"), &header)?;
        self.to_weight_set()?.save(dir.join("weights"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join("toy.json");
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let header: ToyHeader = serde_json::from_slice(&bytes)?;
        Self::from_weight_set(header.config, header.seed, &WeightSet::load(dir.join("weights"))?)
    }

    /// Every tensor, layer norms as 1 x d rows.
    pub fn to_weight_set(&self) -> Result<WeightSet> {
        let mut ws = WeightSet::new();
        let row = |v: &Array1<f32>| v.clone().insert_axis(Axis(0));
        ws.insert("embed", self.embed.clone())?;
        ws.insert("pos_embed", self.pos_embed.clone())?;
        for (name, w) in self.linears.iter() {
            ws.insert(name.clone(), w.clone())?;
        }
        for l in 0..self.config.n_layers {
            ws.insert(format!("blocks.{l}.ln1.gamma"), row(&self.ln1[l].gamma))?;
            ws.insert(format!("blocks.{l}.ln1.beta"), row(&self.ln1[l].beta))?;
            ws.insert(format!("blocks.{l}.ln2.gamma"), row(&self.ln2[l].gamma))?;
            ws.insert(format!("blocks.{l}.ln2.beta"), row(&self.ln2[l].beta))?;
        }
        ws.insert("ln_f.gamma", row(&self.ln_f.gamma))?;
        ws.insert("ln_f.beta", row(&self.ln_f.beta))?;
        ws.insert("unembed", self.unembed.clone())?;
        Ok(ws)
    }

    pub fn from_weight_set(config: ToyConfig, seed: u64, ws: &WeightSet) -> Result<Self> {
        config.validate()?;
        let (v, d, m) = (config.vocab_size, config.d_model, config.d_mlp);
        let get = |name: &str, shape: (usize, usize)| -> Result<Array2<f32>> {
            let w = ws.get(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if w.dim() != shape {
                return Err(Error::Shape(format!("{name}: {:?}, expected {shape:?}", w.dim())));
            }
            Ok(w.clone())
        };
        let vec = |name: &str| -> Result<Array1<f32>> { Ok(get(name, (1, d))?.row(0).to_owned()) };
        let ln = |prefix: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                gamma: vec(&format!("{prefix}.gamma"))?,
                beta: vec(&format!("{prefix}.beta"))?,
            })
        };
        let mut linears = WeightSet::new();
        let (mut ln1, mut ln2) = (Vec::new(), Vec::new());
        for l in 0..config.n_layers {
            for (which, shape) in [
                ("attn.w_q", (d, d)),
                ("attn.w_k", (d, d)),
                ("attn.w_v", (d, d)),
                ("attn.w_o", (d, d)),
                ("mlp.w_in", (m, d)),
                ("mlp.w_out", (d, m)),
            ] {
                let name = linear_name(l, which);
                linears.insert(name.clone(), get(&name, shape)?)?;
            }
            ln1.push(ln(&format!("blocks.{l}.ln1"))?);
            ln2.push(ln(&format!("blocks.{l}.ln2"))?);
        }
        Ok(Self {
            embed: get("embed", (v, d))?,
            pos_embed: get("pos_embed", (config.max_seq_len, d))?,
            unembed: get("unembed", (v, d))?,
            ln_f: ln("ln_f")?,
            config,
            seed,
            linears,
            ln1,
            ln2,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ToyHeader {
    config: ToyConfig,
    seed: u64,
}

fn site_meta(layer: usize) -> Meta {
    Meta::from([
        ("site".to_string(), "resid_post".to_string()),
        ("layer".to_string(), layer.to_string()),
    ])
}

fn check_finite(x: &Array2<f32>, layer: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("residual stream after block {layer}")));
    }
    Ok(())
}

fn check_feature(sae: &SaeModel, f: usize) -> Result<()> {
    if f >= sae.d_sae() {
        return Err(Error::InvalidArgument(format!("feature {f} out of range for d_sae {}", sae.d_sae())));
    }
    Ok(())
}

struct PatchPrefix {
    patched: Array2<f32>,
    codes: Vec<SparseCode>,
}

impl PatchPrefix {
    /// The patched stream with feature `f` removed, or None if `f` never fires.
    fn ablated(&self, sae: &SaeModel, stats: &NormStats, f: usize) -> Result<Option<Array2<f32>>> {
        let mut out: Option<Array2<f32>> = None;
        for (t, code) in self.codes.iter().enumerate() {
            let Ok(pos) = code.indices.binary_search(&f) else { continue };
            if code.values[pos] == 0.0 {
                continue;
            }
            let x = out.get_or_insert_with(|| self.patched.clone());
            let mut c = code.clone();
            c.ablate(f);
            let recon = sae.decode(&c)?;
            stats.denormalize_row(&recon, x.row_mut(t).into_slice().expect("standard layout"));
        }
        Ok(out)
    }
}

/// Log-softmax in f64 with max subtraction.
pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let mx = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = logits.iter().map(|&v| (v as f64 - mx).exp()).sum::<f64>().ln() + mx;
    logits.iter().map(|&v| v as f64 - lse).collect()
}

/// KL(p ‖ q) in nats from log-probabilities, clamped at 0.
pub fn kl_from_log_probs(log_p: &[f64], log_q: &[f64]) -> f64 {
    let kl: f64 = log_p.iter().zip(log_q).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum();
    kl.max(0.0)
}

/// KL(softmax(p) ‖ softmax(q)).
pub fn kl_divergence(p_logits: &[f32], q_logits: &[f32]) -> f64 {
    kl_from_log_probs(&log_softmax(p_logits), &log_softmax(q_logits))
}

/// Per-prompt state shared across all features ablated on that prompt.
struct PromptCache {
    prefix: PatchPrefix,
    baseline: Vec<f64>,
}

fn build_caches(lm: &ToyLM, sae: &SaeModel, stats: &NormStats, prompts: &[Vec<Token>], exec: Exec) -> Result<Vec<PromptCache>> {
    if prompts.is_empty() {
        return Err(Error::Empty("no ablation prompts".into()));
    }
    exec.map(prompts.len(), |i| {
        let prefix = lm.patch_prefix(&prompts[i], sae, stats)?;
        let baseline = lm.final_log_probs(prefix.patched.clone())?;
        Ok(PromptCache { prefix, baseline })
    })
    .into_iter()
    .collect()
}

fn feature_kl(lm: &ToyLM, sae: &SaeModel, stats: &NormStats, caches: &[PromptCache], f: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in caches {
        if let Some(x) = c.prefix.ablated(sae, stats, f)? {
            total += kl_from_log_probs(&c.baseline, &lm.final_log_probs(x)?);
        }
    }
    Ok(total / caches.len() as f64)
}

/// Mean over prompts of KL(patched ‖ patched with `feature` ablated) at the
/// final token.
pub fn ablation_kl(lm: &ToyLM, sae: &SaeModel, stats: &NormStats, feature: usize, prompts: &[Vec<Token>]) -> Result<f64> {
    check_feature(sae, feature)?;
    let caches = build_caches(lm, sae, stats, prompts, Exec::Sequential)?;
    feature_kl(lm, sae, stats, &caches, feature)
}

/// [`ablation_kl`] for many features over one shared prompt set; parallel
/// over features, results in input order.
pub fn ablation_kl_many(
    lm: &ToyLM,
    sae: &SaeModel,
    stats: &NormStats,
    features: &[usize],
    prompts: &[Vec<Token>],
    exec: Exec,
) -> Result<Vec<f64>> {
    for &f in features {
        check_feature(sae, f)?;
    }
    let caches = build_caches(lm, sae, stats, prompts, exec)?;
    exec.map(features.len(), |i| feature_kl(lm, sae, stats, &caches, features[i]))
        .into_iter()
        .collect()
}

/// Top `n` (robust) and bottom `n` (fragile) features by best match score,
/// ranked descending with ties by index. Both sets are returned ascending.
pub fn classify_robust_fragile(report: &MatchReport, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let total = report.per_feature_best.len();
    if n == 0 || 2 * n > total {
        return Err(Error::InvalidArgument(format!("cannot pick {n} robust and {n} fragile of {total} features")));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| {
        report.per_feature_best[b]
            .1
            .total_cmp(&report.per_feature_best[a].1)
            .then(a.cmp(&b))
    });
    let mut robust = order[..n].to_vec();
    let mut fragile = order[total - n..].to_vec();
    robust.sort_unstable();
    fragile.sort_unstable();
    Ok((robust, fragile))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureCategory {
    Robust,
    Fragile,
}

impl FeatureCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureCategory::Robust => "robust",
            FeatureCategory::Fragile => "fragile",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub per_feature_kl: IndexMap<usize, (FeatureCategory, f64)>,
    pub robust_mean: f64,
    pub fragile_mean: f64,
    pub delta_percent: f64,
    pub prompt_count: usize,
    pub tokens_per_prompt: usize,
    /// Reference distribution of the KL: always the SAE-patched forward.
    pub kl_baseline: String,
}

impl AblationResult {
    pub fn new(
        robust: &[(usize, f64)],
        fragile: &[(usize, f64)],
        prompt_count: usize,
        tokens_per_prompt: usize,
    ) -> Result<Self> {
        if robust.is_empty() || fragile.is_empty() {
            return Err(Error::Empty("robust and fragile sets must be non-empty".into()));
        }
        let mut per_feature_kl = IndexMap::new();
        for (cat, set) in [(FeatureCategory::Robust, robust), (FeatureCategory::Fragile, fragile)] {
            for &(f, kl) in set {
                if kl < 0.0 || !kl.is_finite() {
                    return Err(Error::InvalidArgument(format!("KL {kl} for feature {f}")));
                }
                if per_feature_kl.insert(f, (cat, kl)).is_some() {
                    return Err(Error::InvalidArgument(format!("feature {f} is both robust and fragile")));
                }
            }
        }
        let mean = |s: &[(usize, f64)]| s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64;
        let (robust_mean, fragile_mean) = (mean(robust), mean(fragile));
        let hi = robust_mean.max(fragile_mean);
        let delta_percent = if hi > 0.0 { (robust_mean - fragile_mean).abs() / hi * 100.0 } else { 0.0 };
        Ok(Self {
            per_feature_kl,
            robust_mean,
            fragile_mean,
            delta_percent,
            prompt_count,
            tokens_per_prompt,
            kl_baseline: "sae_patched".into(),
        })
    }

    /// `feature_id,category,mean_kl` rows then the
    /// `robust_mean,fragile_mean,delta_percent` summary.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature_id,category,mean_kl\n");
        for (f, (cat, kl)) in &self.per_feature_kl {
            s.push_str(&format!("{f},{},{kl}\n", cat.as_str()));
        }
        s.push_str("robust_mean,fragile_mean,delta_percent\n");
        s.push_str(&format!("{},{},{}\n", self.robust_mean, self.fragile_mean, self.delta_percent));
        s
    }
}

/// Full robust/fragile ablation study for one SAE and its match report.
pub fn run_ablation(
    lm: &ToyLM,
    sae: &SaeModel,
    stats: &NormStats,
    report: &MatchReport,
    n: usize,
    prompts: &[Vec<Token>],
    exec: Exec,
) -> Result<AblationResult> {
    if report.per_feature_best.len() != sae.d_sae() {
        return Err(Error::Shape(format!(
            "match report covers {} features, SAE has {}",
            report.per_feature_best.len(),
            sae.d_sae()
        )));
    }
    let (robust, fragile) = classify_robust_fragile(report, n)?;
    let all: Vec<usize> = robust.iter().chain(&fragile).copied().collect();
    let kls = ablation_kl_many(lm, sae, stats, &all, prompts, exec)?;
    let pair = |ids: &[usize], off: usize| ids.iter().enumerate().map(|(i, &f)| (f, kls[off + i])).collect::<Vec<_>>();
    AblationResult::new(
        &pair(&robust, 0),
        &pair(&fragile, robust.len()),
        prompts.len(),
        prompts.first().map_or(0, Vec::len),
    )
}

/// exp(mean next-token negative log-likelihood) from full-sequence logits.
pub fn perplexity_from_logits(logits: ArrayView2<f32>, tokens: &[Token]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::InvalidArgument("perplexity needs at least 2 tokens".into()));
    }
    if logits.nrows() != tokens.len() {
        return Err(Error::Shape(format!("{} logit rows for {} tokens", logits.nrows(), tokens.len())));
    }
    let mut nll = 0.0;
    for t in 0..tokens.len() - 1 {
        let lp = log_softmax(logits.row(t).as_slice().expect("row"));
        nll -= lp[tokens[t + 1] as usize];
    }
    Ok((nll / (tokens.len() - 1) as f64).exp())
}

pub fn perplexity(lm: &ToyLM, tokens: &[Token]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::InvalidArgument("perplexity needs at least 2 tokens".into()));
    }
    let (logits, _) = lm.forward(tokens)?;
    perplexity_from_logits(logits.view(), tokens)
}

/// Uniform random token prompts.
pub fn random_prompts(count: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<Token>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7041);
    (0..count)
        .map(|_| (0..len).map(|_| rng.random_range(0..vocab as Token)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyConfig {
        ToyConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_mlp: 32,
            max_seq_len: 16,
            hook_layer: 0,
        }
    }

    #[test]
    fn param_count_formula() {
        let cfg = ToyConfig::default();
        let lm = ToyLM::init(cfg.clone(), 0).unwrap();
        // 2*256*64 + 256*64 + 4*(4*64² + 2*64*256 + 4*64) + 2*64
        assert_eq!(cfg.param_count(), 32768 + 16384 + 4 * (16384 + 32768 + 256) + 128);
        assert_eq!(lm.param_count(), cfg.param_count());
    }

    #[test]
    fn seed_determinism_and_shapes() {
        let a = ToyLM::init(small(), 3).unwrap();
        assert_eq!(a, ToyLM::init(small(), 3).unwrap());
        assert_ne!(a, ToyLM::init(small(), 4).unwrap());
        let toks = random_prompts(1, 16, 32, 0).remove(0);
        let (logits, resid) = a.forward(&toks).unwrap();
        assert_eq!(logits.dim(), (16, 32));
        assert!(logits.iter().all(|v| v.is_finite()));
        assert_eq!(resid.n_rows(), 16);
        assert_eq!(a.forward(&toks).unwrap().0, logits);
    }

    #[test]
    fn invalid_inputs() {
        let lm = ToyLM::init(small(), 0).unwrap();
        assert!(lm.forward(&[]).is_err());
        assert!(lm.forward(&[32]).is_err());
        assert!(lm.forward(&[0; 17]).is_err());
        let bad = ToyConfig { n_heads: 3, ..small() };
        assert!(ToyLM::init(bad, 0).is_err());
        assert!(perplexity(&lm, &[1]).is_err());
    }

    #[test]
    fn trace_matches_forward() {
        let lm = ToyLM::init(small(), 1).unwrap();
        let toks = random_prompts(1, 10, 32, 1).remove(0);
        let trace = lm.forward_trace(&toks).unwrap();
        let (logits, resid) = lm.forward(&toks).unwrap();
        assert_eq!(trace.logits, logits);
        assert_eq!(&trace.resid_post[0], resid.rows());
    }

    #[test]
    fn uniform_logits_perplexity_is_vocab() {
        let mut lm = ToyLM::init(small(), 0).unwrap();
        lm.unembed.fill(0.0);
        let p = perplexity(&lm, &random_prompts(1, 12, 32, 0)[0]).unwrap();
        assert!((p - 32.0).abs() / 32.0 < 1e-6);
    }

    #[test]
    fn kl_properties() {
        assert_eq!(kl_divergence(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert!(kl_divergence(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) > 0.0);
        // Shift invariance of softmax.
        let a = kl_divergence(&[0.5, -1.0], &[0.0, 0.0]);
        let b = kl_divergence(&[10.5, 9.0], &[7.0, 7.0]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn classify_three() {
        let report = MatchReport {
            thresholds: vec![0.7],
            one_way: vec![0.0],
            mnn: vec![0.0],
            greedy: vec![0.0],
            per_feature_best: vec![(0, 0.9), (0, 0.5), (0, 0.1)],
            mutual: vec![false; 3],
            per_feature_mnn_at: vec![vec![false; 3]],
        };
        assert_eq!(classify_robust_fragile(&report, 1).unwrap(), (vec![0], vec![2]));
        assert!(classify_robust_fragile(&report, 2).is_err());
    }

    #[test]
    fn delta_percent_formula() {
        let r = AblationResult::new(&[(0, 2.0)], &[(1, 1.0)], 4, 8).unwrap();
        assert_eq!(r.delta_percent, 50.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("feature_id,category,mean_kl\n0,robust,2\n1,fragile,1\n"));
        assert!(csv.ends_with("robust_mean,fragile_mean,delta_percent\n2,1,50\n"));
        assert!(AblationResult::new(&[(0, 2.0)], &[(0, 1.0)], 4, 8).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let lm = ToyLM::init(small(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        lm.save(dir.path()).unwrap();
        assert_eq!(ToyLM::load(dir.path()).unwrap(), lm);
    }

    #[test]
    fn with_linears_checks_shapes() {
        let lm = ToyLM::init(small(), 0).unwrap();
        let mut ws = WeightSet::new();
        ws.insert("x", Array2::zeros((2, 2))).unwrap();
        assert!(lm.with_linears(ws).is_err());
        assert_eq!(lm.with_linears(lm.linears().clone()).unwrap(), lm);
    }

    #[test]
    fn linear_input_capture_covers_all_layers() {
        let lm = ToyLM::init(small(), 0).unwrap();
        let mut acc = WandaNormAccumulator::new();
        lm.capture_linear_inputs(&[1, 2, 3], &mut acc).unwrap();
        let norms = acc.finish().unwrap();
        assert_eq!(norms.norms.len(), lm.linears().len());
        assert_eq!(norms.token_count, 3);
        assert_eq!(norms.norms["blocks.1.mlp.w_out"].len(), 32);
    }
}
