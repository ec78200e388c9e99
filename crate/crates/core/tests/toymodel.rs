use featgeom::sae::SaeModel;
use featgeom::tensorio::{compute_norm_stats, NormStats};
use featgeom::toymodel::{
    ablation_kl, ablation_kl_many, kl_divergence, perplexity, perplexity_from_logits, random_prompts, ToyConfig, ToyLM,
};
use featgeom::Exec;
use ndarray::{Array1, Array2};

fn cfg() -> ToyConfig {
    ToyConfig {
        vocab_size: 64,
        d_model: 32,
        n_layers: 3,
        n_heads: 4,
        d_mlp: 64,
        max_seq_len: 32,
        hook_layer: 1,
    }
}

fn kl_oracle(p: &[f32], q: &[f32]) -> f64 {
    let soft = |l: &[f32]| {
        let m = l.iter().map(|&v| v as f64).fold(f64::MIN, f64::max);
        let e: Vec<f64> = l.iter().map(|&v| (v as f64 - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect::<Vec<_>>()
    };
    let (p, q) = (soft(p), soft(q));
    p.iter().zip(&q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

#[test]
fn residual_stream_identity() {
    let lm = ToyLM::init(cfg(), 4).unwrap();
    for seed in 0..5 {
        let toks = random_prompts(1, 20, 64, seed).remove(0);
        let tr = lm.forward_trace(&toks).unwrap();
        for l in 0..3 {
            let prev = if l == 0 { &tr.embedded } else { &tr.resid_post[l - 1] };
            let delta = lm.block_delta(l, prev).unwrap();
            let diff = &tr.resid_post[l] - prev;
            for (a, b) in diff.iter().zip(delta.iter()) {
                assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }
}

fn identity_sae(d: usize) -> SaeModel {
    let eye = Array2::<f64>::eye(d);
    SaeModel::from_parts(eye.clone(), Array1::zeros(d), eye, Array1::zeros(d), d, 0).unwrap()
}

#[test]
fn identity_patch_preserves_logits() {
    let lm = ToyLM::init(cfg(), 1).unwrap();
    let toks = random_prompts(1, 16, 64, 2).remove(0);
    let (plain, resid) = lm.forward(&toks).unwrap();
    let stats = compute_norm_stats([&resid], usize::MAX).unwrap();
    let patched = lm.forward_with_sae_patch(&toks, &identity_sae(32), &stats, None).unwrap();
    for (a, b) in plain.iter().zip(patched.iter()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn lossy_patch_changes_output() {
    let lm = ToyLM::init(cfg(), 1).unwrap();
    let toks = random_prompts(1, 16, 64, 2).remove(0);
    let (plain, resid) = lm.forward(&toks).unwrap();
    let stats = compute_norm_stats([&resid], usize::MAX).unwrap();
    let sae = SaeModel::init(32, 2, 4, 0).unwrap();
    let patched = lm.forward_with_sae_patch(&toks, &sae, &stats, None).unwrap();
    let last = |m: &Array2<f32>| m.row(15).to_vec();
    assert!(kl_divergence(&last(&plain), &last(&patched)) > 0.0);
    assert!(lm.forward_with_sae_patch(&toks, &sae, &stats, Some(64)).is_err());
}

#[test]
fn ablation_kl_against_direct_sum() {
    let lm = ToyLM::init(cfg(), 7).unwrap();
    let prompts = random_prompts(4, 12, 64, 3);
    let acts = lm.collect_activations(&prompts, Exec::default()).unwrap();
    let stats = compute_norm_stats([&acts], usize::MAX).unwrap();
    let sae = SaeModel::init(32, 2, 4, 1).unwrap();
    let features: Vec<usize> = (0..64).collect();
    let many = ablation_kl_many(&lm, &sae, &stats, &features, &prompts, Exec::default()).unwrap();
    let seq = ablation_kl_many(&lm, &sae, &stats, &features, &prompts, Exec::Sequential).unwrap();
    assert_eq!(many, seq);
    for &f in &[0usize, 5, 17, 63] {
        let mut total = 0.0;
        for p in &prompts {
            let base = lm.forward_with_sae_patch(p, &sae, &stats, None).unwrap();
            let abl = lm.forward_with_sae_patch(p, &sae, &stats, Some(f)).unwrap();
            let n = p.len() - 1;
            total += kl_oracle(&base.row(n).to_vec(), &abl.row(n).to_vec());
        }
        let oracle = total / prompts.len() as f64;
        assert!((many[f] - oracle).abs() < 1e-9, "{f}: {} vs {oracle}", many[f]);
        assert_eq!(ablation_kl(&lm, &sae, &stats, f, &prompts).unwrap(), many[f]);
    }
    assert!(many.iter().all(|&k| k >= 0.0));
    assert!(many.iter().any(|&k| k > 0.0));
}

#[test]
fn dead_feature_ablation_is_exactly_zero() {
    let lm = ToyLM::init(cfg(), 7).unwrap();
    let prompts = random_prompts(3, 10, 64, 3);
    let stats = NormStats::identity(32);
    let mut sae = SaeModel::init(32, 2, 4, 1).unwrap();
    sae.b_enc[9] = -1e6;
    assert_eq!(ablation_kl(&lm, &sae, &stats, 9, &prompts).unwrap(), 0.0);
    assert!(ablation_kl(&lm, &sae, &stats, 9, &[]).is_err());
}

#[test]
fn perplexity_agrees_with_logsumexp_oracle() {
    let lm = ToyLM::init(cfg(), 2).unwrap();
    let toks = random_prompts(1, 24, 64, 9).remove(0);
    let (logits, _) = lm.forward(&toks).unwrap();
    let mut nll = 0.0;
    for t in 0..toks.len() - 1 {
        let row: Vec<f64> = logits.row(t).iter().map(|&v| v as f64).collect();
        let m = row.iter().copied().fold(f64::MIN, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        nll += lse - row[toks[t + 1] as usize];
    }
    let oracle = (nll / (toks.len() - 1) as f64).exp();
    let p = perplexity(&lm, &toks).unwrap();
    assert!((p - oracle).abs() / oracle < 1e-6);
    assert!(p >= 1.0);
    assert_eq!(perplexity_from_logits(logits.view(), &toks).unwrap(), p);
}

#[test]
fn pruned_linears_change_output() {
    let lm = ToyLM::init(cfg(), 3).unwrap();
    let pruned = featgeom::pruning::magnitude_prune(lm.linears(), 0.5, Exec::default()).unwrap();
    let lm2 = lm.with_linears(pruned.weights).unwrap();
    let toks = random_prompts(1, 8, 64, 0).remove(0);
    assert_ne!(lm.forward(&toks).unwrap().0, lm2.forward(&toks).unwrap().0);
    assert_eq!(lm2.embed, lm.embed);
}
