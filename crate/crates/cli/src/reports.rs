//! Aggregate CSV reports over the completed runs of a matrix.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use featgeom::fragility::{fit_survival_predictor, SurvivalPredictor, SurvivalSample};

use crate::error::{CliError, Result};
use crate::pipeline::RunResult;
use crate::workspace::write_atomic;

pub const SEED_STABILITY: &str = "seed_stability.csv";
pub const SURVIVAL_CURVES: &str = "survival_curves.csv";
pub const TRANSFERABILITY: &str = "transferability.csv";
pub const FRAGILITY_TAXONOMY: &str = "fragility_taxonomy.csv";
pub const CAUSAL_RELEVANCE: &str = "causal_relevance.csv";
pub const PREDICTIVE_MODEL: &str = "predictive_model.csv";

pub const SEED_STABILITY_HEADER: &[&str] = &["run_id", "method", "sparsity", "tau", "mean_mnn", "std_mnn", "pairs"];
pub const SURVIVAL_CURVES_HEADER: &[&str] = &["run_id", "method", "sparsity", "tau", "one_way", "mnn", "greedy"];
pub const TRANSFERABILITY_HEADER: &[&str] = &["run_id", "method", "sparsity", "transfer_fvu", "transfer_l0", "native_fvu"];
pub const FRAGILITY_TAXONOMY_HEADER: &[&str] = &[
    "run_id",
    "method",
    "sparsity",
    "tau",
    "quintile",
    "mean_firing_rate",
    "survival_rate",
    "rho",
    "p",
    "q1_q5_ratio",
];
pub const CAUSAL_RELEVANCE_HEADER: &[&str] = &[
    "run_id",
    "method",
    "sparsity",
    "robust_mean",
    "fragile_mean",
    "delta_percent",
    "prompt_count",
    "tokens_per_prompt",
    "kl_baseline",
];
pub const PREDICTIVE_MODEL_HEADER: &[&str] = &[
    "scope",
    "tau",
    "intercept",
    "beta_log_fire",
    "beta_sparsity",
    "auc",
    "accuracy",
    "raw_intercept",
    "raw_beta_log_fire",
    "raw_beta_sparsity",
    "n_samples",
    "separated",
];

type Rows = Vec<Vec<String>>;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn run_cols(r: &RunResult) -> Vec<String> {
    vec![r.run_id.clone(), r.method.as_str().to_string(), r.sparsity.to_string()]
}

fn with(mut base: Vec<String>, rest: impl IntoIterator<Item = String>) -> Vec<String> {
    base.extend(rest);
    base
}

fn predictor_row(scope: &str, p: &SurvivalPredictor) -> Vec<String> {
    vec![
        scope.to_string(),
        p.tau.to_string(),
        p.intercept.to_string(),
        p.beta_log_fire.to_string(),
        p.beta_sparsity.to_string(),
        p.auc.to_string(),
        p.accuracy.to_string(),
        p.raw_intercept.to_string(),
        p.raw_beta_log_fire.to_string(),
        p.raw_beta_sparsity.to_string(),
        p.n_samples.to_string(),
        p.separated.to_string(),
    ]
}

/// Pooled fits across all pruned conditions sharing a dense reference, so
/// that the sparsity coefficient is identifiable.
fn pooled_predictors(runs: &[&RunResult]) -> Vec<(String, SurvivalPredictor)> {
    let mut groups: BTreeMap<&str, BTreeMap<u64, (f64, Vec<SurvivalSample>)>> = BTreeMap::new();
    for r in runs {
        let Some(reference) = r.reference.as_deref() else { continue };
        let g = groups.entry(reference).or_default();
        for ts in &r.predictor_samples {
            g.entry(ts.tau.to_bits())
                .or_insert_with(|| (ts.tau, Vec::new()))
                .1
                .extend_from_slice(&ts.samples);
        }
    }
    let mut out = Vec::new();
    for (reference, by_tau) in groups {
        let mut taus: Vec<_> = by_tau.into_values().collect();
        taus.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (tau, samples) in taus {
            if let Ok(p) = fit_survival_predictor(&samples, tau) {
                out.push((format!("pooled:{reference}"), p));
            }
        }
    }
    out
}

/// Rows of each report, in run order. Empty tables are omitted.
pub fn report_tables(results: &[RunResult]) -> Vec<(&'static str, &'static [&'static str], Rows)> {
    let ok: Vec<&RunResult> = results.iter().filter(|r| r.is_ok()).collect();
    let mut stability = Rows::new();
    let mut survival = Rows::new();
    let mut transfer = Rows::new();
    let mut fragility = Rows::new();
    let mut causal = Rows::new();
    let mut predictive = Rows::new();
    for r in &ok {
        if let Some(s) = &r.seed_stability {
            for t in 0..s.thresholds.len() {
                stability.push(with(
                    run_cols(r),
                    [s.thresholds[t].to_string(), s.mean[t].to_string(), s.std[t].to_string(), s.pair_count.to_string()],
                ));
            }
        }
        if let Some(s) = &r.survival {
            for t in 0..s.thresholds.len() {
                survival.push(with(
                    run_cols(r),
                    [s.thresholds[t].to_string(), s.one_way[t].to_string(), s.mnn[t].to_string(), s.greedy[t].to_string()],
                ));
            }
        }
        if let Some(t) = &r.transfer {
            transfer.push(with(run_cols(r), [t.fvu.to_string(), t.l0.to_string(), t.native_fvu.to_string()]));
        }
        if let Some(f) = &r.fragility {
            for q in 0..f.survival_by_quintile.len() {
                fragility.push(with(
                    run_cols(r),
                    [
                        r.fragility_tau.to_string(),
                        format!("Q{}", q + 1),
                        f.mean_rate_by_quintile[q].to_string(),
                        f.survival_by_quintile[q].to_string(),
                        opt(f.spearman_rho),
                        opt(f.p_value),
                        opt(f.q1_q5_ratio),
                    ],
                ));
            }
        }
        if let Some(a) = &r.ablation {
            causal.push(with(
                run_cols(r),
                [
                    a.robust_mean.to_string(),
                    a.fragile_mean.to_string(),
                    a.delta_percent.to_string(),
                    a.prompt_count.to_string(),
                    a.tokens_per_prompt.to_string(),
                    a.kl_baseline.to_string(),
                ],
            ));
        }
        for p in &r.predictors {
            predictive.push(predictor_row(&r.run_id, p));
        }
    }
    for (scope, p) in pooled_predictors(&ok) {
        predictive.push(predictor_row(&scope, &p));
    }
    [
        (SEED_STABILITY, SEED_STABILITY_HEADER, stability),
        (SURVIVAL_CURVES, SURVIVAL_CURVES_HEADER, survival),
        (TRANSFERABILITY, TRANSFERABILITY_HEADER, transfer),
        (FRAGILITY_TAXONOMY, FRAGILITY_TAXONOMY_HEADER, fragility),
        (CAUSAL_RELEVANCE, CAUSAL_RELEVANCE_HEADER, causal),
        (PREDICTIVE_MODEL, PREDICTIVE_MODEL_HEADER, predictive),
    ]
    .into_iter()
    .filter(|(_, _, rows)| !rows.is_empty())
    .collect()
}

/// Writes the non-empty reports into `out_dir` and returns their paths.
/// Failed runs are excluded; having no successful run is an error.
pub fn emit_reports(results: &[RunResult], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if !results.iter().any(RunResult::is_ok) {
        return Err(CliError::Config("no completed runs to report".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut written = Vec::new();
    for (name, header, rows) in report_tables(results) {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for row in &rows {
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Config(format!("csv buffer: {e}")))?;
        let path = out_dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
