//! Stage sequencing for one run and for a whole matrix.

use std::fs;
use std::path::{Path, PathBuf};

use featgeom::fragility::{
    fit_survival_predictor, log_firing_rate, quintile_bins, quintile_survival_fraction, survival_fraction,
    FragilityReport, SurvivalPredictor, SurvivalSample,
};
use featgeom::matching::{seed_stability, survival_reports_both_ways, MatchReport, SeedStabilityReport};
use featgeom::pruning::{
    compute_wanda_norms, magnitude_prune, measured_sparsity, wanda_prune, CalibrationNorms, PruneResult,
    WandaNormAccumulator, WeightSet,
};
use featgeom::sae::{cycle_batches, evaluate_sae, load_with_stats, save_with_stats, train_sae, SaeEvalReport};
use featgeom::tensorio::{
    compute_norm_stats, read_tensor, read_tensor_file, write_tensor, ActivationBatch, ExportManifest, FileKind,
    NormStats, TensorFile,
};
use featgeom::toymodel::{perplexity, random_prompts, run_ablation, AblationResult, Token, ToyLM};
use featgeom::Exec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::spec::{Method, ModelSource, RunMatrix, RunSpec, SurvivalPairs};
use crate::workspace::{read_json, write_atomic, write_json, StageRecord, StageRunner};

pub const FAILED_MARKER: &str = "FAILED";
pub const RESULT_FILE: &str = "result.json";

const SPLIT_TRAIN: u64 = 1;
const SPLIT_EVAL: u64 = 2;
const SPLIT_CALIBRATION: u64 = 3;
const SPLIT_ABLATION: u64 = 4;

fn split_seed(data_seed: u64, split: u64) -> u64 {
    data_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ split.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn prompts_for(tokens: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<Token>> {
    random_prompts(tokens.div_ceil(len), len, vocab, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum RunStatus {
    Ok,
    Failed { stage: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelQuality {
    /// Mean per-prompt perplexity on the eval prompts (toy models only).
    pub perplexity: Option<f64>,
    pub measured_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEval {
    pub seed: u64,
    pub report: SaeEvalReport,
}

/// Dense-to-pruned match rates averaged over SAE pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSummary {
    pub thresholds: Vec<f64>,
    pub one_way: Vec<f64>,
    pub mnn: Vec<f64>,
    pub greedy: Vec<f64>,
    /// (dense seed, pruned seed) pairs averaged over.
    pub pairs: Vec<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    /// Dense-trained SAE on pruned activations.
    pub fvu: f64,
    pub l0: f64,
    /// The same SAE on dense activations.
    pub native_fvu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauSamples {
    pub tau: f64,
    pub samples: Vec<SurvivalSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub method: Method,
    pub sparsity: f64,
    pub reference: Option<String>,
    pub status: RunStatus,
    pub model_quality: Option<ModelQuality>,
    pub sae_eval: Vec<SeedEval>,
    pub seed_stability: Option<SeedStabilityReport>,
    pub survival: Option<SurvivalSummary>,
    pub transfer: Option<TransferRecord>,
    pub fragility_tau: f64,
    pub fragility: Option<FragilityReport>,
    pub predictors: Vec<SurvivalPredictor>,
    pub predictor_samples: Vec<TauSamples>,
    pub ablation: Option<AblationResult>,
    /// Stage execution log of this invocation; not persisted.
    #[serde(skip)]
    pub stages: Vec<StageRecord>,
}

impl RunResult {
    fn empty(spec: &RunSpec, status: RunStatus) -> Self {
        Self {
            run_id: spec.run_id.clone(),
            method: spec.method,
            sparsity: spec.sparsity,
            reference: spec.reference.clone(),
            status,
            model_quality: None,
            sae_eval: Vec::new(),
            seed_stability: None,
            survival: None,
            transfer: None,
            fragility_tau: spec.fragility_tau,
            fragility: None,
            predictors: Vec::new(),
            predictor_samples: Vec::new(),
            ablation: None,
            stages: Vec::new(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatchOutput {
    seed_stability: Option<SeedStabilityReport>,
    /// Dense reference seed vs each pruned seed.
    survival: Vec<(u64, MatchReport)>,
    /// Match rates of every (dense seed, pruned seed) pair, in all-pairs mode.
    #[serde(default)]
    all_pairs: Vec<((u64, u64), MatchReport)>,
}

struct StageFailure {
    stage: String,
    error: CliError,
}

trait StageContext<T> {
    fn at(self, stage: &str) -> std::result::Result<T, StageFailure>;
}

impl<T, E: Into<CliError>> StageContext<T> for std::result::Result<T, E> {
    fn at(self, stage: &str) -> std::result::Result<T, StageFailure> {
        self.map_err(|e| StageFailure {
            stage: stage.to_string(),
            error: e.into(),
        })
    }
}

pub fn run_dir(workspace: &Path, run_id: &str) -> PathBuf {
    workspace.join(run_id)
}

fn sae_stage(seed: u64) -> String {
    format!("sae_seed{seed}")
}

/// Executes every stage of `spec`, reusing cached stages. `reference` is the
/// dense run's directory for pruned runs.
pub fn execute_run(spec: &RunSpec, workspace: &Path, reference: Option<&RunSpec>) -> RunResult {
    let dir = run_dir(workspace, &spec.run_id);
    let mut runner = match StageRunner::new(&dir) {
        Ok(r) => r,
        Err(e) => return failed(spec, &dir, "setup", &e, Vec::new()),
    };
    let outcome = run_stages(spec, workspace, reference, &mut runner);
    let stages = std::mem::take(&mut runner.records);
    match outcome {
        Ok(mut result) => {
            result.stages = stages;
            let marker = dir.join(FAILED_MARKER);
            if marker.exists() {
                let _ = fs::remove_file(&marker);
            }
            if let Err(e) = write_json(&dir.join(RESULT_FILE), &result) {
                return failed(spec, &dir, "result", &e, result.stages);
            }
            result
        }
        Err(f) => failed(spec, &dir, &f.stage, &f.error, stages),
    }
}

fn failed(spec: &RunSpec, dir: &Path, stage: &str, error: &CliError, stages: Vec<StageRecord>) -> RunResult {
    let reason = error.to_string();
    let _ = fs::create_dir_all(dir);
    let _ = write_atomic(&dir.join(FAILED_MARKER), format!("stage: {stage}\nreason: {reason}\n").as_bytes());
    let _ = fs::remove_file(dir.join(RESULT_FILE));
    let mut r = RunResult::empty(
        spec,
        RunStatus::Failed {
            stage: stage.to_string(),
            reason,
        },
    );
    r.stages = stages;
    r
}

fn load_lm(model_dir: &Path, pruned: Option<&Path>) -> Result<ToyLM> {
    let lm = ToyLM::load(model_dir)?;
    Ok(match pruned {
        Some(w) => lm.with_linears(WeightSet::load(w)?)?,
        None => lm,
    })
}

fn load_imported_weights(dir: &Path) -> Result<Option<WeightSet>> {
    let empty = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?.next().is_none();
    Ok(if empty { None } else { Some(WeightSet::load(dir)?) })
}

fn read_split(manifest: &ExportManifest, split: &str, layer: usize) -> Result<ActivationBatch> {
    let paths = manifest.paths(FileKind::Activations, Some(split));
    let mut parts = Vec::new();
    for p in &paths {
        let t: TensorFile = read_tensor_file(p)?;
        let layer_ok = t.meta.get("layer").is_none_or(|l| l == &layer.to_string());
        if layer_ok {
            parts.push(ActivationBatch::from_tensor_file(t)?);
        }
    }
    if parts.is_empty() {
        return Err(CliError::Config(format!(
            "export manifest has no {split} activations for layer {layer}"
        )));
    }
    Ok(ActivationBatch::concat(&parts)?)
}

fn imported_calibration(manifest: &ExportManifest) -> Result<CalibrationNorms> {
    let named = manifest.named(FileKind::Calibration);
    if named.is_empty() {
        return Err(CliError::Config("wanda needs calibration inputs in the export manifest".into()));
    }
    let batches: Vec<(String, ActivationBatch)> = named
        .into_iter()
        .map(|(name, p)| Ok((name, read_tensor(&p)?)))
        .collect::<Result<_>>()?;
    Ok(compute_wanda_norms(batches.iter().map(|(n, b)| (n.as_str(), std::iter::once(b))))?)
}

fn run_stages(
    spec: &RunSpec,
    workspace: &Path,
    reference: Option<&RunSpec>,
    runner: &mut StageRunner,
) -> std::result::Result<RunResult, StageFailure> {
    let exec = Exec::default();
    let ref_dir = match (spec.is_dense(), reference) {
        (true, _) => None,
        (false, Some(r)) => Some(run_dir(workspace, &r.run_id)),
        (false, None) => {
            return Err(StageFailure {
                stage: "reference".into(),
                error: CliError::Config("pruned run without a reference run".into()),
            })
        }
    };
    let ref_spec = reference.filter(|_| !spec.is_dense());
    let toy = spec.toy_config();

    // model
    let model_dir = match &spec.model_source {
        ModelSource::Toy { .. } => {
            let (cfg, seed) = toy.clone().expect("toy source");
            let d = runner
                .run("model", &(&cfg, seed), &[], &["model".into()], |out| {
                    ToyLM::init(cfg.clone(), seed)?.save(out.join("model"))?;
                    Ok(())
                })
                .at("model")?;
            d.join("model")
        }
        ModelSource::Imported { manifest, .. } => {
            let d = runner
                .run("model", &manifest, std::slice::from_ref(manifest), &["weights".into()], |out| {
                    let m = ExportManifest::load(manifest)?;
                    if m.paths(FileKind::Weights, None).is_empty() {
                        // Activation-only export: fine for dense runs, pruning will refuse.
                        fs::create_dir_all(out.join("weights")).map_err(|e| CliError::io(out, e))?;
                    } else {
                        WeightSet::from_export(&m)?.save(out.join("weights"))?;
                    }
                    Ok(())
                })
                .at("model")?;
            d.join("weights")
        }
    };

    // prune
    let pruned_weights = match spec.method.prune_method() {
        None => None,
        Some(method) => {
            let params = (spec.method, spec.sparsity, spec.calibration_tokens, spec.prompt_len, spec.data_seed);
            let d = runner
                .run(
                    "prune",
                    &params,
                    std::slice::from_ref(&model_dir),
                    &["weights".into(), "summary.csv".into()],
                    |out| {
                        let (dense, norms) = match &spec.model_source {
                            ModelSource::Toy { .. } => {
                                let lm = ToyLM::load(&model_dir)?;
                                let norms = if spec.method == Method::Wanda {
                                    let mut acc = WandaNormAccumulator::new();
                                    let prompts = prompts_for(
                                        spec.calibration_tokens,
                                        spec.prompt_len,
                                        lm.config.vocab_size,
                                        split_seed(spec.data_seed, SPLIT_CALIBRATION),
                                    );
                                    for p in &prompts {
                                        lm.capture_linear_inputs(p, &mut acc)?;
                                    }
                                    Some(acc.finish()?)
                                } else {
                                    None
                                };
                                (lm.linears().clone(), norms)
                            }
                            ModelSource::Imported { manifest, .. } => {
                                let ws = load_imported_weights(&model_dir)?.ok_or_else(|| {
                                    CliError::Config("pruning an imported model needs weight files in its export manifest".into())
                                })?;
                                let norms = if spec.method == Method::Wanda {
                                    Some(imported_calibration(&ExportManifest::load(manifest)?)?)
                                } else {
                                    None
                                };
                                (ws, norms)
                            }
                        };
                        let result: PruneResult = match (method, &norms) {
                            (featgeom::pruning::PruneMethod::Wanda, Some(n)) => {
                                write_json(&out.join("calibration_norms.json"), n)?;
                                wanda_prune(&dense, n, spec.sparsity, exec)?
                            }
                            _ => magnitude_prune(&dense, spec.sparsity, exec)?,
                        };
                        result.weights.save(out.join("weights"))?;
                        write_atomic(&out.join("summary.csv"), result.summary_csv().as_bytes())?;
                        Ok(())
                    },
                )
                .at("prune")?;
            Some(d.join("weights"))
        }
    };

    // activations
    let mut act_inputs = vec![model_dir.clone()];
    act_inputs.extend(pruned_weights.clone());
    if let ModelSource::Imported { manifest, pruned_activations } = &spec.model_source {
        act_inputs.push(pruned_activations.clone().unwrap_or_else(|| manifest.clone()));
    }
    let act_params = (spec.train_tokens, spec.eval_tokens, spec.prompt_len, spec.data_seed, spec.capture_layer());
    let act_dir = runner
        .run(
            "activations",
            &act_params,
            &act_inputs,
            &["train.fgt".into(), "eval.fgt".into(), "quality.json".into()],
            |out| {
                let (train, eval, quality) = match &spec.model_source {
                    ModelSource::Toy { .. } => {
                        let lm = load_lm(&model_dir, pruned_weights.as_deref())?;
                        let v = lm.config.vocab_size;
                        let train_p = prompts_for(spec.train_tokens, spec.prompt_len, v, split_seed(spec.data_seed, SPLIT_TRAIN));
                        let eval_p = prompts_for(spec.eval_tokens, spec.prompt_len, v, split_seed(spec.data_seed, SPLIT_EVAL));
                        let train = lm.collect_activations(&train_p, exec)?;
                        let eval = lm.collect_activations(&eval_p, exec)?;
                        let ppl = exec
                            .map(eval_p.len(), |i| perplexity(&lm, &eval_p[i]))
                            .into_iter()
                            .collect::<featgeom::Result<Vec<f64>>>()?;
                        let quality = ModelQuality {
                            perplexity: Some(ppl.iter().sum::<f64>() / ppl.len() as f64),
                            measured_sparsity: measured_sparsity(lm.linears()),
                        };
                        (train, eval, quality)
                    }
                    ModelSource::Imported { manifest, pruned_activations } => {
                        let source = if spec.is_dense() {
                            manifest.clone()
                        } else {
                            pruned_activations.clone().ok_or_else(|| {
                                CliError::Config(
                                    "pruned imported runs need model_source.pruned_activations (an export of the pruned model)".into(),
                                )
                            })?
                        };
                        let m = ExportManifest::load(&source)?;
                        let layer = spec.capture_layer();
                        let weights = match &pruned_weights {
                            Some(w) => Some(WeightSet::load(w)?),
                            None => load_imported_weights(&model_dir)?,
                        };
                        let quality = ModelQuality {
                            perplexity: None,
                            measured_sparsity: weights.as_ref().map_or(0.0, measured_sparsity),
                        };
                        (read_split(&m, "train", layer)?, read_split(&m, "eval", layer)?, quality)
                    }
                };
                write_tensor(out.join("train.fgt"), &train)?;
                write_tensor(out.join("eval.fgt"), &eval)?;
                write_json(&out.join("quality.json"), &quality)?;
                Ok(())
            },
        )
        .at("activations")?;
    let train_path = act_dir.join("train.fgt");
    let eval_path = act_dir.join("eval.fgt");

    // stats
    let stats_dir = runner
        .run("stats", &(), std::slice::from_ref(&train_path), &["stats.json".into()], |out| {
            let train = read_tensor(&train_path)?;
            write_json(&out.join("stats.json"), &compute_norm_stats([&train], usize::MAX)?)?;
            Ok(())
        })
        .at("stats")?;
    let stats_path = stats_dir.join("stats.json");

    // sae_seed*
    let mut sae_dirs = Vec::new();
    for &seed in &spec.seeds {
        let mut cfg = spec.sae.clone();
        cfg.seed = seed;
        let name = sae_stage(seed);
        let d = runner
            .run(
                &name,
                &cfg,
                &[train_path.clone(), stats_path.clone()],
                &["sae".into(), "train_log.csv".into()],
                |out| {
                    let train = read_tensor(&train_path)?;
                    let stats: NormStats = read_json(&stats_path)?;
                    let (sae, log) = train_sae(&cfg, cycle_batches(&train, cfg.batch_size, seed), &stats)?;
                    save_with_stats(&sae, &stats, out.join("sae"))?;
                    write_atomic(&out.join("train_log.csv"), log.to_csv().as_bytes())?;
                    Ok(())
                },
            )
            .at(&name)?;
        sae_dirs.push(d.join("sae"));
    }

    // eval
    let mut eval_inputs = vec![eval_path.clone()];
    eval_inputs.extend(sae_dirs.iter().cloned());
    let eval_dir = runner
        .run("eval", &spec.seeds, &eval_inputs, &["eval.json".into()], |out| {
            let eval = read_tensor(&eval_path)?;
            let mut reports = Vec::new();
            for (seed, d) in spec.seeds.iter().zip(&sae_dirs) {
                let (sae, stats) = load_with_stats(d)?;
                reports.push(SeedEval {
                    seed: *seed,
                    report: evaluate_sae(&sae, [&eval], &stats, exec)?,
                });
            }
            write_json(&out.join("eval.json"), &reports)?;
            Ok(())
        })
        .at("eval")?;

    // Reference artifacts for pruned runs: first dense seed is the reference.
    let ref_paths = ref_spec.zip(ref_dir.as_ref()).map(|(r, d)| {
        let s0 = r.seeds[0];
        (d.join(sae_stage(s0)).join("sae"), d.join("eval").join("eval.json"), d.join("model").join("model"))
    });
    if let Some((sae, eval, _)) = &ref_paths {
        for p in [sae, eval] {
            if !p.exists() {
                return Err(StageFailure {
                    stage: "reference".into(),
                    error: CliError::Config(format!("reference artifact {} is missing", p.display())),
                });
            }
        }
    }

    // match
    let all_pairs = spec.survival_pairs == SurvivalPairs::AllPairs;
    let ref_saes: Vec<(u64, PathBuf)> = match (ref_spec, &ref_dir) {
        (Some(r), Some(d)) if all_pairs => r.seeds.iter().map(|&s| (s, d.join(sae_stage(s)).join("sae"))).collect(),
        _ => Vec::new(),
    };
    let mut match_inputs = sae_dirs.clone();
    if let Some((sae, _, _)) = &ref_paths {
        match_inputs.push(sae.clone());
    }
    match_inputs.extend(ref_saes.iter().skip(1).map(|(_, p)| p.clone()));
    let match_dir = runner
        .run("match", &(&spec.tau_grid, spec.survival_pairs), &match_inputs, &["match.json".into()], |out| {
            let saes = sae_dirs
                .iter()
                .map(|d| Ok(load_with_stats(d)?.0))
                .collect::<Result<Vec<_>>>()?;
            let stability = if saes.len() >= 2 {
                let r = seed_stability(&saes, &spec.tau_grid, exec)?;
                let mut csv = String::from("tau,mean_mnn,std_mnn\n");
                for t in 0..r.thresholds.len() {
                    csv.push_str(&format!("{},{},{}\n", r.thresholds[t], r.mean[t], r.std[t]));
                }
                write_atomic(&out.join("seed_stability.csv"), csv.as_bytes())?;
                Some(r)
            } else {
                None
            };
            let mut survival = Vec::new();
            if let Some((ref_sae, _, _)) = &ref_paths {
                let (dense, _) = load_with_stats(ref_sae)?;
                for (&seed, pruned) in spec.seeds.iter().zip(&saes) {
                    let (fwd, rev) = survival_reports_both_ways(&dense, pruned, &spec.tau_grid, exec)?;
                    write_atomic(&out.join(format!("survival_seed{seed}.csv")), fwd.to_csv().as_bytes())?;
                    write_atomic(&out.join(format!("per_feature_seed{seed}.csv")), fwd.per_feature_csv().as_bytes())?;
                    write_atomic(&out.join(format!("reverse_seed{seed}.csv")), rev.to_csv().as_bytes())?;
                    survival.push((seed, fwd));
                }
            }
            let mut pairs = Vec::new();
            for (dense_seed, d) in &ref_saes {
                let (dense, _) = load_with_stats(d)?;
                for (&seed, pruned) in spec.seeds.iter().zip(&saes) {
                    let (fwd, _) = survival_reports_both_ways(&dense, pruned, &spec.tau_grid, exec)?;
                    pairs.push(((*dense_seed, seed), fwd));
                }
            }
            write_json(
                &out.join("match.json"),
                &MatchOutput {
                    seed_stability: stability,
                    survival,
                    all_pairs: pairs,
                },
            )?;
            Ok(())
        })
        .at("match")?;
    let match_path = match_dir.join("match.json");

    let mut result = RunResult::empty(spec, RunStatus::Ok);
    result.model_quality = Some(read_json(&act_dir.join("quality.json")).at("result")?);
    result.sae_eval = read_json(&eval_dir.join("eval.json")).at("result")?;
    let matched: MatchOutput = read_json(&match_path).at("result")?;
    result.seed_stability = matched.seed_stability.clone();

    let Some((ref_sae, ref_eval, ref_model)) = ref_paths else {
        return Ok(result);
    };
    result.survival = Some(if matched.all_pairs.is_empty() {
        summarize_survival(matched.survival.iter().map(|(s, r)| ((ref_spec.map_or(0, |r| r.seeds[0]), *s), r)), &spec.tau_grid)
    } else {
        summarize_survival(matched.all_pairs.iter().map(|(p, r)| (*p, r)), &spec.tau_grid)
    });

    // transfer
    let transfer_dir = runner
        .run(
            "transfer",
            &(),
            &[ref_sae.clone(), ref_eval.clone(), eval_path.clone()],
            &["transfer.json".into()],
            |out| {
                let (sae, stats) = load_with_stats(&ref_sae)?;
                let eval = read_tensor(&eval_path)?;
                let rep = evaluate_sae(&sae, [&eval], &stats, exec)?;
                let native: Vec<SeedEval> = read_json(&ref_eval)?;
                let rec = TransferRecord {
                    fvu: rep.fvu,
                    l0: rep.l0,
                    native_fvu: native[0].report.fvu,
                };
                write_json(&out.join("transfer.json"), &rec)?;
                Ok(())
            },
        )
        .at("transfer")?;
    result.transfer = Some(read_json(&transfer_dir.join("transfer.json")).at("result")?);

    // fragility
    let frag_params = (spec.fragility_tau, &spec.tau_grid);
    let frag_dir = runner
        .run(
            "fragility",
            &frag_params,
            &[ref_eval.clone(), match_path.clone()],
            &["fragility.json".into(), "fragility.csv".into()],
            |out| {
                let dense: Vec<SeedEval> = read_json(&ref_eval)?;
                let m: MatchOutput = read_json(&match_path)?;
                let rates = &dense[0].report.firing_rate;
                let alive: Vec<bool> = rates.iter().map(|&r| r > 0.0).collect();
                let binning = quintile_bins(rates, &alive)?;
                let mnn: Vec<Vec<bool>> = m.survival.iter().map(|(_, r)| r.mnn_at(spec.fragility_tau)).collect();
                let report = quintile_survival_fraction(&binning, &survival_fraction(&mnn)?)?;
                write_json(&out.join("fragility.json"), &report)?;
                write_atomic(&out.join("fragility.csv"), report.to_csv().as_bytes())?;
                Ok(())
            },
        )
        .at("fragility")?;
    result.fragility = Some(read_json(&frag_dir.join("fragility.json")).at("result")?);

    // ablate
    if let (Some((cfg, _)), Some(r)) = (&toy, ref_spec) {
        let params = (&spec.ablation, spec.data_seed, r.seeds[0], spec.seeds[0]);
        let abl_dir = runner
            .run(
                "ablate",
                &params,
                &[ref_model.clone(), ref_sae.clone(), match_path.clone()],
                &["ablation.json".into(), "ablation.csv".into()],
                |out| {
                    let lm = ToyLM::load(&ref_model)?;
                    let (sae, stats) = load_with_stats(&ref_sae)?;
                    let m: MatchOutput = read_json(&match_path)?;
                    let report = &m.survival[0].1;
                    let prompts = random_prompts(
                        spec.ablation.prompts,
                        spec.ablation.tokens_per_prompt,
                        cfg.vocab_size,
                        split_seed(spec.data_seed, SPLIT_ABLATION),
                    );
                    let res = run_ablation(&lm, &sae, &stats, report, spec.ablation.n, &prompts, exec)?;
                    write_json(&out.join("ablation.json"), &res)?;
                    let mut csv = format!("# kl_baseline={}\n", res.kl_baseline);
                    csv.push_str(&res.to_csv());
                    write_atomic(&out.join("ablation.csv"), csv.as_bytes())?;
                    Ok(())
                },
            )
            .at("ablate")?;
        result.ablation = Some(read_json(&abl_dir.join("ablation.json")).at("result")?);
    }

    // predict
    let pred_params = (&spec.tau_grid, spec.sparsity);
    let pred_dir = runner
        .run(
            "predict",
            &pred_params,
            &[ref_eval.clone(), match_path.clone()],
            &["samples.json".into(), "predictors.json".into(), "predictor.csv".into()],
            |out| {
                let dense: Vec<SeedEval> = read_json(&ref_eval)?;
                let m: MatchOutput = read_json(&match_path)?;
                let (samples, predictors) = fit_predictors(&dense[0].report, &m.survival, &spec.tau_grid, spec.sparsity)?;
                let mut csv = format!("{}\n", SurvivalPredictor::CSV_HEADER);
                for p in &predictors {
                    csv.push_str(&p.csv_row());
                    csv.push('\n');
                }
                write_json(&out.join("samples.json"), &samples)?;
                write_json(&out.join("predictors.json"), &predictors)?;
                write_atomic(&out.join("predictor.csv"), csv.as_bytes())?;
                Ok(())
            },
        )
        .at("predict")?;
    result.predictor_samples = read_json(&pred_dir.join("samples.json")).at("result")?;
    result.predictors = read_json(&pred_dir.join("predictors.json")).at("result")?;
    Ok(result)
}

fn summarize_survival<'a>(reports: impl Iterator<Item = ((u64, u64), &'a MatchReport)>, taus: &[f64]) -> SurvivalSummary {
    let reports: Vec<_> = reports.collect();
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&MatchReport) -> &Vec<f64>| -> Vec<f64> {
        (0..taus.len())
            .map(|t| reports.iter().map(|(_, r)| f(r)[t]).sum::<f64>() / n)
            .collect()
    };
    SurvivalSummary {
        thresholds: taus.to_vec(),
        one_way: mean(&|r| &r.one_way),
        mnn: mean(&|r| &r.mnn),
        greedy: mean(&|r| &r.greedy),
        pairs: reports.iter().map(|(p, _)| *p).collect(),
    }
}

/// Per-τ survival samples over alive dense features and the per-model fit.
/// Thresholds where every feature has the same label yield no predictor.
pub fn fit_predictors(
    dense: &SaeEvalReport,
    survival: &[(u64, MatchReport)],
    taus: &[f64],
    sparsity: f64,
) -> Result<(Vec<TauSamples>, Vec<SurvivalPredictor>)> {
    let mut all = Vec::new();
    let mut predictors = Vec::new();
    for &tau in taus {
        let mnn: Vec<Vec<bool>> = survival.iter().map(|(_, r)| r.mnn_at(tau)).collect();
        let frac = survival_fraction(&mnn)?;
        let samples: Vec<SurvivalSample> = dense
            .firing_rate
            .iter()
            .zip(&frac)
            .filter(|(&r, _)| r > 0.0)
            .map(|(&r, &f)| SurvivalSample {
                log_fire: log_firing_rate(r, dense.n_tokens),
                sparsity,
                label: f > 0.5,
            })
            .collect();
        match fit_survival_predictor(&samples, tau) {
            Ok(p) => predictors.push(p),
            Err(featgeom::Error::Degenerate(_)) => {}
            Err(e) => return Err(e.into()),
        }
        all.push(TauSamples { tau, samples });
    }
    Ok((all, predictors))
}

/// Runs every spec: dense runs first, then pruned runs against their
/// references. Up to `jobs` runs execute concurrently within each phase.
pub fn execute_matrix(matrix: &RunMatrix, workspace: &Path, jobs: usize) -> Vec<RunResult> {
    let n = matrix.runs.len();
    let mut results: Vec<Option<RunResult>> = vec![None; n];
    let dense: Vec<usize> = (0..n).filter(|&i| matrix.runs[i].is_dense()).collect();
    for (i, r) in dense.iter().zip(run_parallel(&dense, jobs, |i| execute_run(&matrix.runs[i], workspace, None))) {
        results[*i] = Some(r);
    }
    let pruned: Vec<usize> = (0..n).filter(|&i| !matrix.runs[i].is_dense()).collect();
    let done: Vec<Option<RunResult>> = results.clone();
    let pruned_results = run_parallel(&pruned, jobs, |i| {
        let spec = &matrix.runs[i];
        let reference = matrix.reference_of(spec);
        let ref_ok = reference
            .and_then(|r| matrix.runs.iter().position(|x| x.run_id == r.run_id))
            .and_then(|j| done[j].as_ref())
            .is_some_and(RunResult::is_ok);
        if !ref_ok {
            let dir = run_dir(workspace, &spec.run_id);
            let err = CliError::Config(format!("reference run {:?} did not complete", spec.reference));
            return failed(spec, &dir, "reference", &err, Vec::new());
        }
        execute_run(spec, workspace, reference)
    });
    for (i, r) in pruned.iter().zip(pruned_results) {
        results[*i] = Some(r);
    }
    results.into_iter().map(|r| r.expect("every run executed")).collect()
}

fn run_parallel<F>(indices: &[usize], jobs: usize, f: F) -> Vec<RunResult>
where
    F: Fn(usize) -> RunResult + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if jobs > 1 && indices.len() > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            return pool.install(|| indices.par_iter().map(|&i| f(i)).collect());
        }
    }
    let _ = jobs;
    indices.iter().map(|&i| f(i)).collect()
}

/// Loads `result.json` of every completed run in the matrix; runs without one
/// are reported as failed with the reason from their marker file.
pub fn collect_results(matrix: &RunMatrix, workspace: &Path) -> Vec<RunResult> {
    matrix
        .runs
        .iter()
        .map(|spec| {
            let dir = run_dir(workspace, &spec.run_id);
            match read_json::<RunResult>(&dir.join(RESULT_FILE)) {
                Ok(r) if !dir.join(FAILED_MARKER).exists() => r,
                _ => {
                    let reason = fs::read_to_string(dir.join(FAILED_MARKER)).unwrap_or_else(|_| "not executed".into());
                    RunResult::empty(
                        spec,
                        RunStatus::Failed {
                            stage: "unknown".into(),
                            reason: reason.trim().to_string(),
                        },
                    )
                }
            }
        })
        .collect()
}
