//! Command-line surface. `main` only parses and calls [`dispatch`].

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use featgeom::fragility::{quintile_bins, quintile_survival_fraction, survival_fraction};
use featgeom::matching::{survival_report, PRIMARY_TAU, TAU_GRID};
use featgeom::pruning::{magnitude_prune, wanda_prune, CalibrationNorms, PruneMethod, WeightSet};
use featgeom::sae::{cycle_batches, evaluate_sae, load_with_stats, save_with_stats, train_sae, TrainConfig};
use featgeom::synthgen::{gen_dictionary, gen_samples_traced, CoeffDist, FreqProfile, SampleConfig};
use featgeom::tensorio::{compute_norm_stats, read_tensor, write_tensor, write_tensor_file, ActivationBatch, Meta, TensorFile};
use featgeom::toymodel::{random_prompts, run_ablation, ToyLM};
use featgeom::Exec;

use crate::error::{CliError, Result, EXIT_OK, EXIT_RUNS_FAILED};
use crate::pipeline::{collect_results, execute_matrix, RunResult, RunStatus};
use crate::reports::emit_reports;
use crate::spec::load_run_matrix;
use crate::workspace::{read_json, write_atomic, write_json};

#[derive(Debug, Parser)]
#[command(name = "featgeom", version, about = "SAE feature geometry under weight pruning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct WorkspaceArgs {
    /// Run matrix (JSON).
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long, env = "FEATGEOM_WORKSPACE", default_value = "workspace")]
    pub workspace: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute every run of a matrix and emit the reports.
    Run {
        #[command(flatten)]
        ws: WorkspaceArgs,
        /// Runs executed concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-emit the reports from completed runs in a workspace.
    Report {
        #[command(flatten)]
        ws: WorkspaceArgs,
        /// Defaults to `<workspace>/reports`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prune a weight directory.
    Prune {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: PruneMethod,
        #[arg(long)]
        sparsity: f64,
        /// Calibration norms JSON (required for wanda).
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a TopK SAE on FGT1 activation files.
    TrainSae {
        #[arg(long, required = true, num_args = 1..)]
        activations: Vec<PathBuf>,
        /// TrainConfig JSON; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        expansion: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match the decoder dictionaries of two SAEs.
    Match {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_delimiter = ',')]
        tau: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Survival by firing-rate quintile of a dense SAE against pruned SAEs.
    Fragility {
        #[arg(long)]
        dense_sae: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        pruned_sae: Vec<PathBuf>,
        /// Activations the firing rates are measured on.
        #[arg(long, required = true, num_args = 1..)]
        activations: Vec<PathBuf>,
        #[arg(long, default_value_t = PRIMARY_TAU)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ablate the most robust and most fragile features in a toy model.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dense_sae: PathBuf,
        #[arg(long)]
        pruned_sae: PathBuf,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        prompts: usize,
        #[arg(long, default_value_t = 64)]
        tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a ground-truth sparse dictionary and samples from it.
    GenSynth {
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 256)]
        atoms: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        /// Zipf exponent; 0 gives uniform atom frequencies.
        #[arg(long, default_value_t = 1.1)]
        zipf: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_method(s: &str) -> std::result::Result<PruneMethod, String> {
    match s {
        "magnitude" => Ok(PruneMethod::Magnitude),
        "wanda" => Ok(PruneMethod::Wanda),
        _ => Err(format!("unknown method {s:?} (magnitude, wanda)")),
    }
}

fn read_all(paths: &[PathBuf]) -> Result<ActivationBatch> {
    let parts = paths.iter().map(read_tensor).collect::<featgeom::Result<Vec<_>>>()?;
    Ok(ActivationBatch::concat(&parts)?)
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn tau_grid(tau: Option<Vec<f64>>) -> Result<Vec<f64>> {
    let t = tau.unwrap_or_else(|| TAU_GRID.to_vec());
    if t.is_empty() || t.iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(CliError::Config(format!("--tau values must lie in [-1, 1], got {t:?}")));
    }
    Ok(t)
}

fn summarize(results: &[RunResult]) -> i32 {
    let mut failed = 0;
    for r in results {
        match &r.status {
            RunStatus::Ok => {
                let cached = r.stages.iter().filter(|s| s.cached).count();
                println!("{}: ok ({} stages, {} cached)", r.run_id, r.stages.len(), cached);
            }
            RunStatus::Failed { stage, reason } => {
                failed += 1;
                println!("{}: FAILED at {stage}: {reason}", r.run_id);
            }
        }
    }
    if failed > 0 {
        EXIT_RUNS_FAILED
    } else {
        EXIT_OK
    }
}

fn report(results: &[RunResult], out: &Path) -> Result<()> {
    for p in emit_reports(results, out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

/// Runs a parsed command and returns the process exit code.
pub fn dispatch(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    let exec = Exec::default();
    match cli.command {
        Command::Run { ws, jobs } => {
            let matrix = load_run_matrix(&ws.matrix)?;
            if jobs == 0 {
                return Err(CliError::Config("--jobs must be at least 1".into()));
            }
            let results = execute_matrix(&matrix, &ws.workspace, jobs);
            let code = summarize(&results);
            if results.iter().any(RunResult::is_ok) {
                report(&results, &ws.workspace.join("reports"))?;
            }
            Ok(code)
        }
        Command::Report { ws, out } => {
            let matrix = load_run_matrix(&ws.matrix)?;
            let results = collect_results(&matrix, &ws.workspace);
            report(&results, &out.unwrap_or_else(|| ws.workspace.join("reports")))?;
            Ok(if results.iter().all(RunResult::is_ok) { EXIT_OK } else { EXIT_RUNS_FAILED })
        }
        Command::Prune {
            weights,
            method,
            sparsity,
            calibration,
            out,
        } => {
            let ws = WeightSet::load(&weights)?;
            let result = match (method, calibration) {
                (PruneMethod::Magnitude, _) => magnitude_prune(&ws, sparsity, exec)?,
                (PruneMethod::Wanda, Some(c)) => {
                    let norms: CalibrationNorms = read_json(&c)?;
                    wanda_prune(&ws, &norms, sparsity, exec)?
                }
                (PruneMethod::Wanda, None) => return Err(CliError::Config("wanda needs --calibration".into())),
            };
            mkdir(&out)?;
            result.weights.save(out.join("weights"))?;
            write_atomic(&out.join("summary.csv"), result.summary_csv().as_bytes())?;
            print!("{}", result.summary_csv());
            Ok(EXIT_OK)
        }
        Command::TrainSae {
            activations,
            config,
            seed,
            steps,
            k,
            expansion,
            lr,
            batch_size,
            out,
        } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            macro_rules! set {
                ($($opt:ident => $field:ident),*) => { $(if let Some(v) = $opt { cfg.$field = v; })* };
            }
            set!(seed => seed, steps => steps, k => k, expansion => expansion_factor, lr => lr, batch_size => batch_size);
            cfg.validate()?;
            let data = read_all(&activations)?;
            let stats = compute_norm_stats([&data], usize::MAX)?;
            let (sae, log) = train_sae(&cfg, cycle_batches(&data, cfg.batch_size, cfg.seed), &stats)?;
            mkdir(&out)?;
            save_with_stats(&sae, &stats, &out)?;
            write_atomic(&out.join("train_log.csv"), log.to_csv().as_bytes())?;
            let eval = evaluate_sae(&sae, [&data], &stats, exec)?;
            println!("fvu={} l0={} alive={}", eval.fvu, eval.l0, eval.alive_count);
            Ok(EXIT_OK)
        }
        Command::Match { a, b, tau, out } => {
            let taus = tau_grid(tau)?;
            let (sa, _) = load_with_stats(&a)?;
            let (sb, _) = load_with_stats(&b)?;
            let rep = survival_report(&sa, &sb, &taus, exec)?;
            mkdir(&out)?;
            write_atomic(&out.join("survival.csv"), rep.to_csv().as_bytes())?;
            write_atomic(&out.join("per_feature.csv"), rep.per_feature_csv().as_bytes())?;
            print!("{}", rep.to_csv());
            Ok(EXIT_OK)
        }
        Command::Fragility {
            dense_sae,
            pruned_sae,
            activations,
            tau,
            out,
        } => {
            let (dense, stats) = load_with_stats(&dense_sae)?;
            let data = read_all(&activations)?;
            let eval = evaluate_sae(&dense, [&data], &stats, exec)?;
            let mut mnn = Vec::new();
            for p in &pruned_sae {
                let (pruned, _) = load_with_stats(p)?;
                mnn.push(survival_report(&dense, &pruned, &[tau], exec)?.mnn_at(tau));
            }
            let alive: Vec<bool> = eval.firing_rate.iter().map(|&r| r > 0.0).collect();
            let binning = quintile_bins(&eval.firing_rate, &alive)?;
            let rep = quintile_survival_fraction(&binning, &survival_fraction(&mnn)?)?;
            mkdir(&out)?;
            write_atomic(&out.join("fragility.csv"), rep.to_csv().as_bytes())?;
            write_json(&out.join("fragility.json"), &rep)?;
            print!("{}", rep.to_csv());
            Ok(EXIT_OK)
        }
        Command::Ablate {
            model,
            dense_sae,
            pruned_sae,
            n,
            prompts,
            tokens,
            seed,
            out,
        } => {
            let lm = ToyLM::load(&model)?;
            let (dense, stats) = load_with_stats(&dense_sae)?;
            let (pruned, _) = load_with_stats(&pruned_sae)?;
            let rep = survival_report(&dense, &pruned, &TAU_GRID, exec)?;
            let prompts = random_prompts(prompts, tokens, lm.config.vocab_size, seed);
            let res = run_ablation(&lm, &dense, &stats, &rep, n, &prompts, exec)?;
            mkdir(&out)?;
            write_atomic(&out.join("ablation.csv"), res.to_csv().as_bytes())?;
            write_json(&out.join("ablation.json"), &res)?;
            print!("{}", res.to_csv());
            Ok(EXIT_OK)
        }
        Command::GenSynth {
            d,
            atoms,
            k,
            n,
            noise,
            zipf,
            seed,
            out,
        } => {
            let profile = if zipf == 0.0 {
                FreqProfile::Uniform
            } else {
                FreqProfile::Zipf { exponent: zipf }
            };
            let dict = gen_dictionary(d, atoms, profile, seed)?;
            let cfg = SampleConfig {
                k_active: k,
                n,
                noise_sigma: noise,
                coeff: CoeffDist::default(),
            };
            let samples = gen_samples_traced(&dict, &cfg, seed)?;
            mkdir(&out)?;
            let meta = Meta::from([("seed".to_string(), seed.to_string())]);
            write_tensor_file(
                out.join("dictionary.fgt"),
                &TensorFile::from_matrix(&dict.atoms.t().mapv(|v| v as f32), meta.clone()),
            )?;
            let freqs: Vec<f32> = dict.atom_frequencies.iter().map(|&f| f as f32).collect();
            write_tensor_file(out.join("frequencies.fgt"), &TensorFile::from_vector(&freqs, meta))?;
            write_tensor(out.join("samples.fgt"), &samples.batch)?;
            println!("{} samples of {} atoms in d={}", n, atoms, d);
            Ok(EXIT_OK)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::EXIT_CONFIG;

    #[test]
    fn config_errors_exit_3() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.json");
        fs::write(&m, r#"{"runs": [{"run_id": "a", "method": "magnitude", "sparsity": 1.5, "seeds": [0]}]}"#).unwrap();
        let cli = Cli::parse_from([
            "featgeom",
            "run",
            "--matrix",
            m.to_str().unwrap(),
            "--workspace",
            dir.path().join("ws").to_str().unwrap(),
        ]);
        assert_eq!(dispatch(cli), EXIT_CONFIG);
    }

    #[test]
    fn tau_list_parses() {
        let cli = Cli::parse_from(["featgeom", "match", "--a", "x", "--b", "y", "--tau", "0.5,0.7", "--out", "o"]);
        match cli.command {
            Command::Match { tau, .. } => assert_eq!(tau, Some(vec![0.5, 0.7])),
            _ => unreachable!(),
        }
        assert!(tau_grid(Some(vec![1.5])).is_err());
    }
}
