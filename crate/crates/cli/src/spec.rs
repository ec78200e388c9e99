//! Run matrix schema and validation.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use featgeom::matching::{PRIMARY_TAU, TAU_GRID};
use featgeom::pruning::PruneMethod;
use featgeom::sae::TrainConfig;
use featgeom::toymodel::ToyConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Magnitude,
    Wanda,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Magnitude => "magnitude",
            Method::Wanda => "wanda",
        }
    }

    pub fn prune_method(self) -> Option<PruneMethod> {
        match self {
            Method::None => None,
            Method::Magnitude => Some(PruneMethod::Magnitude),
            Method::Wanda => Some(PruneMethod::Wanda),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ModelSource {
    Toy {
        #[serde(default)]
        config: ToyConfig,
        #[serde(default)]
        seed: u64,
    },
    /// Weights and activations exported from an external checkpoint.
    Imported {
        manifest: PathBuf,
        /// Export of the pruned model's activations; required for pruned
        /// imported runs since pruning happens outside the model runtime.
        #[serde(default)]
        pruned_activations: Option<PathBuf>,
    },
}

impl ModelSource {
    /// Whether both describe the same dense model; an imported source's
    /// pruned-activation export does not change which model it is.
    pub fn same_model(&self, other: &ModelSource) -> bool {
        match (self, other) {
            (ModelSource::Imported { manifest: a, .. }, ModelSource::Imported { manifest: b, .. }) => a == b,
            _ => self == other,
        }
    }
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Toy {
            config: ToyConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    /// Robust and fragile set size.
    pub n: usize,
    pub prompts: usize,
    pub tokens_per_prompt: usize,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            n: 32,
            prompts: 16,
            tokens_per_prompt: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub run_id: String,
    #[serde(default)]
    pub model_source: ModelSource,
    /// Capture layer; the toy model's hook layer when `model_source` is toy.
    #[serde(default)]
    pub layer: Option<usize>,
    pub method: Method,
    #[serde(default)]
    pub sparsity: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub sae: TrainConfig,
    #[serde(default = "default_train_tokens")]
    pub train_tokens: usize,
    #[serde(default = "default_eval_tokens")]
    pub eval_tokens: usize,
    #[serde(default = "default_calibration_tokens")]
    pub calibration_tokens: usize,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_tau_grid")]
    pub tau_grid: Vec<f64>,
    #[serde(default = "default_fragility_tau")]
    pub fragility_tau: f64,
    /// Dense run this pruned run is compared against. Defaults to the only
    /// dense run with the same model source and layer.
    #[serde(default)]
    pub reference: Option<String>,
    #[serde(default)]
    pub ablation: AblationSpec,
    #[serde(default)]
    pub survival_pairs: SurvivalPairs,
}

/// Which dense/pruned SAE pairs the survival curves average over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurvivalPairs {
    /// Dense seed `seeds[0]` against every pruned seed.
    #[default]
    ReferenceSeed,
    /// Every dense seed against every pruned seed.
    AllPairs,
}

fn default_train_tokens() -> usize {
    16_384
}
fn default_eval_tokens() -> usize {
    4_096
}
fn default_calibration_tokens() -> usize {
    2_048
}
fn default_prompt_len() -> usize {
    64
}
fn default_tau_grid() -> Vec<f64> {
    TAU_GRID.to_vec()
}
fn default_fragility_tau() -> f64 {
    PRIMARY_TAU
}

impl RunSpec {
    pub fn is_dense(&self) -> bool {
        self.method == Method::None
    }

    /// Layer actually captured.
    pub fn capture_layer(&self) -> usize {
        match (&self.model_source, self.layer) {
            (_, Some(l)) => l,
            (ModelSource::Toy { config, .. }, None) => config.hook_layer,
            (ModelSource::Imported { .. }, None) => 0,
        }
    }

    /// Toy config with the hook layer set from `layer`.
    pub fn toy_config(&self) -> Option<(ToyConfig, u64)> {
        match &self.model_source {
            ModelSource::Toy { config, seed } => {
                let mut c = config.clone();
                c.hook_layer = self.capture_layer();
                Some((c, *seed))
            }
            ModelSource::Imported { .. } => None,
        }
    }

    fn validate(&self, at: &str) -> std::result::Result<(), String> {
        let field = |f: &str, msg: String| Err(format!("{at}.{f}: {msg}"));
        if self.run_id.is_empty()
            || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.run_id.starts_with('.')
        {
            return field("run_id", format!("{:?} must be non-empty [A-Za-z0-9._-]", self.run_id));
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return field("sparsity", format!("{} outside [0, 1]", self.sparsity));
        }
        if (self.method == Method::None) != (self.sparsity == 0.0) {
            return field(
                "method",
                format!("method {} with sparsity {}: method none iff sparsity 0", self.method.as_str(), self.sparsity),
            );
        }
        if self.seeds.is_empty() {
            return field("seeds", "must be non-empty".into());
        }
        let mut seen = HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return field("seeds", format!("duplicate seed {s}"));
        }
        if self.sae.steps == 0 {
            return field("sae.steps", "must be positive".into());
        }
        if let Err(e) = self.sae.validate() {
            return field("sae", e.to_string());
        }
        for (name, v) in [
            ("train_tokens", self.train_tokens),
            ("eval_tokens", self.eval_tokens),
            ("calibration_tokens", self.calibration_tokens),
            ("prompt_len", self.prompt_len),
        ] {
            if v == 0 {
                return field(name, "must be positive".into());
            }
        }
        if self.tau_grid.is_empty() {
            return field("tau_grid", "must be non-empty".into());
        }
        if let Some(t) = self.tau_grid.iter().find(|t| !(-1.0..=1.0).contains(*t)) {
            return field("tau_grid", format!("threshold {t} outside [-1, 1]"));
        }
        if !(-1.0..=1.0).contains(&self.fragility_tau) {
            return field("fragility_tau", format!("{} outside [-1, 1]", self.fragility_tau));
        }
        if let Some((cfg, _)) = self.toy_config() {
            if let Err(e) = cfg.validate() {
                return field("model_source.config", e.to_string());
            }
            if self.prompt_len > cfg.max_seq_len {
                return field("prompt_len", format!("{} exceeds max_seq_len {}", self.prompt_len, cfg.max_seq_len));
            }
            if self.ablation.tokens_per_prompt > cfg.max_seq_len || self.ablation.tokens_per_prompt == 0 {
                return field(
                    "ablation.tokens_per_prompt",
                    format!("{} must be in 1..={}", self.ablation.tokens_per_prompt, cfg.max_seq_len),
                );
            }
            let d_sae = cfg.d_model * self.sae.expansion_factor;
            if self.sae.k > d_sae {
                return field("sae.k", format!("{} exceeds d_sae {d_sae}", self.sae.k));
            }
            if !self.is_dense() && (self.ablation.n == 0 || 2 * self.ablation.n > d_sae) {
                return field("ablation.n", format!("{} robust + fragile must fit in d_sae {d_sae}", self.ablation.n));
            }
            if self.ablation.prompts == 0 {
                return field("ablation.prompts", "must be positive".into());
            }
        }
        if let ModelSource::Imported { pruned_activations, .. } = &self.model_source {
            if self.is_dense() && pruned_activations.is_some() {
                return field("model_source.pruned_activations", "only valid for pruned runs".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMatrix {
    pub runs: Vec<RunSpec>,
}

impl RunMatrix {
    pub fn get(&self, run_id: &str) -> Option<&RunSpec> {
        self.runs.iter().find(|r| r.run_id == run_id)
    }

    /// Dense run each pruned run is compared against.
    pub fn reference_of(&self, spec: &RunSpec) -> Option<&RunSpec> {
        if spec.is_dense() {
            return None;
        }
        spec.reference.as_deref().and_then(|r| self.get(r))
    }
}

/// Parses and validates a run matrix. Accepts `{"runs": [...]}` or a bare
/// array of run specs.
pub fn parse_run_matrix(text: &str, base: &Path) -> Result<RunMatrix> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| CliError::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
    let runs_value = match value {
        serde_json::Value::Array(_) => value,
        serde_json::Value::Object(mut o) => {
            if let Some(k) = o.keys().find(|k| *k != "runs") {
                return Err(CliError::Config(format!("unknown top-level field {k:?}")));
            }
            o.remove("runs").unwrap_or(serde_json::Value::Array(vec![]))
        }
        _ => return Err(CliError::Config("run matrix must be an object or array".into())),
    };
    let serde_json::Value::Array(items) = runs_value else {
        return Err(CliError::Config("runs: expected an array".into()));
    };
    let mut runs = Vec::with_capacity(items.len());
    for (i, item) in items.into_iter().enumerate() {
        let spec: RunSpec = serde_json::from_value(item).map_err(|e| CliError::Config(format!("runs[{i}]: {e}")))?;
        runs.push(spec);
    }
    let mut matrix = RunMatrix { runs };
    validate_matrix(&mut matrix, base)?;
    Ok(matrix)
}

fn validate_matrix(matrix: &mut RunMatrix, base: &Path) -> Result<()> {
    let mut ids = HashSet::new();
    for (i, r) in matrix.runs.iter_mut().enumerate() {
        r.validate(&format!("runs[{i}]")).map_err(CliError::Config)?;
        if !ids.insert(r.run_id.clone()) {
            return Err(CliError::Config(format!("runs[{i}].run_id: duplicate run id {:?}", r.run_id)));
        }
        if let ModelSource::Imported { manifest, pruned_activations } = &mut r.model_source {
            if manifest.is_relative() {
                *manifest = base.join(&*manifest);
            }
            if let Some(p) = pruned_activations {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
    let index: HashMap<String, usize> = matrix.runs.iter().enumerate().map(|(i, r)| (r.run_id.clone(), i)).collect();
    let snapshot = matrix.runs.clone();
    for (i, r) in matrix.runs.iter_mut().enumerate() {
        if r.is_dense() {
            if r.reference.is_some() {
                return Err(CliError::Config(format!("runs[{i}].reference: dense runs take no reference")));
            }
            continue;
        }
        let same_model = |d: &RunSpec| d.is_dense() && d.model_source.same_model(&r.model_source) && d.capture_layer() == r.capture_layer();
        match &r.reference {
            Some(id) => {
                let Some(&j) = index.get(id) else {
                    return Err(CliError::Config(format!("runs[{i}].reference: unknown run {id:?}")));
                };
                if !same_model(&snapshot[j]) {
                    return Err(CliError::Config(format!(
                        "runs[{i}].reference: {id:?} is not a dense run of the same model and layer"
                    )));
                }
            }
            None => {
                let candidates: Vec<&RunSpec> = snapshot.iter().filter(|d| same_model(d)).collect();
                match candidates.as_slice() {
                    [one] => r.reference = Some(one.run_id.clone()),
                    [] => {
                        return Err(CliError::Config(format!(
                            "runs[{i}].reference: no dense run with the same model and layer"
                        )))
                    }
                    _ => {
                        return Err(CliError::Config(format!(
                            "runs[{i}].reference: several dense candidates, set it explicitly"
                        )))
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn load_run_matrix(path: impl AsRef<Path>) -> Result<RunMatrix> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_run_matrix(&text, &base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunMatrix> {
        parse_run_matrix(s, Path::new("."))
    }

    #[test]
    fn empty_matrix() {
        assert!(parse(r#"{"runs": []}"#).unwrap().runs.is_empty());
        assert!(parse("[]").unwrap().runs.is_empty());
        assert!(parse("{}").unwrap().runs.is_empty());
    }

    #[test]
    fn sparsity_out_of_range_names_field() {
        let err = parse(r#"[{"run_id": "a", "method": "magnitude", "sparsity": 1.5, "seeds": [0]}]"#).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(err.to_string().contains("runs[0].sparsity"), "{err}");
    }

    #[test]
    fn method_sparsity_consistency() {
        assert!(parse(r#"[{"run_id": "a", "method": "none", "sparsity": 0.3, "seeds": [0]}]"#).is_err());
        assert!(parse(r#"[{"run_id": "a", "method": "wanda", "sparsity": 0.0, "seeds": [0]}]"#).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = parse(
            r#"[{"run_id": "a", "method": "none", "seeds": [0]},
                {"run_id": "a", "method": "none", "seeds": [1]}]"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate run id"), "{err}");
    }

    #[test]
    fn syntax_errors_report_position() {
        let err = parse("[\n{\"run_id\": }\n]").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = parse(r#"[{"run_id": "a", "method": "none", "seeds": [0], "sparsty": 0}]"#).unwrap_err();
        assert!(err.to_string().contains("sparsty"), "{err}");
    }

    #[test]
    fn empty_seeds_rejected() {
        let err = parse(r#"[{"run_id": "a", "method": "none", "seeds": []}]"#).unwrap_err();
        assert!(err.to_string().contains("seeds"), "{err}");
    }

    #[test]
    fn primary_grid_of_eleven() {
        let mut runs = vec![r#"{"run_id": "dense", "method": "none", "seeds": [0, 1, 2]}"#.to_string()];
        for m in ["magnitude", "wanda"] {
            for s in [0.1, 0.2, 0.3, 0.4, 0.5] {
                runs.push(format!(r#"{{"run_id": "{m}-{s}", "method": "{m}", "sparsity": {s}, "seeds": [0, 1, 2]}}"#));
            }
        }
        let m = parse(&format!("[{}]", runs.join(","))).unwrap();
        assert_eq!(m.runs.len(), 11);
        assert!(m.runs[1..].iter().all(|r| r.reference.as_deref() == Some("dense")));
    }

    #[test]
    fn reference_must_be_dense() {
        let err = parse(
            r#"[{"run_id": "d", "method": "none", "seeds": [0]},
                {"run_id": "p", "method": "wanda", "sparsity": 0.5, "seeds": [0], "reference": "q"}]"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("unknown run"), "{err}");
        assert!(parse(r#"[{"run_id": "p", "method": "wanda", "sparsity": 0.5, "seeds": [0]}]"#).is_err());
    }
}
