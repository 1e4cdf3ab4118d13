//! Run configuration: strict JSON schema, logged defaults, aggregated validation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::assessment::{HeuristicConfig, QualityHeads, ScenarioWeights};
use crate::evolution::EvolutionConfig;
use crate::fixtures;
use crate::genome::{parse_template_library, ScenarioKind, TemplateLibrary};
use crate::representation::{parse_lexicon, Lexicon, ProjectionWeights};
use crate::verification::{parse_guidelines, BoundaryRuleSet, GuidelineStatement, VerificationConfig};

use super::remote::RemoteConfig;

/// Objects whose keys are data rather than field names. Missing entries are
/// filled from the defaults; supplied entries replace the default entry whole.
const MAP_PATHS: &[&str] = &[
    "slot_values",
    "scenario_weights",
    "evolution.elaborations",
    "heuristic.scenario_keywords",
    "verification.scenario_risk",
    "verification.chain.stage_keywords",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Offline,
    Remote,
    RemoteWithFallback,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Offline => "offline",
            Backend::Remote => "remote",
            Backend::RemoteWithFallback => "remote-with-fallback",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "offline" => Ok(Backend::Offline),
            "remote" => Ok(Backend::Remote),
            "remote-with-fallback" => Ok(Backend::RemoteWithFallback),
            other => Err(format!(
                "unknown backend {other:?}; expected offline, remote or remote-with-fallback"
            )),
        }
    }
}

/// Quality scorer used offline and as the remote fallback.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OfflineScorer {
    Heuristic,
    Heads,
}

/// Optional resource files. Unset entries use the embedded defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResourcePaths {
    pub library: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub guidelines: Option<PathBuf>,
    pub projection_weights: Option<PathBuf>,
    pub quality_heads: Option<PathBuf>,
    /// Replaces the inline `boundary_rules` block when set.
    pub boundary_rules: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: ScenarioKind,
    pub evolution: EvolutionConfig,
    pub paths: ResourcePaths,
    pub slot_values: BTreeMap<String, String>,
    pub backend: Backend,
    pub offline_scorer: OfflineScorer,
    pub remote: RemoteConfig,
    pub output_dir: PathBuf,
    pub scenario_weights: ScenarioWeights,
    /// Its `tau` always equals `evolution.tau`.
    pub verification: VerificationConfig,
    pub boundary_rules: BoundaryRuleSet,
    pub heuristic: HeuristicConfig,
    pub embedding_seed: u64,
    /// Write a checkpoint every this many generations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: ScenarioKind::Diagnosis,
            evolution: EvolutionConfig::default(),
            paths: ResourcePaths::default(),
            slot_values: fixtures::desk_slot_values().into_iter().collect(),
            backend: Backend::Offline,
            offline_scorer: OfflineScorer::Heuristic,
            remote: RemoteConfig::default(),
            output_dir: PathBuf::from("out"),
            scenario_weights: ScenarioWeights::default(),
            verification: VerificationConfig::default(),
            boundary_rules: BoundaryRuleSet::default(),
            heuristic: HeuristicConfig::default(),
            embedding_seed: fixtures::EMBEDDING_SEED,
            checkpoint_every: 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(ValidationReport),
}

/// Every problem found while loading a config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub problems: Vec<String>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid run config ({} problem", self.problems.len())?;
        if self.problems.len() != 1 {
            write!(f, "s")?;
        }
        write!(f, ")")?;
        for p in &self.problems {
            write!(f, "\n  - {p}")?;
        }
        Ok(())
    }
}

/// Parsed contents of every resource a run needs.
#[derive(Clone, Debug)]
pub struct Resources {
    pub library: TemplateLibrary,
    pub lexicon: Lexicon,
    pub guidelines: Vec<GuidelineStatement>,
    pub projection: ProjectionWeights,
    pub heads: QualityHeads,
    pub boundary_rules: BoundaryRuleSet,
}

impl Resources {
    /// Reads each configured file, or the embedded default when unset.
    pub fn load(cfg: &RunConfig) -> Result<Self, Vec<String>> {
        let mut problems = Vec::new();
        let library = load_one(&cfg.paths.library, "library", &mut problems, |b| {
            parse_template_library(b).map_err(|e| e.to_string())
        })
        .unwrap_or_else(fixtures::desk_library);
        let lexicon = load_one(&cfg.paths.lexicon, "lexicon", &mut problems, |b| {
            parse_lexicon(b).map_err(|e| e.to_string())
        })
        .unwrap_or_else(fixtures::default_lexicon);
        let guidelines = load_one(&cfg.paths.guidelines, "guidelines", &mut problems, |b| {
            parse_guidelines(b).map_err(|e| e.to_string())
        })
        .unwrap_or_else(fixtures::default_guidelines);
        let projection = load_one(&cfg.paths.projection_weights, "projection_weights", &mut problems, |b| {
            ProjectionWeights::from_json(b).map_err(|e| e.to_string())
        })
        .unwrap_or_else(fixtures::default_projection_weights);
        let heads = load_one(&cfg.paths.quality_heads, "quality_heads", &mut problems, |b| {
            QualityHeads::from_json(b).map_err(|e| e.to_string())
        })
        .unwrap_or_else(fixtures::default_quality_heads);
        let boundary_rules = load_one(&cfg.paths.boundary_rules, "boundary_rules", &mut problems, |b| {
            serde_json::from_slice::<BoundaryRuleSet>(b).map_err(|e| e.to_string())
        })
        .unwrap_or_else(|| cfg.boundary_rules.clone());

        if problems.is_empty() {
            Ok(Resources {
                library,
                lexicon,
                guidelines,
                projection,
                heads,
                boundary_rules,
            })
        } else {
            Err(problems)
        }
    }
}

fn load_one<T>(
    path: &Option<PathBuf>,
    name: &str,
    problems: &mut Vec<String>,
    parse: impl FnOnce(&[u8]) -> Result<T, String>,
) -> Option<T> {
    let path = path.as_ref()?;
    match std::fs::read(path) {
        Ok(bytes) => match parse(&bytes) {
            Ok(v) => Some(v),
            Err(e) => {
                problems.push(format!("paths.{name}: {} does not parse: {e}", path.display()));
                None
            }
        },
        Err(e) => {
            problems.push(format!("paths.{name}: cannot read {}: {e}", path.display()));
            None
        }
    }
}

/// Reads, completes and validates a config file.
pub fn load_run_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    parse_run_config(&text, base)
}

/// Parses config text; relative paths resolve against `base_dir`.
pub fn parse_run_config(text: &str, base_dir: &Path) -> Result<RunConfig, ConfigError> {
    let invalid = |problems| ConfigError::Invalid(ValidationReport { problems });
    let provided: Value =
        serde_json::from_str(text).map_err(|e| invalid(vec![format!("config is not valid JSON: {e}")]))?;
    if !provided.is_object() {
        return Err(invalid(vec!["config must be a JSON object".into()]));
    }
    let explicit_verification_tau = provided
        .pointer("/verification/tau")
        .and_then(Value::as_f64);

    let defaults = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    let mut merged = provided;
    let mut problems = Vec::new();
    let mut applied = Vec::new();
    complete(&mut merged, &defaults, "", &mut applied, &mut problems);
    for key in &applied {
        log::info!("config: default applied for {key}");
    }

    // Each top-level block deserializes on its own so one bad block does not
    // hide problems in the others.
    let Value::Object(blocks) = merged else { unreachable!() };
    let mut cfg = RunConfig::default();
    macro_rules! block {
        ($($field:ident),*) => {$(
            if let Some(v) = blocks.get(stringify!($field)) {
                match from_block(v.clone(), stringify!($field)) {
                    Ok(x) => cfg.$field = x,
                    Err(e) => problems.push(e),
                }
            }
        )*};
    }
    block!(
        scenario,
        evolution,
        paths,
        slot_values,
        backend,
        offline_scorer,
        remote,
        output_dir,
        scenario_weights,
        verification,
        boundary_rules,
        heuristic,
        embedding_seed,
        checkpoint_every
    );

    if let Some(t) = explicit_verification_tau {
        if t != cfg.evolution.tau {
            problems.push(format!(
                "verification.tau = {t} conflicts with evolution.tau = {}; set only evolution.tau",
                cfg.evolution.tau
            ));
        }
    }
    cfg.verification.tau = cfg.evolution.tau;
    cfg.resolve_paths(base_dir);

    if problems.is_empty() {
        problems.extend(cfg.problems());
    }
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(invalid(problems))
    }
}

fn from_block<T: DeserializeOwned>(v: Value, name: &str) -> Result<T, String> {
    serde_json::from_value(v).map_err(|e| format!("{name}: {e}"))
}

/// Fills missing keys from `default`, recording each one, and reports keys
/// that the schema does not know.
fn complete(
    provided: &mut Value,
    default: &Value,
    path: &str,
    applied: &mut Vec<String>,
    problems: &mut Vec<String>,
) {
    let (Value::Object(p), Value::Object(d)) = (&mut *provided, default) else {
        return;
    };
    let is_map = MAP_PATHS.contains(&path);
    if !is_map {
        let unknown: Vec<String> = p.keys().filter(|k| !d.contains_key(*k)).cloned().collect();
        for k in unknown {
            problems.push(format!("unknown key `{}`", join(path, &k)));
        }
    }
    for (k, dv) in d {
        let key = join(path, k);
        match p.get_mut(k) {
            None => {
                p.insert(k.clone(), dv.clone());
                applied.push(key);
            }
            Some(pv) if !is_map => complete(pv, dv, &key, applied, problems),
            Some(_) => {}
        }
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

impl RunConfig {
    fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let ResourcePaths {
            library,
            lexicon,
            guidelines,
            projection_weights,
            quality_heads,
            boundary_rules,
        } = &mut self.paths;
        for p in [library, lexicon, guidelines, projection_weights, quality_heads, boundary_rules]
            .into_iter()
            .flatten()
        {
            abs(p);
        }
        if let Some(dir) = &mut self.remote.cache_dir {
            abs(dir);
        }
        abs(&mut self.output_dir);
    }

    /// Every violated invariant across the nested blocks, including resource
    /// files that fail to load.
    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> = prefixed("evolution", self.evolution.problems()).collect();
        out.extend(prefixed("remote", self.remote.problems(self.backend)));
        out.extend(prefixed("heuristic", heuristic_problems(&self.heuristic)));
        if self.verification.tau != self.evolution.tau {
            out.push("verification.tau must equal evolution.tau".into());
        }
        match Resources::load(self) {
            Ok(res) => {
                out.extend(prefixed("boundary_rules", res.boundary_rules.problems()));
                out.extend(prefixed("verification", self.verification.problems(&res.boundary_rules)));
                let cats = res.library.categories_for(self.scenario);
                if cats.is_empty() {
                    out.push(format!("library has no templates for scenario {}", self.scenario));
                }
                for t in res.library.templates() {
                    if !t.scenarios.contains(&self.scenario) {
                        continue;
                    }
                    for slot in t.slots() {
                        if !self.slot_values.contains_key(slot) {
                            out.push(format!("slot_values: template {} needs slot {slot:?}", t.id));
                        }
                    }
                }
                if self.offline_scorer == OfflineScorer::Heads
                    && res.heads.input_dim() != res.projection.dims.d_final
                {
                    out.push(format!(
                        "quality heads expect input width {} but projection produces {}",
                        res.heads.input_dim(),
                        res.projection.dims.d_final
                    ));
                }
            }
            Err(ps) => out.extend(ps),
        }
        if self.scenario_weights.weights(self.scenario).is_err() {
            out.push(format!("scenario_weights: no row for scenario {}", self.scenario));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(ValidationReport { problems }))
        }
    }
}

fn prefixed(name: &str, ps: Vec<String>) -> impl Iterator<Item = String> + '_ {
    ps.into_iter().map(move |p| format!("{name}: {p}"))
}

fn heuristic_problems(h: &HeuristicConfig) -> Vec<String> {
    if h.specificity_cap > 0.0 && h.specificity_cap.is_finite() {
        Vec::new()
    } else {
        vec![format!("specificity_cap = {} must be > 0", h.specificity_cap)]
    }
}

/// Default config as pretty JSON, a starting point for hand edits.
pub fn default_config_json() -> String {
    let mut v = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    if let Value::Object(m) = &mut v {
        // tau lives in the evolution block only.
        if let Some(Value::Object(ver)) = m.get_mut("verification") {
            ver.remove("tau");
        }
    }
    serde_json::to_string_pretty(&v).expect("json")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        parse_run_config(text, Path::new("/base"))
    }

    fn problems(text: &str) -> Vec<String> {
        match parse(text) {
            Err(ConfigError::Invalid(r)) => r.problems,
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_gets_standard_defaults() {
        let cfg = parse("{}").unwrap();
        let e = &cfg.evolution;
        assert_eq!(
            (e.population_size, e.tournament_size, e.p_sel, e.p_m0, e.gamma, e.tau),
            (100, 5, 0.8, 0.3, 0.98, 0.75)
        );
        assert_eq!(cfg.verification.tau, 0.75);
        assert_eq!(cfg.backend, Backend::Offline);
        assert_eq!(cfg.output_dir, PathBuf::from("/base/out"));
    }

    #[test]
    fn defaults_are_recorded() {
        let defaults = serde_json::to_value(RunConfig::default()).unwrap();
        let mut v = serde_json::json!({"evolution": {"seed": 3}});
        let (mut applied, mut problems) = (Vec::new(), Vec::new());
        complete(&mut v, &defaults, "", &mut applied, &mut problems);
        assert!(problems.is_empty());
        assert!(applied.contains(&"evolution.population_size".to_string()));
        assert!(applied.contains(&"backend".to_string()));
        assert!(!applied.contains(&"evolution.seed".to_string()));
        assert!(!applied.contains(&"evolution".to_string()));
    }

    #[test]
    fn weights_summing_below_one_name_the_scenario() {
        let ps = problems(
            r#"{"scenario_weights": {"education": {"clarity": 0.3, "specificity": 0.2, "relevance": 0.2, "accuracy_risk": 0.2}}}"#,
        );
        assert_eq!(ps.len(), 1, "{ps:?}");
        assert!(ps[0].contains("scenario education: weights sum to 0.89"), "{}", ps[0]);
    }

    #[test]
    fn unknown_keys_are_named() {
        let ps = problems(r#"{"evolution": {"popsize": 10}, "colour": 1}"#);
        assert!(ps.iter().any(|p| p.contains("`evolution.popsize`")), "{ps:?}");
        assert!(ps.iter().any(|p| p.contains("`colour`")), "{ps:?}");
    }

    #[test]
    fn problems_aggregate_across_blocks() {
        let ps = problems(
            r#"{"evolution": {"p_sel": 1.5, "gamma": 0}, "backend": "remote", "paths": {"lexicon": "missing.json"}}"#,
        );
        assert!(ps.iter().any(|p| p.contains("p_sel")), "{ps:?}");
        assert!(ps.iter().any(|p| p.contains("gamma")), "{ps:?}");
        assert!(ps.iter().any(|p| p.contains("endpoint")), "{ps:?}");
        assert!(ps.iter().any(|p| p.contains("/base/missing.json")), "{ps:?}");
    }

    #[test]
    fn map_entries_replace_defaults_whole() {
        let cfg = parse(r#"{"heuristic": {"scenario_keywords": {"history": ["ecg"]}}}"#).unwrap();
        assert_eq!(cfg.heuristic.scenario_keywords[&ScenarioKind::History], vec!["ecg".to_string()]);
        assert_eq!(
            cfg.heuristic.scenario_keywords[&ScenarioKind::Diagnosis],
            HeuristicConfig::default().scenario_keywords[&ScenarioKind::Diagnosis]
        );
        // A map entry is data, so its keys are not checked against a schema.
        let cfg = parse(r#"{"slot_values": {"extra": "x"}}"#).unwrap();
        assert_eq!(cfg.slot_values["extra"], "x");
        assert_eq!(cfg.slot_values["specialty"], "rheumatology");
    }

    #[test]
    fn verification_tau_follows_evolution() {
        let cfg = parse(r#"{"evolution": {"tau": 0.6}}"#).unwrap();
        assert_eq!(cfg.verification.tau, 0.6);
        let ps = problems(r#"{"evolution": {"tau": 0.6}, "verification": {"tau": 0.7}}"#);
        assert!(ps[0].contains("verification.tau"), "{ps:?}");
    }

    #[test]
    fn type_errors_are_reported() {
        let ps = problems(r#"{"evolution": {"population_size": "many"}, "backend": "cloud"}"#);
        assert_eq!(ps.len(), 2, "{ps:?}");
        assert!(ps[0].starts_with("evolution:") && ps[1].starts_with("backend:"));
    }

    #[test]
    fn default_json_round_trips() {
        let cfg = parse(&default_config_json()).unwrap();
        let mut expected = RunConfig::default();
        expected.resolve_paths(Path::new("/base"));
        assert_eq!(cfg, expected);
    }

    #[test]
    fn reads_files_relative_to_config() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("lex.json"), fixtures::LEXICON_JSON).unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"paths": {"lexicon": "lex.json"}}"#).unwrap();
        let cfg = load_run_config(&path).unwrap();
        assert_eq!(cfg.paths.lexicon.as_deref(), Some(dir.path().join("lex.json").as_path()));

        std::fs::write(dir.path().join("lex.json"), "[").unwrap();
        match load_run_config(&path) {
            Err(ConfigError::Invalid(r)) => assert!(r.problems[0].contains("does not parse")),
            other => panic!("{other:?}"),
        }
    }
}
