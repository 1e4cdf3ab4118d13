//! Configuration, scorer backends, checkpointing, metrics and benchmarks
//! around the evolution engine.

mod benchmark;
mod checkpoint;
mod config;
mod metrics;
mod remote;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::assessment::{AssessmentError, Assessor, DimensionScorer, HeadScorer, HeuristicScorer, QualityReport};
use crate::evolution::{Engine, EvolutionError, GatedEvaluator, RunOutcome, RunState, SearchSpace, Variant};
use crate::genome::{serialize_genome, GenomeError, Origin, PromptComponent, PromptGenome};
use crate::representation::{EmbeddingProvider, HashEmbedder, PromptEncoder, RepresentationError};
use crate::verification::{GuidelineIndex, VerificationError, VerificationReport, Verifier};

pub use benchmark::{benchmark_compare, median, BenchmarkReport, RunSummary, VariantSummary, CONVERGENCE_FRACTION};
pub use checkpoint::{
    checkpoint_file_name, checkpoint_resume, checkpoint_write, config_digest, latest_checkpoint,
    read_checkpoint, CheckpointError, CheckpointRecord, CHECKPOINT_FORMAT,
};
pub use config::{
    default_config_json, load_run_config, parse_run_config, Backend, ConfigError, OfflineScorer,
    ResourcePaths, Resources, RunConfig, ValidationReport,
};
pub use metrics::{stats_csv, write_stats_csv, EventLog, STATS_HEADER};
pub use remote::{
    backoff_delay, parse_response, HttpResponse, RemoteClient, RemoteConfig, RemoteError,
    RemoteScorer, ScoreKind, ScorerRequest, ScorerResponse, Sleeper, ThreadSleeper, Transport,
    TransportError, UreqTransport, TOKEN_ENV,
};

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error(transparent)]
    Assessment(#[from] AssessmentError),
    #[error(transparent)]
    Verification(#[from] VerificationError),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
}

impl RuntimeError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            RuntimeError::Config(_) => "config",
            RuntimeError::Evolution(_) => "evolution",
            RuntimeError::Checkpoint(_) => "checkpoint",
            RuntimeError::Remote(_) => "remote",
            RuntimeError::Assessment(_) => "assessment",
            RuntimeError::Verification(_) => "verification",
            RuntimeError::Representation(_) => "representation",
            RuntimeError::Genome(_) => "genome",
            RuntimeError::Io { .. } => "io",
            RuntimeError::Input(_) => "input",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RuntimeError + '_ {
    move |source| RuntimeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Scorers, verifier and search space built from one validated config.
pub struct Pipeline {
    config: RunConfig,
    space: SearchSpace,
    assessor: Assessor,
    verifier: Verifier,
}

impl Pipeline {
    /// Builds with the HTTP transport for remote backends.
    pub fn build(config: &RunConfig) -> Result<Self, RuntimeError> {
        Self::build_with(config, None)
    }

    /// `transport` replaces the HTTP transport; it is never touched offline.
    pub fn build_with(config: &RunConfig, transport: Option<Arc<dyn Transport>>) -> Result<Self, RuntimeError> {
        config.validate()?;
        let res = Resources::load(config)
            .map_err(|problems| ConfigError::Invalid(ValidationReport { problems }))?;
        let lexicon = Arc::new(res.lexicon);
        let provider: Arc<dyn EmbeddingProvider> =
            Arc::new(HashEmbedder::new(config.embedding_seed, res.projection.dims.d)?);

        let offline: Arc<dyn DimensionScorer> = match config.offline_scorer {
            OfflineScorer::Heuristic => Arc::new(HeuristicScorer::new(Arc::clone(&lexicon), config.heuristic.clone())),
            OfflineScorer::Heads => {
                let encoder = PromptEncoder::new(Arc::clone(&provider), Arc::clone(&lexicon), Arc::new(res.projection))?;
                Arc::new(HeadScorer::new(encoder, Arc::new(res.heads))?)
            }
        };
        let assessor = match config.backend {
            Backend::Offline => Assessor::new(offline, config.scenario_weights.clone()),
            Backend::Remote | Backend::RemoteWithFallback => {
                let client = match transport {
                    Some(t) => {
                        let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
                        RemoteClient::new(config.remote.clone(), t, token)?
                    }
                    None => RemoteClient::from_env(config.remote.clone())?,
                };
                let remote = Arc::new(RemoteScorer::new(Arc::new(client)));
                let a = Assessor::new(remote, config.scenario_weights.clone());
                if config.backend == Backend::RemoteWithFallback {
                    a.with_fallback(offline)
                } else {
                    a
                }
            }
        };

        let index = Arc::new(GuidelineIndex::new(res.guidelines, provider.as_ref())?);
        let verifier = Verifier::new(
            Arc::clone(&lexicon),
            provider,
            index,
            res.boundary_rules,
            config.verification.clone(),
        )?;
        let slots: HashMap<String, String> = config.slot_values.clone().into_iter().collect();
        let space = SearchSpace::new(
            Arc::new(res.library),
            config.scenario,
            slots,
            lexicon,
            config.heuristic.clone(),
        )?;
        Ok(Pipeline {
            config: config.clone(),
            space,
            assessor,
            verifier,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn assessor(&self) -> &Assessor {
        &self.assessor
    }

    pub fn verifier(&self) -> &Verifier {
        &self.verifier
    }

    /// Structure-aware runs are gated by verification; generic runs use F = Q.
    pub fn engine(&self, variant: Variant) -> Result<Engine, RuntimeError> {
        let evaluator = match variant {
            Variant::StructureAware => {
                GatedEvaluator::new(self.assessor.clone(), self.verifier.clone(), self.config.evolution.tau)
            }
            Variant::Generic => GatedEvaluator::ungated(self.assessor.clone()),
        };
        Ok(Engine::new(
            self.space.clone(),
            self.config.evolution.clone(),
            variant,
            Arc::new(evaluator),
        )?)
    }

    pub fn evaluate(&self, genome: &PromptGenome) -> Result<QualityReport, RuntimeError> {
        Ok(self.assessor.assess(genome)?)
    }

    pub fn verify(&self, genome: &PromptGenome) -> Result<VerificationReport, RuntimeError> {
        Ok(self.verifier.verify(genome)?)
    }
}

/// Reads a prompt as genome JSON, or as text with `[[category]]` marker lines
/// scored under the configured scenario.
pub fn parse_prompt(bytes: &[u8], pipeline: &Pipeline) -> Result<PromptGenome, RuntimeError> {
    let text = std::str::from_utf8(bytes).map_err(|_| RuntimeError::Input("prompt file is not UTF-8".into()))?;
    if text.trim_start().starts_with('{') {
        return Ok(crate::genome::deserialize_genome(bytes)?);
    }
    let parts = crate::genome::split_marked(text);
    if parts.is_empty() {
        return Err(RuntimeError::Input(
            "prompt has no [[category]] markers; expected genome JSON or marked text".into(),
        ));
    }
    let space = pipeline.space();
    let components = parts
        .into_iter()
        .map(|(cat, t)| Ok(space.rescore(PromptComponent::new(cat, t, 0.0, Origin::Library)?)))
        .collect::<Result<Vec<_>, GenomeError>>()?;
    Ok(PromptGenome::new(0, pipeline.config().scenario, components)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeOptions {
    pub variant: Variant,
    /// Continue from the latest checkpoint in the output directory.
    pub resume: bool,
    /// Stop cleanly once this generation is recorded and checkpointed.
    pub stop_after: Option<usize>,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            variant: Variant::StructureAware,
            resume: false,
            stop_after: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizeStatus {
    Finished(Box<RunOutcome>),
    Paused { generation: usize },
}

pub const STATS_FILE: &str = "stats.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const BEST_GENOME_FILE: &str = "best_genome.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Serialize)]
struct Summary<'a> {
    seed: u64,
    variant: Variant,
    backend: Backend,
    generations: usize,
    stopped_early: bool,
    best_genome_id: u64,
    best_q: f64,
    best_v: f64,
    best_f: f64,
    best_text: &'a str,
}

const PAUSE: &str = "paused";

/// Runs the configured search, writing stats, events, checkpoints, the best
/// genome and a summary under the output directory.
pub fn optimize(pipeline: &Pipeline, opts: &OptimizeOptions) -> Result<OptimizeStatus, RuntimeError> {
    let cfg = pipeline.config();
    let out = cfg.output_dir.as_path();
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let events_path = out.join(EVENTS_FILE);
    let engine = pipeline.engine(opts.variant)?;
    let mut events = EventLog::open(&events_path).map_err(io_err(&events_path))?;

    let start: Option<RunState> = if opts.resume {
        let record = checkpoint_resume(&ckpt_dir)?;
        record.check_matches(opts.variant, cfg.scenario, &cfg.evolution)?;
        log::info!("resuming from generation {}", record.generation());
        Some(record.state)
    } else {
        None
    };
    let evt = |e: std::io::Error| e.to_string();
    events
        .emit(
            if start.is_some() { "run_resumed" } else { "run_started" },
            serde_json::json!({
                "seed": cfg.evolution.seed,
                "variant": opts.variant,
                "backend": cfg.backend,
                "generation": start.as_ref().map_or(0, |s| s.generation),
            }),
        )
        .map_err(io_err(&events_path))?;

    let mut hook = |state: &RunState| -> Result<(), String> {
        let stats = state.history.last().expect("history is nonempty");
        events.generation(stats).map_err(evt)?;
        let every = cfg.checkpoint_every;
        let pausing = opts.stop_after == Some(state.generation) && !state.finished;
        if pausing || (every > 0 && state.generation.is_multiple_of(every)) {
            let record = CheckpointRecord::new(opts.variant, cfg.scenario, &cfg.evolution, state.clone());
            checkpoint_write(&record, &ckpt_dir).map_err(|e| e.to_string())?;
        }
        if pausing {
            return Err(PAUSE.into());
        }
        Ok(())
    };
    let result = match start {
        Some(state) => engine.run_from(state, &mut hook),
        None => engine.run(&mut hook),
    };
    let outcome = match result {
        Ok(o) => o,
        Err(EvolutionError::Hook(msg)) if msg == PAUSE => {
            let generation = opts.stop_after.expect("pause requested");
            events
                .emit("run_paused", serde_json::json!({ "generation": generation }))
                .map_err(io_err(&events_path))?;
            return Ok(OptimizeStatus::Paused { generation });
        }
        Err(e) => return Err(e.into()),
    };

    let stats_path = out.join(STATS_FILE);
    write_stats_csv(&stats_path, &outcome.history).map_err(io_err(&stats_path))?;
    let best_path = out.join(BEST_GENOME_FILE);
    std::fs::write(&best_path, serialize_genome(&outcome.best.genome)).map_err(io_err(&best_path))?;
    let text = crate::genome::render_text(&outcome.best.genome);
    let summary = Summary {
        seed: cfg.evolution.seed,
        variant: opts.variant,
        backend: cfg.backend,
        generations: outcome.history.len(),
        stopped_early: outcome.stopped_early,
        best_genome_id: outcome.best.genome.id(),
        best_q: outcome.best.fitness.q,
        best_v: outcome.best.fitness.v,
        best_f: outcome.best.fitness.f,
        best_text: &text,
    };
    let summary_path = out.join(SUMMARY_FILE);
    std::fs::write(&summary_path, serde_json::to_vec_pretty(&summary).expect("summary serializes"))
        .map_err(io_err(&summary_path))?;
    events
        .emit(
            "run_finished",
            serde_json::json!({
                "generations": outcome.history.len(),
                "stopped_early": outcome.stopped_early,
                "best_f": outcome.best.fitness.f,
            }),
        )
        .map_err(io_err(&events_path))?;
    Ok(OptimizeStatus::Finished(Box::new(outcome)))
}

#[cfg(test)]
mod tests {
    use super::remote::fake::ScriptedTransport;
    use super::*;
    use crate::fixtures;

    fn small(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.evolution.population_size = 16;
        cfg.evolution.max_generations = 6;
        cfg.evolution.epsilon = 0.0;
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn prompts_parse_from_json_or_markers() {
        let p = Pipeline::build(&RunConfig::default()).unwrap();
        let g = parse_prompt(b"[[boundary_statement]]\nUse clinical judgment.\n[[role_definition]]\nYou are a physician.", &p).unwrap();
        assert_eq!(g.components().len(), 2);
        assert!(g.is_canonical());
        assert_eq!(g.scenario(), crate::genome::ScenarioKind::Diagnosis);
        assert!(g.components().iter().all(|c| c.quality() > 0.0));
        let again = parse_prompt(&serialize_genome(&g), &p).unwrap();
        assert_eq!(again, g);
        assert!(matches!(parse_prompt(b"plain words", &p), Err(RuntimeError::Input(_))));
    }

    #[test]
    fn offline_pipeline_never_touches_transport() {
        let dir = tempfile::tempdir().unwrap();
        let t = Arc::new(ScriptedTransport::new(vec![]));
        let p = Pipeline::build_with(&small(dir.path()), Some(Arc::clone(&t) as Arc<dyn Transport>)).unwrap();
        optimize(&p, &OptimizeOptions::default()).unwrap();
        assert_eq!(t.calls(), 0);
    }

    #[test]
    fn fallback_backend_uses_offline_scorer_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.backend = Backend::RemoteWithFallback;
        cfg.remote.endpoint = Some("http://scorer.invalid".into());
        cfg.remote.max_retries = 0;
        let t = Arc::new(ScriptedTransport::new(vec![]));
        let p = Pipeline::build_with(&cfg, Some(Arc::clone(&t) as Arc<dyn Transport>)).unwrap();
        let (genome, ..) = fixtures::evaluation_fixture();
        let r = p.evaluate(&genome).unwrap();
        assert_eq!(r.provenance, crate::assessment::Provenance::Heuristic);
        assert_eq!(t.calls(), 1);

        cfg.backend = Backend::Remote;
        let p = Pipeline::build_with(&cfg, Some(t as Arc<dyn Transport>)).unwrap();
        assert!(matches!(p.evaluate(&genome), Err(RuntimeError::Assessment(_))));
    }

    #[test]
    fn optimize_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::build(&small(dir.path())).unwrap();
        let status = optimize(&p, &OptimizeOptions::default()).unwrap();
        let OptimizeStatus::Finished(outcome) = status else { panic!() };
        let csv = std::fs::read_to_string(dir.path().join(STATS_FILE)).unwrap();
        assert_eq!(csv, stats_csv(&outcome.history));
        assert_eq!(csv.lines().count(), 7);
        let best = crate::genome::deserialize_genome(&std::fs::read(dir.path().join(BEST_GENOME_FILE)).unwrap()).unwrap();
        assert_eq!(best, outcome.best.genome);
        assert_eq!(checkpoint_resume(&dir.path().join(CHECKPOINT_DIR)).unwrap().generation(), 5);
        let events = std::fs::read_to_string(dir.path().join(EVENTS_FILE)).unwrap();
        assert_eq!(events.lines().count(), 1 + 6 + 1);
    }

    #[test]
    fn pause_then_resume_matches_uninterrupted() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = Pipeline::build(&small(a.path())).unwrap();
        optimize(&pa, &OptimizeOptions::default()).unwrap();

        let pb = Pipeline::build(&small(b.path())).unwrap();
        let paused = optimize(&pb, &OptimizeOptions { stop_after: Some(2), ..Default::default() }).unwrap();
        assert_eq!(paused, OptimizeStatus::Paused { generation: 2 });
        assert!(!b.path().join(STATS_FILE).exists());
        // A fresh pipeline, as after a process restart.
        let pb = Pipeline::build(&small(b.path())).unwrap();
        optimize(&pb, &OptimizeOptions { resume: true, ..Default::default() }).unwrap();
        for f in [STATS_FILE, BEST_GENOME_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn resume_rejects_other_settings() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::build(&small(dir.path())).unwrap();
        optimize(&p, &OptimizeOptions { stop_after: Some(1), ..Default::default() }).unwrap();
        let mut cfg = small(dir.path());
        cfg.evolution.p_sel = 0.7;
        let p = Pipeline::build(&cfg).unwrap();
        let err = optimize(&p, &OptimizeOptions { resume: true, ..Default::default() }).unwrap_err();
        assert!(matches!(err, RuntimeError::Checkpoint(CheckpointError::ConfigMismatch)));
    }
}
