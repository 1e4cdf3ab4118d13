use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::operators::{
    adaptive_mutation_update, crossover, generic_crossover, init_population, mutate, mutate_with,
    tournament_select, MutationLog,
};
use super::{
    constrained_fitness, fitness_moments, should_stop_early, EvolutionConfig, EvolutionError,
    FitnessRecord, GenerationStats, Member,
};
use crate::assessment::{Assessor, HeuristicConfig, HeuristicScorer};
use crate::genome::{
    instantiate, render_marked, ComponentCategory, PromptComponent, PromptGenome, ScenarioKind,
    Template, TemplateLibrary,
};
use crate::parallel::Parallelism;
use crate::representation::Lexicon;
use crate::verification::Verifier;

/// Library, scenario and lexicon a search runs over, with every template
/// instantiated and scored once.
#[derive(Clone)]
pub struct SearchSpace {
    pub library: Arc<TemplateLibrary>,
    pub scenario: ScenarioKind,
    pub slot_values: HashMap<String, String>,
    pub lexicon: Arc<Lexicon>,
    /// Scores single components.
    pub component_scorer: HeuristicScorer,
    pools: BTreeMap<ComponentCategory, Vec<(Template, PromptComponent)>>,
}

impl SearchSpace {
    pub fn new(
        library: Arc<TemplateLibrary>,
        scenario: ScenarioKind,
        slot_values: HashMap<String, String>,
        lexicon: Arc<Lexicon>,
        heuristic: HeuristicConfig,
    ) -> Result<Self, EvolutionError> {
        let component_scorer = HeuristicScorer::new(Arc::clone(&lexicon), heuristic);
        let mut pools = BTreeMap::new();
        for cat in library.categories_for(scenario) {
            let mut pool = Vec::new();
            for t in library.candidates(cat, scenario) {
                let c = instantiate(t, cat, scenario, &slot_values)?;
                let q = component_scorer.component_quality(&c, scenario);
                pool.push((t.clone(), c.with_quality(q)));
            }
            pools.insert(cat, pool);
        }
        if pools.is_empty() {
            return Err(EvolutionError::EmptyPool {
                category: "any".into(),
                scenario: scenario.to_string(),
            });
        }
        Ok(SearchSpace {
            library,
            scenario,
            slot_values,
            lexicon,
            component_scorer,
            pools,
        })
    }

    /// Instantiated templates per category, in library order.
    pub fn pools(&self) -> &BTreeMap<ComponentCategory, Vec<(Template, PromptComponent)>> {
        &self.pools
    }

    pub fn pool(&self, cat: ComponentCategory) -> Option<&Vec<(Template, PromptComponent)>> {
        self.pools.get(&cat)
    }

    pub fn categories(&self) -> Vec<ComponentCategory> {
        self.pools.keys().copied().collect()
    }

    /// Number of distinct library assemblies.
    pub fn size(&self) -> usize {
        self.pools.values().map(Vec::len).product()
    }

    /// Recomputes a component's quality from its text.
    pub fn rescore(&self, c: PromptComponent) -> PromptComponent {
        let q = self.component_scorer.component_quality(&c, self.scenario);
        c.with_quality(q)
    }

    /// Genome assembled from one pool index per category.
    pub fn assemble(&self, choice: &[usize]) -> Result<PromptGenome, EvolutionError> {
        let components = self
            .pools
            .values()
            .zip(choice)
            .map(|(pool, &i)| pool[i].1.clone())
            .collect();
        Ok(PromptGenome::new(0, self.scenario, components)?)
    }
}

/// Computes Q, V and F for a genome.
pub trait FitnessEvaluator: Send + Sync {
    fn evaluate(&self, genome: &PromptGenome) -> Result<FitnessRecord, EvolutionError>;
}

/// Quality from an assessor, gated by a verifier when one is present.
#[derive(Clone)]
pub struct GatedEvaluator {
    assessor: Assessor,
    verifier: Option<Verifier>,
    tau: f64,
}

impl GatedEvaluator {
    pub fn new(assessor: Assessor, verifier: Verifier, tau: f64) -> Self {
        GatedEvaluator {
            assessor,
            verifier: Some(verifier),
            tau,
        }
    }

    /// `F = Q`, with V reported as 1.
    pub fn ungated(assessor: Assessor) -> Self {
        GatedEvaluator {
            assessor,
            verifier: None,
            tau: 1.0,
        }
    }

    pub fn is_gated(&self) -> bool {
        self.verifier.is_some()
    }
}

impl FitnessEvaluator for GatedEvaluator {
    fn evaluate(&self, genome: &PromptGenome) -> Result<FitnessRecord, EvolutionError> {
        let quality = self.assessor.assess(genome)?;
        let q = quality.quality;
        let (v, f, verification) = match &self.verifier {
            Some(verifier) => {
                let report = verifier.verify(genome)?;
                let v = report.v_total;
                (v, constrained_fitness(q, v, self.tau), Some(report))
            }
            None => (1.0, q, None),
        };
        Ok(FitnessRecord {
            q,
            v,
            f,
            quality,
            verification,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Component-level crossover and fusion, adaptive damped mutation, verification gate.
    StructureAware,
    /// One-point string crossover, fixed mutation rate, evaluated without the gate.
    Generic,
}

/// Everything needed to continue a run; a checkpoint is this value serialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub generation: usize,
    pub members: Vec<Member>,
    pub p_m: f64,
    pub rng: ChaCha8Rng,
    pub next_id: u64,
    pub history: Vec<GenerationStats>,
    pub finished: bool,
}

impl RunState {
    /// Highest F, lowest genome id on ties.
    pub fn best(&self) -> &Member {
        best_member(&self.members)
    }

    pub fn stopped_early(&self) -> bool {
        self.history.last().is_some_and(|s| s.stopped_early)
    }
}

fn best_member(members: &[Member]) -> &Member {
    members
        .iter()
        .min_by(|a, b| {
            b.fitness
                .f
                .total_cmp(&a.fitness.f)
                .then(a.genome.id().cmp(&b.genome.id()))
        })
        .expect("population is nonempty")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub best: Member,
    pub history: Vec<GenerationStats>,
    pub stopped_early: bool,
}

impl RunOutcome {
    pub fn best_curve(&self) -> Vec<f64> {
        self.history.iter().map(|s| s.best_f).collect()
    }
}

/// First generation whose best F reaches `fraction` of the final best F.
pub fn generations_to_fraction(history: &[GenerationStats], fraction: f64) -> Option<usize> {
    let last = history.last()?.best_f;
    history
        .iter()
        .find(|s| s.best_f >= fraction * last)
        .map(|s| s.generation)
}

/// The generation loop with a shared evaluation cache.
///
/// Fitness evaluation fans out per the configured [`Parallelism`]; selection,
/// crossover and mutation consume one seeded stream sequentially, so results
/// do not depend on the parallelism mode.
pub struct Engine {
    space: SearchSpace,
    cfg: EvolutionConfig,
    variant: Variant,
    evaluator: Arc<dyn FitnessEvaluator>,
    parallelism: Parallelism,
    cache: Mutex<HashMap<String, FitnessRecord>>,
}

impl Engine {
    pub fn new(
        space: SearchSpace,
        cfg: EvolutionConfig,
        variant: Variant,
        evaluator: Arc<dyn FitnessEvaluator>,
    ) -> Result<Self, EvolutionError> {
        cfg.validate()?;
        Ok(Engine {
            space,
            cfg,
            variant,
            evaluator,
            parallelism: Parallelism::default(),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_parallelism(mut self, parallelism: Parallelism) -> Self {
        self.parallelism = parallelism;
        self
    }

    pub fn config(&self) -> &EvolutionConfig {
        &self.cfg
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    fn cache_key(g: &PromptGenome) -> String {
        format!("{}\n{}", g.scenario(), render_marked(g))
    }

    /// Evaluates genomes, computing each distinct rendering at most once.
    pub fn evaluate_all(&self, genomes: Vec<PromptGenome>) -> Result<Vec<Member>, EvolutionError> {
        let keys: Vec<String> = genomes.iter().map(Self::cache_key).collect();
        let missing: Vec<(String, &PromptGenome)> = {
            let cache = self.cache.lock().expect("cache lock");
            let mut seen = std::collections::HashSet::new();
            keys.iter()
                .zip(&genomes)
                .filter(|(k, _)| !cache.contains_key(*k) && seen.insert(k.as_str()))
                .map(|(k, g)| (k.clone(), g))
                .collect()
        };
        let evaluator = &self.evaluator;
        let fresh = self
            .parallelism
            .try_map(&missing, |(_, g)| evaluator.evaluate(g))?;
        let mut cache = self.cache.lock().expect("cache lock");
        for ((k, _), rec) in missing.iter().zip(fresh) {
            cache.insert(k.clone(), rec);
        }
        Ok(genomes
            .into_iter()
            .zip(&keys)
            .map(|(genome, k)| Member {
                fitness: cache[k].clone(),
                genome,
            })
            .collect())
    }

    /// Generation 0 for `seed`: initial population evaluated and recorded.
    pub fn initialize(&self, seed: u64) -> Result<RunState, EvolutionError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let genomes = init_population(&self.space, &self.cfg, &mut rng)?;
        let members = self.evaluate_all(genomes)?;
        let mut state = RunState {
            generation: 0,
            next_id: members.len() as u64,
            members,
            p_m: self.cfg.p_m0,
            rng,
            history: Vec::new(),
            finished: false,
        };
        self.record(&mut state, MutationLog::default());
        Ok(state)
    }

    fn record(&self, state: &mut RunState, log: MutationLog) {
        let (mean, sigma) = fitness_moments(&state.members);
        let best_f = state.best().fitness.f;
        if self.variant == Variant::StructureAware {
            state.p_m = adaptive_mutation_update(state.p_m, sigma, mean, &self.cfg);
        }
        let mut best_history: Vec<f64> = state.history.iter().map(|s| s.best_f).collect();
        best_history.push(best_f);
        let stopped_early = should_stop_early(&best_history, &self.cfg);
        state.history.push(GenerationStats {
            generation: state.generation,
            best_f,
            mean_f: mean,
            sigma_f: sigma,
            p_m: state.p_m,
            modifications: log.modified,
            replace_fallbacks: log.replace_fallbacks,
            stopped_early,
        });
        state.finished = stopped_early || state.generation + 1 >= self.cfg.max_generations;
    }

    /// Breeds, evaluates and records one generation.
    pub fn step(&self, state: &mut RunState) -> Result<(), EvolutionError> {
        if state.finished {
            return Ok(());
        }
        let cfg = &self.cfg;
        let mut order: Vec<usize> = (0..state.members.len()).collect();
        order.sort_by(|&a, &b| {
            let (ma, mb) = (&state.members[a], &state.members[b]);
            mb.fitness
                .f
                .total_cmp(&ma.fitness.f)
                .then(ma.genome.id().cmp(&mb.genome.id()))
        });
        let mut next: Vec<PromptGenome> = order[..cfg.elitism]
            .iter()
            .map(|&i| state.members[i].genome.clone())
            .collect();
        let mut log = MutationLog::default();
        let rng = &mut state.rng;
        while next.len() < cfg.population_size {
            let a = &state.members[tournament_select(&state.members, cfg, rng)?];
            let b = &state.members[tournament_select(&state.members, cfg, rng)?];
            let child = match self.variant {
                Variant::StructureAware => {
                    let child = crossover(a, b, &self.space, cfg, rng, &mut log)?;
                    mutate(&child, state.generation, state.p_m, &self.space, cfg, rng, &mut log)?
                }
                Variant::Generic => {
                    let child = generic_crossover(&a.genome, &b.genome, &self.space, rng)?;
                    mutate_with(&child, |_| cfg.p_m0, &self.space, cfg, rng, &mut log)?
                }
            };
            next.push(child.with_id(state.next_id));
            state.next_id += 1;
        }
        state.members = self.evaluate_all(next)?;
        state.generation += 1;
        self.record(state, log);
        Ok(())
    }

    /// Steps `state` to completion, calling `hook` after every generation.
    pub fn run_from(
        &self,
        mut state: RunState,
        mut hook: impl FnMut(&RunState) -> Result<(), String>,
    ) -> Result<RunOutcome, EvolutionError> {
        while !state.finished {
            self.step(&mut state)?;
            hook(&state).map_err(EvolutionError::Hook)?;
        }
        Ok(RunOutcome {
            best: state.best().clone(),
            stopped_early: state.stopped_early(),
            history: state.history,
        })
    }

    /// Full run from the configured seed; `hook` also sees generation 0.
    pub fn run(&self, mut hook: impl FnMut(&RunState) -> Result<(), String>) -> Result<RunOutcome, EvolutionError> {
        self.run_seed(self.cfg.seed, &mut hook)
    }

    pub fn run_seed(
        &self,
        seed: u64,
        mut hook: impl FnMut(&RunState) -> Result<(), String>,
    ) -> Result<RunOutcome, EvolutionError> {
        let state = self.initialize(seed)?;
        hook(&state).map_err(EvolutionError::Hook)?;
        self.run_from(state, hook)
    }
}

pub fn run_evolution(
    space: SearchSpace,
    cfg: EvolutionConfig,
    variant: Variant,
    evaluator: Arc<dyn FitnessEvaluator>,
) -> Result<RunOutcome, EvolutionError> {
    Engine::new(space, cfg, variant, evaluator)?.run(|_| Ok(()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapePoint {
    /// Pool index per category, in canonical category order.
    pub choice: Vec<usize>,
    pub fitness: FitnessRecord,
}

/// Every library assembly with its fitness, in lexicographic choice order.
pub fn exhaustive_landscape(
    space: &SearchSpace,
    evaluator: &dyn FitnessEvaluator,
    parallelism: Parallelism,
) -> Result<Vec<LandscapePoint>, EvolutionError> {
    let sizes: Vec<usize> = space.pools().values().map(Vec::len).collect();
    let total: usize = sizes.iter().product();
    let choices: Vec<Vec<usize>> = (0..total)
        .map(|mut n| {
            let mut c = vec![0; sizes.len()];
            for (slot, &s) in c.iter_mut().zip(&sizes).rev() {
                *slot = n % s;
                n /= s;
            }
            c
        })
        .collect();
    parallelism.try_map(&choices, |choice| {
        let genome = space.assemble(choice)?;
        Ok(LandscapePoint {
            choice: choice.clone(),
            fitness: evaluator.evaluate(&genome)?,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assessment::ScenarioWeights;
    use crate::fixtures;
    use crate::genome::parse_template_library;

    fn heuristic_assessor(lexicon: &Arc<Lexicon>) -> Assessor {
        Assessor::new(
            Arc::new(HeuristicScorer::new(Arc::clone(lexicon), HeuristicConfig::default())),
            ScenarioWeights::default(),
        )
    }

    fn small_cfg() -> EvolutionConfig {
        EvolutionConfig {
            population_size: 20,
            max_generations: 8,
            ..EvolutionConfig::default()
        }
    }

    fn desk_engine(cfg: EvolutionConfig, variant: Variant) -> Engine {
        let lexicon = Arc::new(fixtures::default_lexicon());
        let space = SearchSpace::new(
            Arc::new(fixtures::desk_library()),
            ScenarioKind::Diagnosis,
            fixtures::desk_slot_values(),
            Arc::clone(&lexicon),
            HeuristicConfig::default(),
        )
        .unwrap();
        let eval = Arc::new(GatedEvaluator::ungated(heuristic_assessor(&lexicon)));
        Engine::new(space, cfg, variant, eval).unwrap()
    }

    #[test]
    fn one_generation() {
        let cfg = EvolutionConfig {
            max_generations: 1,
            ..small_cfg()
        };
        let out = desk_engine(cfg, Variant::StructureAware).run(|_| Ok(())).unwrap();
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn degenerate_space_stops_at_first_eligible_generation() {
        let lexicon = Arc::new(fixtures::default_lexicon());
        let json = r#"{"templates": [
            {"id": "r", "category": "role_definition", "scenarios": ["diagnosis"], "complexity": "moderate", "text": "You are a physician.", "base_quality": 0.5},
            {"id": "b", "category": "boundary_statement", "scenarios": ["diagnosis"], "complexity": "moderate", "text": "Consult healthcare provider.", "base_quality": 0.5}
        ]}"#;
        let space = SearchSpace::new(
            Arc::new(parse_template_library(json.as_bytes()).unwrap()),
            ScenarioKind::Diagnosis,
            HashMap::new(),
            Arc::clone(&lexicon),
            HeuristicConfig::default(),
        )
        .unwrap();
        assert_eq!(space.size(), 1);
        let expected = space.assemble(&[0, 0]).unwrap();
        let cfg = EvolutionConfig {
            mutation_ops: super::super::MutationOpWeights {
                synonym: 0.0,
                elaborate: 0.0,
                simplify: 0.0,
                replace: 1.0,
            },
            ..small_cfg()
        };
        let eval = Arc::new(GatedEvaluator::ungated(heuristic_assessor(&lexicon)));
        let out = run_evolution(space, cfg.clone(), Variant::StructureAware, eval).unwrap();
        assert_eq!(render_marked(&out.best.genome), render_marked(&expected));
        assert!(out.stopped_early);
        assert_eq!(out.history.len(), cfg.early_stop_window + 1);
    }

    #[test]
    fn deterministic_and_parallelism_independent() {
        let a = desk_engine(small_cfg(), Variant::StructureAware)
            .with_parallelism(Parallelism::Sequential)
            .run(|_| Ok(()))
            .unwrap();
        let b = desk_engine(small_cfg(), Variant::StructureAware)
            .with_parallelism(Parallelism::Parallel)
            .run(|_| Ok(()))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn elitism_keeps_best_monotone() {
        for variant in [Variant::StructureAware, Variant::Generic] {
            let out = desk_engine(small_cfg(), variant).run(|_| Ok(())).unwrap();
            for w in out.history.windows(2) {
                assert!(w[1].best_f >= w[0].best_f);
            }
        }
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let engine = desk_engine(small_cfg(), Variant::StructureAware);
        let full = engine.run(|_| Ok(())).unwrap();
        let mut saved = None;
        let _ = engine.run(|s| {
            if s.generation == 3 {
                saved = Some(serde_json::to_vec(s).unwrap());
            }
            Ok(())
        });
        let state: RunState = serde_json::from_slice(&saved.unwrap()).unwrap();
        let fresh = desk_engine(small_cfg(), Variant::StructureAware);
        let resumed = fresh.run_from(state, |_| Ok(())).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn landscape_enumerates_every_assembly() {
        let engine = desk_engine(small_cfg(), Variant::StructureAware);
        let lexicon = Arc::new(fixtures::default_lexicon());
        let eval = GatedEvaluator::ungated(heuristic_assessor(&lexicon));
        let points = exhaustive_landscape(engine.space(), &eval, Parallelism::default()).unwrap();
        assert_eq!(points.len(), 7776);
        assert_eq!(points[0].choice, [0, 0, 0, 0, 0]);
        assert_eq!(points[7775].choice, [5, 5, 5, 5, 5]);
    }

    #[test]
    fn generations_to_fraction_reads_history() {
        let stats = |g, f| GenerationStats {
            generation: g,
            best_f: f,
            mean_f: f,
            sigma_f: 0.0,
            p_m: 0.3,
            modifications: BTreeMap::new(),
            replace_fallbacks: 0,
            stopped_early: false,
        };
        let h = vec![stats(0, 0.5), stats(1, 0.8), stats(2, 0.96), stats(3, 1.0)];
        assert_eq!(generations_to_fraction(&h, 0.95), Some(2));
        assert_eq!(generations_to_fraction(&[], 0.95), None);
    }
}
