//! Genetic search over prompt genomes.

mod engine;
mod operators;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assessment::{AssessmentError, QualityReport};
use crate::genome::{ComponentCategory, GenomeError, PromptGenome};
use crate::verification::{VerificationError, VerificationReport};

pub use engine::{
    exhaustive_landscape, generations_to_fraction, run_evolution, Engine, FitnessEvaluator,
    GatedEvaluator, LandscapePoint, RunOutcome, RunState, SearchSpace, Variant,
};
pub use operators::{
    adaptive_mutation_update, component_mutation_probability, crossover,
    generic_crossover, init_population, mutate, op_simplify, raw_component_mutation_probability,
    select_from_sample, semantic_fusion, tournament_select, MutationLog, MutationOp,
};

#[derive(Debug, thiserror::Error)]
pub enum EvolutionError {
    #[error("invalid evolution config: {0}")]
    Config(String),
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error(transparent)]
    Assessment(#[from] AssessmentError),
    #[error(transparent)]
    Verification(#[from] VerificationError),
    #[error("no templates for category {category} in scenario {scenario}")]
    EmptyPool { category: String, scenario: String },
    #[error("parents have different scenarios")]
    ScenarioMismatch,
    #[error("category mismatch: {0} vs {1}")]
    CategoryMismatch(ComponentCategory, ComponentCategory),
    #[error("checkpoint hook failed: {0}")]
    Hook(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MutationOpWeights {
    pub synonym: f64,
    pub elaborate: f64,
    pub simplify: f64,
    pub replace: f64,
}

impl Default for MutationOpWeights {
    fn default() -> Self {
        MutationOpWeights {
            synonym: 0.4,
            elaborate: 0.2,
            simplify: 0.2,
            replace: 0.2,
        }
    }
}

impl MutationOpWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.synonym, self.elaborate, self.simplify, self.replace]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionConfig {
    pub population_size: usize,
    pub max_generations: usize,
    pub tournament_size: usize,
    pub p_sel: f64,
    pub p_m0: f64,
    pub gamma: f64,
    /// Exponent on `(1 - q)` in the per-component mutation law.
    pub beta_q: f64,
    /// Diversity gain in the generation-level mutation update.
    pub beta_adapt: f64,
    pub p_m_min: f64,
    pub p_m_max: f64,
    /// Quality margin that forces a parent's component in crossover.
    pub delta: f64,
    pub mutation_ops: MutationOpWeights,
    pub epsilon: f64,
    pub early_stop_window: usize,
    pub tau: f64,
    pub elitism: usize,
    pub seed: u64,
    /// Sentences appended by the Elaborate mutation.
    pub elaborations: BTreeMap<ComponentCategory, Vec<String>>,
    /// Words dropped by the Simplify mutation.
    pub filler_words: Vec<String>,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        EvolutionConfig {
            population_size: 100,
            max_generations: 50,
            tournament_size: 5,
            p_sel: 0.8,
            p_m0: 0.3,
            gamma: 0.98,
            beta_q: 1.0,
            beta_adapt: 0.1,
            p_m_min: 0.01,
            p_m_max: 0.8,
            delta: 0.05,
            mutation_ops: MutationOpWeights::default(),
            epsilon: 0.001,
            early_stop_window: 5,
            tau: 0.75,
            elitism: 2,
            seed: 0,
            elaborations: BTreeMap::from([
                (
                    ComponentCategory::RoleDefinition,
                    s(&["Draw on current evidence and clinical experience.", "Communicate findings clearly to the care team."]),
                ),
                (
                    ComponentCategory::ReasoningFramework,
                    s(&["Revisit the symptoms after each step.", "Keep the differential diagnosis open until the workup is complete."]),
                ),
                (
                    ComponentCategory::InformationRequest,
                    s(&["Ask about onset and duration of symptoms.", "Request relevant laboratory tests."]),
                ),
                (
                    ComponentCategory::UncertaintyExpression,
                    s(&["State confidence as a probability.", "Name the evidence that would change your assessment."]),
                ),
                (
                    ComponentCategory::BoundaryStatement,
                    s(&["Use clinical judgment.", "Recommend further evaluation when findings are unclear."]),
                ),
            ]),
            filler_words: s(&["please", "very", "really", "basically", "just", "simply", "quite", "actually"]),
        }
    }
}

impl EvolutionConfig {
    /// Every violated invariant, one message per problem.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut unit = |name: &str, v: f64| {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("{name} = {v} outside [0, 1]"));
            }
        };
        unit("p_sel", self.p_sel);
        unit("p_m0", self.p_m0);
        unit("delta", self.delta);
        unit("p_m_min", self.p_m_min);
        unit("p_m_max", self.p_m_max);
        for (name, v) in ["synonym", "elaborate", "simplify", "replace"]
            .iter()
            .zip(self.mutation_ops.as_array())
        {
            unit(&format!("mutation_ops.{name}"), v);
        }
        if self.population_size < 2 {
            out.push(format!("population_size = {} must be >= 2", self.population_size));
        }
        if self.tournament_size < 2 || self.tournament_size > self.population_size {
            out.push(format!(
                "tournament_size = {} must be in [2, population_size = {}]",
                self.tournament_size, self.population_size
            ));
        }
        if self.max_generations == 0 {
            out.push("max_generations must be >= 1".into());
        }
        let ops: f64 = self.mutation_ops.as_array().iter().sum();
        if (ops - 1.0).abs() > 1e-9 {
            out.push(format!("mutation_ops sum to {ops}, expected 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            out.push(format!("gamma = {} outside (0, 1]", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            out.push(format!("tau = {} outside (0, 1]", self.tau));
        }
        if self.p_m_min > self.p_m_max {
            out.push(format!("p_m_min {} exceeds p_m_max {}", self.p_m_min, self.p_m_max));
        }
        if !(self.beta_q >= 0.0) || !(self.beta_adapt >= 0.0) {
            out.push("beta_q and beta_adapt must be >= 0".into());
        }
        if !(self.epsilon >= 0.0) {
            out.push(format!("epsilon = {} must be >= 0", self.epsilon));
        }
        if self.early_stop_window == 0 {
            out.push("early_stop_window must be >= 1".into());
        }
        if self.elitism >= self.population_size {
            out.push(format!("elitism = {} must be < population_size", self.elitism));
        }
        out
    }

    pub fn validate(&self) -> Result<(), EvolutionError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(EvolutionError::Config(p.join("; ")))
        }
    }
}

/// `F = Q` when `V >= tau`, else `Q * V / tau`.
pub fn constrained_fitness(q: f64, v: f64, tau: f64) -> f64 {
    if v >= tau {
        q
    } else {
        q * v / tau
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub q: f64,
    pub v: f64,
    pub f: f64,
    pub quality: QualityReport,
    pub verification: Option<VerificationReport>,
}

impl FitnessRecord {
    pub fn is_consistent(&self, tau: f64) -> bool {
        (constrained_fitness(self.q, self.v, tau) - self.f).abs() <= 1e-12
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub genome: PromptGenome,
    pub fitness: FitnessRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_f: f64,
    pub mean_f: f64,
    pub sigma_f: f64,
    /// Base mutation rate used to breed the next generation.
    pub p_m: f64,
    /// Components changed by mutation or fusion while producing this generation.
    pub modifications: BTreeMap<ComponentCategory, usize>,
    pub replace_fallbacks: usize,
    pub stopped_early: bool,
}

/// Population mean and standard deviation of F.
pub fn fitness_moments(members: &[Member]) -> (f64, f64) {
    let n = members.len() as f64;
    let mean = members.iter().map(|m| m.fitness.f).sum::<f64>() / n;
    let var = members
        .iter()
        .map(|m| (m.fitness.f - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

/// True once the mean best-F gain over the trailing window drops below epsilon.
///
/// Needs `window + 1` entries; the mean gain telescopes to
/// `(last - history[len - 1 - window]) / window`.
pub fn should_stop_early(best_history: &[f64], cfg: &EvolutionConfig) -> bool {
    let w = cfg.early_stop_window;
    let n = best_history.len();
    if n < w + 1 {
        return false;
    }
    (best_history[n - 1] - best_history[n - 1 - w]) / (w as f64) < cfg.epsilon
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn defaults_valid() {
        let c = EvolutionConfig::default();
        assert!(c.problems().is_empty(), "{:?}", c.problems());
        assert_eq!((c.population_size, c.tournament_size, c.p_sel, c.p_m0, c.gamma, c.tau), (100, 5, 0.8, 0.3, 0.98, 0.75));
    }

    #[test]
    fn config_problems_aggregate() {
        let c = EvolutionConfig {
            tournament_size: 200,
            gamma: 0.0,
            p_sel: 1.5,
            ..EvolutionConfig::default()
        };
        assert_eq!(c.problems().len(), 3);
    }

    #[test]
    fn fitness_examples() {
        assert_eq!(constrained_fitness(0.8, 0.9, 0.75), 0.8);
        assert_eq!(constrained_fitness(0.8, 0.0, 0.75), 0.0);
        assert_abs_diff_eq!(constrained_fitness(0.8, 0.6, 0.75), 0.64, epsilon = 1e-12);
    }

    #[test]
    fn early_stop_examples() {
        let c = EvolutionConfig::default();
        assert!(should_stop_early(&[0.5; 6], &c));
        assert!(!should_stop_early(&[0.5; 5], &c));
        let rising: Vec<f64> = (0..10).map(|i| 0.3 + 0.01 * i as f64).collect();
        assert!(!should_stop_early(&rising, &c));
        assert!(should_stop_early(&[0.5, 0.5, 0.5, 0.5, 0.5, 0.5049], &c));
    }

    proptest! {
        #[test]
        fn gate_bounds(q in 0.0f64..=1.0, v in 0.0f64..=1.0, tau in 0.01f64..=1.0) {
            let f = constrained_fitness(q, v, tau);
            prop_assert!(f <= q && f >= 0.0);
            prop_assert_eq!(f == q, v >= tau || q == 0.0 || (q * v / tau) == q);
        }

        #[test]
        fn early_stop_ignores_prefix(
            tail in proptest::collection::vec(0.0f64..1.0, 6),
            prefix in proptest::collection::vec(0.0f64..1.0, 0..10),
        ) {
            let c = EvolutionConfig::default();
            let mut full = prefix.clone();
            full.extend(&tail);
            prop_assert_eq!(should_stop_early(&tail, &c), should_stop_early(&full, &c));
        }
    }
}
