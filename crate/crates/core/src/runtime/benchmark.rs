//! Side-by-side runs of the structure-aware and generic variants.

use serde::{Deserialize, Serialize};

use crate::evolution::{generations_to_fraction, Variant};

use super::{Backend, Pipeline, RuntimeError};

/// Fraction of a run's final best F that counts as converged.
pub const CONVERGENCE_FRACTION: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub best_curve: Vec<f64>,
    pub final_best_f: f64,
    pub generations_to_95: usize,
    /// Generation at which early stopping fired, if it did.
    pub early_stop_generation: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: Vec<RunSummary>,
    pub median_generations_to_95: f64,
    pub median_final_best_f: f64,
    pub early_stops: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seeds: Vec<u64>,
    pub max_generations: usize,
    pub variants: Vec<VariantSummary>,
}

impl BenchmarkReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|s| s.variant == v)
    }
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty list");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Runs every variant once per seed. Each variant shares one evaluation cache
/// across its seeds.
pub fn benchmark_compare(
    pipeline: &Pipeline,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<BenchmarkReport, RuntimeError> {
    if pipeline.config().backend != Backend::Offline {
        return Err(RuntimeError::Input("benchmarks need the offline backend".into()));
    }
    if seeds.is_empty() {
        return Err(RuntimeError::Input("benchmark needs at least one seed".into()));
    }
    let mut out = Vec::with_capacity(variants.len());
    for &variant in variants {
        let engine = pipeline.engine(variant)?;
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let outcome = engine.run_seed(seed, |_| Ok(()))?;
            log::info!(
                "{variant:?} seed {seed}: best F {} after {} generations",
                outcome.best.fitness.f,
                outcome.history.len()
            );
            let last = outcome.history.last().expect("history is nonempty");
            runs.push(RunSummary {
                seed,
                best_curve: outcome.best_curve(),
                final_best_f: last.best_f,
                generations_to_95: generations_to_fraction(&outcome.history, CONVERGENCE_FRACTION)
                    .expect("history is nonempty"),
                early_stop_generation: outcome.stopped_early.then_some(last.generation),
            });
        }
        let g95: Vec<f64> = runs.iter().map(|r| r.generations_to_95 as f64).collect();
        let finals: Vec<f64> = runs.iter().map(|r| r.final_best_f).collect();
        out.push(VariantSummary {
            variant,
            median_generations_to_95: median(&g95),
            median_final_best_f: median(&finals),
            early_stops: runs.iter().filter(|r| r.early_stop_generation.is_some()).count(),
            runs,
        });
    }
    Ok(BenchmarkReport {
        seeds: seeds.to_vec(),
        max_generations: pipeline.config().evolution.max_generations,
        variants: out,
    })
}
