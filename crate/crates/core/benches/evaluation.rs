use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use clinevo_core::evolution::{FitnessEvaluator, GatedEvaluator};
use clinevo_core::genome::PromptGenome;
use clinevo_core::parallel::Parallelism;
use clinevo_core::runtime::{Pipeline, RunConfig};

const BATCH: usize = 64;

// The first BATCH library assemblies, spread across the choice space.
fn batch(p: &Pipeline) -> Vec<PromptGenome> {
    let sizes: Vec<usize> = p.space().pools().values().map(Vec::len).collect();
    let total: usize = sizes.iter().product();
    let step = (total / BATCH).max(1);
    (0..total)
        .step_by(step)
        .take(BATCH)
        .map(|mut n| {
            let mut c = vec![0; sizes.len()];
            for (slot, &s) in c.iter_mut().zip(&sizes).rev() {
                *slot = n % s;
                n /= s;
            }
            p.space().assemble(&c).expect("library assembly")
        })
        .collect()
}

fn evaluate_batch(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let p = Pipeline::build(&cfg).expect("default pipeline");
    let eval = GatedEvaluator::new(p.assessor().clone(), p.verifier().clone(), cfg.evolution.tau);
    let genomes = batch(&p);
    let mut group = c.benchmark_group("evaluate_batch");
    group.sample_size(10);
    for mode in [Parallelism::Sequential, Parallelism::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &genomes, |b, g| {
            b.iter(|| mode.map(g, |x| eval.evaluate(x).expect("evaluates")))
        });
    }
    group.finish();
}

criterion_group!(benches, evaluate_batch);
criterion_main!(benches);
