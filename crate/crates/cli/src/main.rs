use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use clinevo_core::evolution::Variant;
use clinevo_core::genome::{render_marked, PromptGenome};
use clinevo_core::runtime::{
    benchmark_compare, checkpoint_resume, default_config_json, latest_checkpoint, load_run_config,
    optimize, parse_prompt, read_checkpoint, Backend, OptimizeOptions, OptimizeStatus, Pipeline,
    RunConfig, RuntimeError, CHECKPOINT_DIR,
};

/// Evolve, score and verify component-structured clinical prompts.
#[derive(Parser)]
#[command(name = "clinevo", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_backend)]
    backend: Option<Backend>,
    /// More log output on stderr; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse()
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    StructureAware,
    Generic,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::StructureAware => Variant::StructureAware,
            VariantArg::Generic => Variant::Generic,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the evolutionary search; writes stats.csv, events.jsonl, checkpoints and the best genome.
    Optimize {
        #[arg(long, value_enum, default_value = "structure-aware")]
        variant: VariantArg,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score one prompt (genome JSON or [[category]]-marked text).
    Evaluate { prompt: PathBuf },
    /// Verify one prompt (genome JSON or [[category]]-marked text).
    Verify { prompt: PathBuf },
    /// Compare the structure-aware and generic variants over consecutive seeds.
    Benchmark {
        /// Number of seeds, starting at the configured seed.
        #[arg(long, default_value_t = 20)]
        runs: u64,
    },
    /// Pretty-print a genome, a checkpoint, or a checkpoint directory.
    Inspect {
        #[arg(required_unless_present = "default_config")]
        path: Option<PathBuf>,
        /// Print the default run configuration instead.
        #[arg(long, conflicts_with = "path")]
        default_config: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, RuntimeError> {
    let mut cfg = match &common.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.evolution.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(b) = common.backend {
        cfg.backend = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn read_file(path: &Path) -> Result<Vec<u8>, RuntimeError> {
    std::fs::read(path).map_err(|source| RuntimeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<(), RuntimeError> {
    let common = &cli.common;
    match cli.command {
        Command::Optimize { variant, resume } => {
            let pipeline = Pipeline::build(&load_config(common)?)?;
            let opts = OptimizeOptions {
                variant: variant.into(),
                resume,
                stop_after: None,
            };
            match optimize(&pipeline, &opts)? {
                OptimizeStatus::Finished(outcome) => print_json(&json!({
                    "output_dir": pipeline.config().output_dir,
                    "generations": outcome.history.len(),
                    "stopped_early": outcome.stopped_early,
                    "best_q": outcome.best.fitness.q,
                    "best_v": outcome.best.fitness.v,
                    "best_f": outcome.best.fitness.f,
                })),
                OptimizeStatus::Paused { generation } => print_json(&json!({"paused_at": generation})),
            }
        }
        Command::Evaluate { prompt } => {
            let pipeline = Pipeline::build(&load_config(common)?)?;
            let genome = parse_prompt(&read_file(&prompt)?, &pipeline)?;
            print_json(&pipeline.evaluate(&genome)?);
        }
        Command::Verify { prompt } => {
            let pipeline = Pipeline::build(&load_config(common)?)?;
            let genome = parse_prompt(&read_file(&prompt)?, &pipeline)?;
            print_json(&pipeline.verify(&genome)?);
        }
        Command::Benchmark { runs } => {
            if runs == 0 {
                return Err(RuntimeError::Input("--runs must be at least 1".into()));
            }
            let cfg = load_config(common)?;
            let pipeline = Pipeline::build(&cfg)?;
            let seeds: Vec<u64> = (0..runs).map(|i| cfg.evolution.seed.wrapping_add(i)).collect();
            let report = benchmark_compare(&pipeline, &[Variant::StructureAware, Variant::Generic], &seeds)?;
            let dir = &cfg.output_dir;
            std::fs::create_dir_all(dir).map_err(|source| RuntimeError::Io {
                path: dir.clone(),
                source,
            })?;
            let path = dir.join("benchmark.json");
            std::fs::write(&path, serde_json::to_vec_pretty(&report).expect("serializable"))
                .map_err(|source| RuntimeError::Io { path: path.clone(), source })?;
            let summary: Vec<_> = report
                .variants
                .iter()
                .map(|v| {
                    json!({
                        "variant": v.variant,
                        "median_generations_to_95": v.median_generations_to_95,
                        "median_final_best_f": v.median_final_best_f,
                        "early_stops": v.early_stops,
                        "runs": v.runs.len(),
                    })
                })
                .collect();
            print_json(&json!({"report": path, "variants": summary}));
        }
        Command::Inspect { path, default_config } => {
            if default_config {
                println!("{}", default_config_json());
            } else {
                inspect(&path.expect("clap requires a path"))?;
            }
        }
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<(), RuntimeError> {
    if path.is_dir() {
        let dir = if path.join(CHECKPOINT_DIR).is_dir() {
            path.join(CHECKPOINT_DIR)
        } else {
            path.to_path_buf()
        };
        let latest = latest_checkpoint(&dir)?;
        println!("# {}", latest.display());
        return print_checkpoint(&checkpoint_resume(&dir)?);
    }
    let bytes = read_file(path)?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| RuntimeError::Input(format!("{}: {e}", path.display())))?;
    if value.get("state").is_some() {
        print_checkpoint(&read_checkpoint(path)?)
    } else {
        let genome: PromptGenome = clinevo_core::genome::deserialize_genome(&bytes)?;
        print_genome(&genome);
        Ok(())
    }
}

fn print_genome(genome: &PromptGenome) {
    println!("genome {} ({})", genome.id(), genome.scenario());
    for c in genome.components() {
        println!("  {:<24} q={:.4} origin={:?}", c.category().as_str(), c.quality(), c.origin());
    }
    print!("{}", render_marked(genome));
}

fn print_checkpoint(record: &clinevo_core::runtime::CheckpointRecord) -> Result<(), RuntimeError> {
    let s = &record.state;
    let best = s.best();
    println!(
        "checkpoint: variant {:?}, scenario {}, generation {}, population {}, p_m {}, finished {}",
        record.variant,
        record.scenario,
        s.generation,
        s.members.len(),
        s.p_m,
        s.finished
    );
    println!("{}", clinevo_core::runtime::STATS_HEADER);
    print!("{}", clinevo_core::runtime::stats_csv(&s.history).split_once('\n').map_or("", |x| x.1));
    println!(
        "best: F={} Q={} V={}",
        best.fitness.f, best.fitness.q, best.fitness.v
    );
    print_genome(&best.genome);
    Ok(())
}
