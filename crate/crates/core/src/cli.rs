//! `vgce` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_synthetic, save_dataset, SyntheticSpec};
use crate::evaluation::{bench_graph, benchmark_shapes, with_threads, BenchConfig, BenchRow, DatasetShape};
use crate::pipeline::{self, prepare};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const EVAL_CURVE_FILE: &str = "eval_curve.csv";
pub const FEASIBILITY_FILE: &str = "feasibility.csv";
pub const RETRIEVAL_REPORT_FILE: &str = "retrieval_report.json";
pub const RETRIEVAL_CSV_FILE: &str = "retrieval.csv";
pub const BENCH_FILE: &str = "bench.csv";

#[derive(Debug, Parser)]
#[command(name = "vgce", version, about = "Compositional zero-shot recognition with variational concept graphs")]
pub struct Cli {
    /// Worker threads for scoring.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-latent synthetic dataset.
    GenSynthetic(GenArgs),
    /// Train a model and write a checkpoint plus a JSON-lines log.
    Train(RunArgs),
    /// Bias-swept accuracy on the test split.
    Eval(RunArgs),
    /// Edge probabilities and feasibility decisions for every pair.
    Feasibility(RunArgs),
    /// Recall@k for state-edited image retrieval on the test split.
    Retrieve(RunArgs),
    /// Node counts and encoder timings for graph sizes.
    BenchGraph(BenchArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to `<output_dir>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub states: usize,
    #[arg(long, default_value_t = 6)]
    pub objects: usize,
    #[arg(long, default_value_t = 0.5)]
    pub seen_fraction: f64,
    #[arg(long, default_value_t = 0.25)]
    pub unseen_fraction: f64,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 16)]
    pub m: usize,
    #[arg(long, default_value_t = 20)]
    pub samples_per_pair: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// `name:states:objects:closed_pairs:seen_pairs`; repeatable. Defaults
    /// to MIT-States, UT-Zappos and C-GQA.
    #[arg(long = "shape", value_parser = parse_shape)]
    pub shapes: Vec<DatasetShape>,
    #[arg(long, default_value_t = 8)]
    pub m: usize,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 8)]
    pub h: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Report node counts only.
    #[arg(long)]
    pub no_measure: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_shape(text: &str) -> Result<DatasetShape, String> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 5 {
        return Err(format!("expected name:states:objects:closed_pairs:seen_pairs, got {text:?}"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    Ok(DatasetShape::new(parts[0], num(parts[1])?, num(parts[2])?, num(parts[3])?, num(parts[4])?))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: Option<&'a RunConfig>,
    seed: u64,
    threads: usize,
    code_version: &'static str,
    wall_ms: u128,
    outputs: Vec<String>,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(format!("manifest-{}.json", manifest.command));
    write(&path, serde_json::to_string_pretty(manifest)? + "\n")
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    Ok(config)
}

fn load_checkpoint(args: &RunArgs, config: &RunConfig) -> Result<Checkpoint> {
    let path = args.checkpoint.clone().unwrap_or_else(|| config.output_dir.join(CHECKPOINT_FILE));
    Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    let threads = cli.threads;
    with_threads(threads, move || dispatch(cli.command, threads))?
}

fn dispatch(command: Command, threads: usize) -> Result<()> {
    let started = Instant::now();
    match command {
        Command::GenSynthetic(a) => {
            let spec = SyntheticSpec {
                n_states: a.states,
                n_objects: a.objects,
                seen_fraction: a.seen_fraction,
                unseen_fraction: a.unseen_fraction,
                d: a.d,
                m: a.m,
                samples_per_pair: a.samples_per_pair,
                noise_sigma: a.noise,
                seed: a.seed,
            };
            let dataset = generate_synthetic(&spec)?;
            save_dataset(&dataset, &a.out)?;
            write(&a.out.join("synthetic_spec.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
            write_manifest(
                &a.out,
                &Manifest {
                    command: "gen-synthetic",
                    config: None,
                    seed: a.seed,
                    threads,
                    code_version: env!("CARGO_PKG_VERSION"),
                    wall_ms: started.elapsed().as_millis(),
                    outputs: vec!["metadata.json".into(), "features.bin".into(), "node_features.bin".into()],
                },
            )
        }
        Command::Train(a) => {
            let config = load_config(&a)?;
            let prepared = prepare(&config, None)?;
            let (checkpoint, log) = pipeline::run_train(&config, &prepared)?;
            checkpoint.save(&config.output_dir.join(CHECKPOINT_FILE))?;
            let mut lines = String::new();
            for record in &log {
                lines.push_str(&serde_json::to_string(record)?);
                lines.push('\n');
            }
            write(&config.output_dir.join(TRAIN_LOG_FILE), lines)?;
            if let Some(last) = log.last() {
                log::info!("trained {} epochs, final loss {:.5}", last.epoch, last.loss_total);
            }
            finish("train", &config, threads, started, &[CHECKPOINT_FILE, TRAIN_LOG_FILE])
        }
        Command::Eval(a) => {
            let config = load_config(&a)?;
            let checkpoint = load_checkpoint(&a, &config)?;
            let prepared = prepare(&config, Some(&checkpoint))?;
            let report = pipeline::run_eval(&config, &prepared, &checkpoint.model)?;
            write(&config.output_dir.join(EVAL_REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
            write(&config.output_dir.join(EVAL_CURVE_FILE), report.curve_csv())?;
            println!("auc {:.6} best_hm {:.6} best_seen {:.6} best_unseen {:.6}", report.auc, report.best_hm, report.best_seen, report.best_unseen);
            finish("eval", &config, threads, started, &[EVAL_REPORT_FILE, EVAL_CURVE_FILE])
        }
        Command::Feasibility(a) => {
            let config = load_config(&a)?;
            let checkpoint = load_checkpoint(&a, &config)?;
            let prepared = prepare(&config, Some(&checkpoint))?;
            let (probs, mask) = pipeline::feasibility(&config, &prepared, &checkpoint.model)?;
            let vocab = &prepared.dataset.vocab;
            let mut csv = String::from("state,object,probability,feasible\n");
            for pair in vocab.all_pairs() {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    vocab.states()[pair.state],
                    vocab.objects()[pair.object],
                    probs.get(pair.state, pair.object),
                    mask.is_feasible(pair)
                ));
            }
            write(&config.output_dir.join(FEASIBILITY_FILE), csv)?;
            println!("tau {} feasible {}/{}", mask.tau, mask.n_feasible(), mask.xi.len());
            finish("feasibility", &config, threads, started, &[FEASIBILITY_FILE])
        }
        Command::Retrieve(a) => {
            let config = load_config(&a)?;
            let checkpoint = load_checkpoint(&a, &config)?;
            let prepared = prepare(&config, Some(&checkpoint))?;
            let report = pipeline::run_retrieval(&config, &prepared, &checkpoint.model)?;
            write(&config.output_dir.join(RETRIEVAL_REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
            write(&config.output_dir.join(RETRIEVAL_CSV_FILE), report.csv())?;
            print!("{}", report.csv());
            finish("retrieve", &config, threads, started, &[RETRIEVAL_REPORT_FILE, RETRIEVAL_CSV_FILE])
        }
        Command::BenchGraph(a) => {
            let shapes = if a.shapes.is_empty() { benchmark_shapes() } else { a.shapes };
            let config = BenchConfig {
                m: a.m,
                hidden: a.hidden,
                h: a.h,
                layers: a.layers,
                seed: a.seed,
                repeats: a.repeats,
                measure: !a.no_measure,
            };
            let rows = bench_graph(&shapes, &config)?;
            fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            let csv = BenchRow::csv(&rows);
            write(&a.out.join(BENCH_FILE), &csv)?;
            print!("{csv}");
            write_manifest(
                &a.out,
                &Manifest {
                    command: "bench-graph",
                    config: None,
                    seed: a.seed,
                    threads,
                    code_version: env!("CARGO_PKG_VERSION"),
                    wall_ms: started.elapsed().as_millis(),
                    outputs: vec![BENCH_FILE.into()],
                },
            )
        }
    }
}

fn finish(command: &str, config: &RunConfig, threads: usize, started: Instant, outputs: &[&str]) -> Result<()> {
    write_manifest(
        &config.output_dir,
        &Manifest {
            command,
            config: Some(config),
            seed: config.train.seed,
            threads,
            code_version: env!("CARGO_PKG_VERSION"),
            wall_ms: started.elapsed().as_millis(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        },
    )
}
