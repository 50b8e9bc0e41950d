use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pll::experiment::{run_experiment, summarize, ExperimentSpec};
use pll::io::{read_dataset, write_dataset, DatasetPaths};
use pll::synthetic::{generate_synthetic, SyntheticSpec};
use pll::{label_coverage, Method, Split};

#[derive(Parser)]
#[command(
    name = "pll",
    version,
    about = "Train and compare multi-label classifiers on partially labeled data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run replicated experiments from a JSON spec.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Methods to run (B0, B1, LE, MT), overriding the spec.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        methods: Option<Vec<Method>>,
        #[arg(long)]
        replicates: Option<usize>,
        /// Fractions of training labels to drop, e.g. 0.1,0.2,0.4,0.8.
        #[arg(long, value_delimiter = ',')]
        drop: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent run slots (0 = all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Group a results.csv by method, drop fraction and metric.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-group replicate values as JSON.
        #[arg(long)]
        plot_json: Option<PathBuf>,
    },
    /// Check a directory of canonical dataset files.
    IngestValidate {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Write a synthetic dataset in the canonical format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        clips: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 0.3)]
        prior: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn validate_dir(dir: &Path) -> Result<bool> {
    let paths = DatasetPaths::in_dir(dir);
    let dataset =
        read_dataset(&paths).with_context(|| format!("reading dataset in {}", dir.display()))?;
    let labels = dataset.labels();
    println!("clips:     {}", dataset.len());
    println!("classes:   {}", dataset.num_classes());
    println!("embed dim: {}", dataset.embed_dim().unwrap_or(0));
    for split in [Split::Train, Split::Validation, Split::Test] {
        println!("{split:<10} {}", dataset.indices_of(split).len());
    }
    println!("observed:  {}", labels.observed_count());
    if dataset.num_classes() > 0 && !dataset.is_empty() {
        println!("coverage:  {:.5}", label_coverage(labels)?);
    }
    if let Some(row) = labels.first_unlabeled_row() {
        let id = dataset.clip_ids().nth(row).unwrap_or_default();
        println!("error: clip {id:?} has no observed labels");
        return Ok(false);
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            config,
            methods,
            replicates,
            drop,
            out,
            workers,
        } => {
            let mut spec = ExperimentSpec::from_json_file(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            if let Some(m) = methods {
                spec.methods = m;
            }
            if let Some(r) = replicates {
                spec.replicate_count = r;
            }
            if let Some(d) = drop {
                spec.drop_fractions = d;
            }
            if let Some(o) = out {
                spec.out_dir = o;
            }
            if let Some(w) = workers {
                spec.workers = w;
            }
            spec.validate()?;
            let outcome = run_experiment(&spec)?;
            for s in &outcome.summary {
                println!(
                    "{:<3} drop={:<4} {:<12} mean={:.4} std={:.4} n={}",
                    s.method, s.drop_fraction, s.metric, s.mean, s.std, s.count
                );
            }
            println!(
                "results written to {}",
                spec.out_dir.join("results.csv").display()
            );
            if !outcome.success() {
                eprintln!("{} run(s) failed", outcome.failed_runs);
            }
            Ok(outcome.success())
        }
        Command::Summarize {
            input,
            out,
            plot_json,
        } => {
            let summary = summarize(&input, &out, plot_json.as_deref())?;
            println!("{} groups written to {}", summary.len(), out.display());
            Ok(true)
        }
        Command::IngestValidate { dir } => validate_dir(&dir),
        Command::Synth {
            out,
            clips,
            classes,
            prior,
            seed,
        } => {
            if !(0.0..1.0).contains(&prior) || prior == 0.0 {
                bail!("prior must lie in (0, 1)");
            }
            std::fs::create_dir_all(&out)?;
            let (dataset, _) =
                generate_synthetic(&SyntheticSpec::new(clips, classes, prior, seed))?;
            write_dataset(&dataset, &DatasetPaths::in_dir(&out))?;
            println!("wrote {} clips to {}", dataset.len(), out.display());
            Ok(true)
        }
    }
}
