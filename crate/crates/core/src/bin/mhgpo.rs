use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mhgpo::env::SynthDataset;
use mhgpo::metrics::{compare_table, evaluate_policy, read_rows, RunSeries};
use mhgpo::run::{run_to_dir, Checkpoint, RunConfig, CONFIG_FILE, METRICS_FILE};

#[derive(Parser, Debug)]
#[command(
    name = "mhgpo",
    version,
    about = "Multi-agent group policy optimization on a synthetic search pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; falls back to the config's `output_dir`.
        #[arg(long, env = "MHGPO_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint on a dataset's held-out split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset file written by `train`.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Side-by-side summary of finished runs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// Evaluation F1 used for steps-to-threshold.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

fn train(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg =
        RunConfig::load(&config).with_context(|| format!("reading config {}", config.display()))?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    let Some(out) = out.or_else(|| cfg.output_dir.clone()) else {
        bail!("no output directory: pass --out, set MHGPO_OUT_DIR or output_dir in the config");
    };
    let summary =
        run_to_dir(&cfg, &out).with_context(|| format!("training into {}", out.display()))?;
    println!("{} steps written to {}", summary.steps, out.display());
    if let Some(eval) = summary.last.as_ref().and_then(|r| r.eval) {
        println!(
            "last eval: f1 {:.4} em {:.4} acc {:.4}",
            eval.f1, eval.em, eval.accuracy
        );
    }
    Ok(())
}

fn eval(ckpt: PathBuf, dataset: PathBuf) -> Result<()> {
    let ckpt = Checkpoint::load(&ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let data = SynthDataset::load(&dataset)
        .with_context(|| format!("loading dataset {}", dataset.display()))?;
    let env = ckpt.env_for(data)?;
    let summary = evaluate_policy(&env, &ckpt.params()?, &env.data.eval_ids())?;
    println!(
        "questions {} accuracy {:.4} em {:.4} f1 {:.4}",
        summary.questions, summary.accuracy, summary.em, summary.f1
    );
    Ok(())
}

fn compare(runs: Vec<PathBuf>, threshold: f64) -> Result<()> {
    let mut series = Vec::with_capacity(runs.len());
    for dir in &runs {
        let file = File::open(dir.join(METRICS_FILE))
            .with_context(|| format!("opening metrics in {}", dir.display()))?;
        let rows = read_rows(BufReader::new(file))?;
        let label = RunConfig::load(&dir.join(CONFIG_FILE))
            .map(|c| c.label())
            .unwrap_or_else(|_| dir.display().to_string());
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        series.push(RunSeries {
            label: format!("{name}[{label}]"),
            rows,
        });
    }
    print!("{}", compare_table(&series, threshold));
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, seed, out } => train(config, seed, out),
        Command::Eval { ckpt, dataset } => eval(ckpt, dataset),
        Command::Compare { runs, threshold } => compare(runs, threshold),
    }
}
