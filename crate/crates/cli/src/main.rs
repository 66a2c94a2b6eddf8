use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ted_core::gradcheck::{run_gradcheck, GradcheckConfig};
use ted_core::harness::config::parse_seeds;
use ted_core::harness::{
    emit_plots, load_config, metric_report, run_ablations, run_suite, stream_rng, write_metric_csv, ExperimentConfig,
    Stream,
};
use ted_core::nncore::checkpoint;
use ted_core::synthgen::Phase;
use ted_core::TedError;

#[derive(Parser)]
#[command(
    name = "ted",
    version,
    about = "Temporal disentanglement auxiliary task on synthetic environments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key-value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single seed; overrides run.seeds.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Seed range `N..M` (exclusive end) or comma list; overrides run.seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, Vec<u64>)> {
        let config = load_config(self.config.as_ref(), &self.overrides)?;
        let seeds = match (&self.seeds, self.seed) {
            (Some(s), _) => parse_seeds(s).map_err(|e| TedError::config("--seeds", e))?,
            (None, Some(s)) => vec![s],
            (None, None) => config.run.seeds.clone(),
        };
        Ok((config, seeds))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the train→switch protocol for every seed and aggregate.
    Train(Common),
    /// Run every ablation variant relative to full TED.
    Ablate(Common),
    /// Score a saved encoder with the disentanglement metric.
    Metric {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Factor ranges to generate pairs from.
        #[arg(long, default_value = "train", value_parser = ["train", "test"])]
        phase: String,
    },
    /// Finite-difference check of the TD and TED gradients.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render SVG plots from an aggregate CSV.
    Plot {
        #[arg(long)]
        aggregate: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn train(common: &Common) -> Result<()> {
    let (config, seeds) = common.load()?;
    let result = run_suite(&config, &seeds, &common.out)?;
    for (seed, err) in &result.failed {
        eprintln!("seed {seed} failed: {err}");
    }
    println!(
        "{} of {} seeds completed; results in {}",
        result.runs.len(),
        seeds.len(),
        common.out.display()
    );
    if result.runs.is_empty() {
        bail!("every seed failed");
    }
    Ok(())
}

fn ablate(common: &Common) -> Result<()> {
    let (config, seeds) = common.load()?;
    let results = run_ablations(&config, &seeds, &common.out)?;
    for r in &results {
        println!(
            "{:<12} seeds {} failed {}",
            r.name,
            r.suite.runs.len(),
            r.suite.failed.len()
        );
    }
    println!("summary: {}", common.out.join("ablation_summary.csv").display());
    Ok(())
}

fn metric(common: &Common, checkpoint_path: &Path, phase: &str) -> Result<()> {
    let (config, seeds) = common.load()?;
    let seed = match seeds.as_slice() {
        [s] => *s,
        _ => bail!(TedError::config("--seed", "the metric command takes exactly one seed")),
    };
    let encoder = checkpoint::load(checkpoint_path)?;
    let phase = if phase == "test" { Phase::Test } else { Phase::Train };
    let mut rng = stream_rng(seed, Stream::Metric, 0);
    let report = metric_report(&encoder, &config, phase, &mut rng)?;
    if let Some(parent) = common.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(TedError::from)?;
    }
    let file = File::create(&common.out).map_err(TedError::from)?;
    write_metric_csv(BufWriter::new(file), seed, &config.metric, &report)?;
    println!("accuracy {:.4}; written to {}", report.accuracy, common.out.display());
    Ok(())
}

fn gradcheck(points: usize, seed: u64) -> Result<()> {
    let report = run_gradcheck(&GradcheckConfig {
        points,
        seed,
        ..GradcheckConfig::default()
    })?;
    for (group, err) in &report.max_rel_error {
        println!("{group:<10} max relative error {err:.3e}");
    }
    println!("{} entries checked at {} points", report.entries_checked, report.points);
    if !report.passed() {
        let w = report.worst.as_ref().expect("a failing report has a worst entry");
        bail!(TedError::NumericalFailure {
            node: w.entry,
            op: w.group
        });
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<TedError>())
        .map_or(1, |e| e.category().exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::Ablate(c) => ablate(c),
        Command::Metric {
            common,
            checkpoint,
            phase,
        } => metric(common, checkpoint, phase).with_context(|| format!("scoring {}", checkpoint.display())),
        Command::Gradcheck { points, seed } => gradcheck(*points, *seed),
        Command::Plot { aggregate, out } => emit_plots(aggregate, out)
            .map(|written| {
                for p in written {
                    println!("{}", p.display());
                }
            })
            .map_err(Into::into),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
