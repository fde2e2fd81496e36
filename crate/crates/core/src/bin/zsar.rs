//! Command-line entry point: `zsar <stage> --config C --out DIR`.
//!
//! A stage subcommand runs the pipeline up to and including that stage,
//! reusing completed upstream stages. Exit codes: 0 success, 2 configuration
//! error, 3 data or contamination error, 4 non-finite values.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use zsar::eval::ResultsTable;
use zsar::pipeline::{collect_reports, run_pipeline, write_results, ExperimentConfig, RunOptions, Stage};
use zsar::{Error, Result};

#[derive(Parser)]
#[command(name = "zsar", version, about = "Skeleton-based zero-shot action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config's `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Re-run stages even when their outputs are current.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write the embedding tables.
    Generate(Common),
    /// Choose the unseen classes.
    MakeSplit(Common),
    /// Train the encoder on seen-class samples.
    TrainEncoder(Common),
    /// Write train (seen) and test (unseen) feature matrices.
    ExtractFeatures(Common),
    /// Train the DeViSE head.
    TrainDevise(Common),
    /// Train the Relation Network head.
    TrainRelation(Common),
    /// Write ZSL / GZSL reports.
    Evaluate(Common),
    /// Run every stage.
    Run(Common),
    /// Results table for one config, or aggregated over run directories.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories whose reports are aggregated into `--out`.
        runs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    let (common, until) = match command {
        Command::Generate(c) => (c, Stage::Generate),
        Command::MakeSplit(c) => (c, Stage::MakeSplit),
        Command::TrainEncoder(c) => (c, Stage::TrainEncoder),
        Command::ExtractFeatures(c) => (c, Stage::ExtractFeatures),
        Command::TrainDevise(c) => (c, Stage::TrainDevise),
        Command::TrainRelation(c) => (c, Stage::TrainRelation),
        Command::Evaluate(c) => (c, Stage::Evaluate),
        Command::Run(c) => (c, Stage::Report),
        Command::Report { common, runs } if !runs.is_empty() => return aggregate(&common, &runs),
        Command::Report { common, .. } => (common, Stage::Report),
    };
    run(&common, until)
}

fn run(common: &Common, until: Stage) -> Result<()> {
    let path = common.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    let options = RunOptions {
        force: common.force,
        until: Some(until),
    };
    let summary = run_pipeline(&config, &out, options)?;
    for s in &summary.stages {
        let what = if s.executed { "ran" } else { "reused" };
        eprintln!("{:<17} {what:<6} {:>8.2}s", s.stage.name(), s.seconds);
    }
    if until == Stage::Report {
        print!("{}", std::fs::read_to_string(out.join(zsar::pipeline::RESULTS_MD)).map_err(|e| Error::io(&out, e))?);
    }
    Ok(())
}

fn aggregate(common: &Common, runs: &[PathBuf]) -> Result<()> {
    let out = common.out.clone().ok_or_else(|| Error::Config("report over run directories needs --out".into()))?;
    let reports = collect_reports(runs)?;
    if reports.is_empty() {
        return Err(Error::Data("no reports found in the given run directories".into()));
    }
    let table = ResultsTable::from_reports(&reports);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_results(&table, &out)?;
    print!("{}", table.to_markdown());
    Ok(())
}
