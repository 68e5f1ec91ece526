use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use contrastkit::harness::{
    compare_variants, emit_plots, output_root, run_experiment, ExperimentConfig, RunRecord,
};
use contrastkit::{Error, Result};

/// Contrastive pretraining experiments at desk scale.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment config.
    Run { config: PathBuf },
    /// Run variant configs over shared seeds and rank them.
    Compare {
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
        /// Comma-separated seeds, overriding each config's own.
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        /// Where the ranked table and chart go (default: <output root>/comparison).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate charts for a run directory or a directory of seed runs.
    Plot { run_dir: PathBuf },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
}

fn records_under(dir: &Path) -> Result<Vec<RunRecord>> {
    if dir.join("run.json").exists() {
        return Ok(vec![RunRecord::load(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("run.json").exists())
        .collect();
    subdirs.sort();
    subdirs.iter().map(|d| RunRecord::load(d)).collect()
}

fn execute(cli: Cli) -> Result<()> {
    let mut progress = |line: &str| eprintln!("{line}");
    match cli.command {
        Command::Run { config } => {
            for r in run_experiment(&config, &mut progress)? {
                println!(
                    "{} seed {} ({:.1}s): {}",
                    r.name,
                    r.seed,
                    r.wall_clock_secs,
                    r.run_dir.display()
                );
                for (k, v) in &r.final_metrics {
                    println!("  {k} = {v}");
                }
            }
        }
        Command::Compare {
            configs,
            seeds,
            out,
        } => {
            let configs = configs
                .iter()
                .map(|p| ExperimentConfig::load(p))
                .collect::<Result<Vec<_>>>()?;
            let root = output_root();
            let cmp = compare_variants(&configs, &seeds, &root, &mut progress)?;
            let dir = out.unwrap_or_else(|| root.join("comparison"));
            for p in cmp.write(&dir)? {
                eprintln!("wrote {}", p.display());
            }
            print!("{}", cmp.to_markdown());
        }
        Command::Plot { run_dir } => {
            let records = records_under(&run_dir)?;
            for p in emit_plots(&records, &run_dir)? {
                println!("{}", p.display());
            }
        }
        Command::Validate { config } => {
            let c = ExperimentConfig::load(&config)?;
            println!(
                "{}: ok ({}, seeds {:?})",
                config.display(),
                c.kind.name(),
                c.seeds
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::Parse { .. } => 2,
                ref e if e.is_numeric() => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
