//! `cl-lab` command-line interface: dataset fetching, single experiment
//! runs, grid runs, and plot emission.

use clap::{Parser, Subcommand};
use cl_lab::config::{load_config, load_grid, ExperimentConfig};
use cl_lab::data::{default_data_dir, fetch_dataset, DatasetName, HttpFetcher};
use cl_lab::error::Result;
use cl_lab::plot::emit_plots;
use cl_lab::runner::{run_experiment, run_grid};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "cl-lab",
    about = "Continual-learning lab: forgetting vs. effective-rank collapse",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download and verify a dataset (mnist or cifar100).
    Fetch {
        /// Dataset name: mnist | cifar100
        #[arg(long)]
        dataset: String,
        /// Destination directory (defaults to the dataset cache,
        /// $CL_LAB_DATA or ./data, plus the dataset's folder name).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Run one experiment cell from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Full-scale CIFAR protocol: 20 tasks x 5 classes, full width.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Render the chart family over exported run directories.
    Plot {
        /// Run directories, each holding accuracy/summary/erank CSVs.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every cell of a grid config (arch x method).
    Grid {
        #[arg(long)]
        config: PathBuf,
    },
}

fn dataset_folder(name: DatasetName) -> &'static str {
    match name {
        DatasetName::Mnist => "mnist",
        DatasetName::Cifar100 => "cifar-100-binary",
    }
}

fn apply_overrides(
    mut cfg: ExperimentConfig,
    seed: Option<u64>,
    out: Option<PathBuf>,
    paper_scale: bool,
) -> Result<ExperimentConfig> {
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(dir) = out {
        cfg.output_dir = dir;
    }
    if paper_scale {
        cfg.paper_scale = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fetch { dataset, dir } => {
            let name: DatasetName = dataset.parse()?;
            let dest = dir.unwrap_or_else(|| default_data_dir().join(dataset_folder(name)));
            fetch_dataset(name, &dest, &HttpFetcher)?;
            println!("{dataset} ready in {}", dest.display());
        }
        Command::Run {
            config,
            seed,
            out,
            paper_scale,
        } => {
            let cfg = apply_overrides(load_config(&config)?, seed, out, paper_scale)?;
            let outcome = run_experiment(&cfg)?;
            println!(
                "wrote {} ({} seed(s), {} failed)",
                outcome.cell_dir.display(),
                outcome.logs.len(),
                outcome.failures.len()
            );
        }
        Command::Plot { runs, out } => {
            let written = emit_plots(&runs, &out)?;
            for p in &written {
                println!("wrote {}", p.display());
            }
        }
        Command::Grid { config } => {
            let cells = load_grid(&config)?;
            println!("grid: {} cell(s)", cells.len());
            let outcomes = run_grid(&cells)?;
            for o in &outcomes {
                println!("wrote {}", o.cell_dir.display());
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
