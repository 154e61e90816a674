use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fal_core::config::{parse_overrides, ExperimentConfig};
use fal_core::runner::{self, ExperimentResult};

#[derive(Parser)]
#[command(name = "fal", version, about = "Federated active learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the client-by-class count matrix of one seed's partition as CSV.
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config overrides, e.g. `--partition.alpha=0.5`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run one experiment and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run every `*.toml` config in a directory (or the listed files).
    Grid {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Run configs one after another instead of in parallel.
        #[arg(long)]
        serial: bool,
    },
    /// Paired comparison of two results (output directories or summary.json files).
    Compare { first: PathBuf, second: PathBuf },
    /// Build CSV/JSON report files from a set of results.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn load_config(path: &Path, overrides: &[String]) -> CliResult<ExperimentConfig> {
    Ok(ExperimentConfig::load(path, &parse_overrides(overrides)?)?)
}

fn config_files(paths: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            found.retain(|f| f.extension().is_some_and(|x| x == "toml"));
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err("no config files found".into());
    }
    Ok(files)
}

fn print_result(r: &ExperimentResult, dir: &Path) {
    let ok = r.runs.iter().filter(|s| s.succeeded()).count();
    let finals: Vec<f64> = r
        .runs
        .iter()
        .filter_map(|s| s.rounds.last().map(|x| x.test_acc))
        .collect();
    let mean = finals.iter().sum::<f64>() / finals.len().max(1) as f64;
    println!(
        "{} [{}] {ok}/{} seeds ok, final acc {mean:.4} -> {}",
        r.strategy,
        r.setting,
        r.runs.len(),
        dir.display()
    );
    for s in r.runs.iter().filter(|s| !s.succeeded()) {
        eprintln!("  seed {} failed: {}", s.seed, s.error.as_deref().unwrap_or(""));
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Partition {
            config,
            seed,
            out,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let (train, _) = cfg.dataset.load()?;
            let (train, split) = runner::partition_for_seed(&cfg, &train, seed)?;
            match out {
                Some(path) => split.write_matrix_csv(&train, std::fs::File::create(path)?)?,
                None => split.write_matrix_csv(&train, std::io::stdout().lock())?,
            }
        }
        Command::Run { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let result = runner::run_experiment(&cfg)?;
            let dir = cfg.resolved_output_dir();
            runner::write_artifacts(&result, &dir)?;
            print_result(&result, &dir);
        }
        Command::Grid { configs, serial } => {
            let configs: Vec<ExperimentConfig> = config_files(&configs)?
                .iter()
                .map(|f| load_config(f, &[]))
                .collect::<CliResult<_>>()?;
            let results = runner::run_grid(&configs, !serial, true)?;
            for (r, c) in results.iter().zip(&configs) {
                print_result(r, &c.resolved_output_dir());
            }
        }
        Command::Compare { first, second } => {
            let a = runner::load_result(&first)?;
            let b = runner::load_result(&second)?;
            println!("{}", serde_json::to_string_pretty(&runner::compare(&a, &b)?)?);
        }
        Command::Report { results, out } => {
            let loaded: Vec<ExperimentResult> = results
                .iter()
                .map(|p| runner::load_result(p))
                .collect::<Result<_, _>>()?;
            let files = runner::report(&loaded)?;
            runner::write_files(&files, &out)?;
            print!("{}", files["summary.txt"]);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
