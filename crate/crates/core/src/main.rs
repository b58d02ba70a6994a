use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fednar::checks;
use fednar::config::{ConfigError, ExperimentConfig};
use fednar::data::{self, tags, DataError};
use fednar::experiment::{self, ExperimentError};
use fednar::numkit::RngStream;

#[derive(Parser)]
#[command(
    name = "fednar",
    version,
    about = "Federated optimization simulator with co-clipped weight decay"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metrics CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment per value of a config key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "sweep_out")]
        out_dir: PathBuf,
    },
    /// Run the property suite.
    Check,
    /// Distance-to-uniform statistics of Dirichlet class distributions.
    PartitionStats {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        clients: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Input(String),
    Diagnostic(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_diagnostic() {
            Failure::Diagnostic(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Input(e.to_string())
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|e| match e {
        ConfigError::Io { .. } => Failure::Input(e.to_string()),
        _ => Failure::Input(format!("{}: {e}", path.display())),
    })
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, out } => {
            let cfg = load(&config)?;
            let rows = experiment::run_experiment(&cfg)?;
            match out {
                Some(path) => experiment::emit_metrics_csv(&rows, &path)?,
                None => print!("{}", experiment::metrics_csv_string(&rows)),
            }
        }
        Command::Sweep {
            config,
            param,
            values,
            out_dir,
        } => {
            let cfg = load(&config)?;
            for run in experiment::sweep(&cfg, &param, &values, &out_dir)? {
                let last = run.rows.last();
                println!(
                    "{param}={} final_test_acc={} -> {}",
                    run.value,
                    last.map_or("-".into(), |r| experiment::fmt_sig9(r.test_acc)),
                    run.path.display()
                );
            }
        }
        Command::Check => {
            let results = checks::run_all();
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Failure::Diagnostic(format!(
                    "{failed} of {} checks failed",
                    results.len()
                )));
            }
        }
        Command::PartitionStats {
            alpha,
            clients,
            classes,
            draws,
            seed,
        } => {
            let root = RngStream::new(seed);
            let s = data::dirichlet_tv_stats(alpha, classes, draws, &root.child(0))?;
            println!("alpha={alpha} classes={classes} draws={draws}");
            println!(
                "tv_to_uniform mean={:.6} std={:.6} min={:.6} max={:.6}",
                s.mean, s.std, s.min, s.max
            );
            let cfg = ExperimentConfig {
                seed,
                classes,
                ..ExperimentConfig::default()
            };
            let (train, _) = experiment::load_data(&cfg)?;
            let p = data::dirichlet_partition(&train, clients, alpha, &root.child(tags::PARTITION))?;
            p.check_cover(train.len())?;
            let sizes: Vec<usize> = p.shards.iter().map(|s| s.len()).collect();
            println!(
                "partition of {} points over {clients} clients: shard size min={} max={} (disjoint cover ok)",
                train.len(),
                sizes.iter().min().unwrap_or(&0),
                sizes.iter().max().unwrap_or(&0)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // usage errors share exit code 1 with config errors; 2 is reserved for diagnostics
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Diagnostic(msg)) => {
            eprintln!("diagnostic failure: {msg}");
            ExitCode::from(2)
        }
    }
}
