use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use natmo::harness::{load_traces, run_matrix, summarize, ExperimentConfig};
use natmo::optimizers::method_names;
use natmo::{oracles, Result};

#[derive(Parser)]
#[command(name = "natmo", version, about = "Natural gradient and natural momentum experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment matrix from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle suite; exits 1 on any failure.
    Verify {
        /// Also write measured values as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Build summary CSVs from the traces in a directory.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        /// Iteration cap used for non-converged seeds.
        #[arg(long, default_value_t = natmo::benchmarks::DEFAULT_MAX_ITERS)]
        censor: usize,
    },
    /// Print every accepted method name.
    ListMethods,
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let traces = run_matrix(&cfg, Some(&out))?;
            for t in &traces {
                let last = t.last().map_or(0, |r| r.iter);
                println!("{} {} {last}", t.run_id, t.status.map_or("unfinished", |s| s.as_str()));
            }
            Ok(true)
        }
        Command::Verify { csv } => {
            let reports = oracles::run_all()?;
            for r in &reports {
                println!("{r}");
            }
            if let Some(path) = csv {
                let mut text = String::from("oracle,check,value,lo,hi,ok\n");
                text.extend(reports.iter().map(|r| r.csv_rows()));
                std::fs::write(path, text)?;
            }
            Ok(reports.iter().all(|r| r.pass))
        }
        Command::Summarize { input, censor } => {
            let traces = load_traces(&input)?;
            let summary = summarize(&traces, censor);
            summary.write(&input)?;
            for m in &summary.methods {
                println!(
                    "{} {} success={}/{} median_iterations={}",
                    m.problem,
                    m.method,
                    m.successes,
                    m.iterations.len(),
                    m.median_iterations()
                );
            }
            Ok(true)
        }
        Command::ListMethods => {
            for name in method_names() {
                println!("{name}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("natmo: {e}");
            ExitCode::from(2)
        }
    }
}
