use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xorelay::config::ExperimentConfig;
use xorelay::harness::{self, HarnessError, SweepParam};
use xorelay::medium::Trace;

#[derive(Parser)]
#[command(name = "xorelay", version, about = "XOR network-coding relay simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and its plain baseline.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event trace to stderr.
        #[arg(long)]
        trace: bool,
        /// Output file, `-` for stdout.
        #[arg(long, default_value = "-")]
        out: String,
        #[arg(long)]
        json: bool,
        /// Also write the full run statistics as JSON to this file.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Bisect the largest stable per-flow arrival rate.
    Stability {
        #[arg(long)]
        config: PathBuf,
        /// Packets per second.
        #[arg(long, default_value_t = 1.0)]
        tol: f64,
        #[arg(long, default_value = "-")]
        out: String,
        #[arg(long)]
        json: bool,
    },
    /// Run one experiment per parameter value.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of q, rate, delta, x.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value = "-")]
        out: String,
        #[arg(long)]
        json: bool,
    },
    /// Describe a preset topology.
    Topology {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        print: bool,
        /// Emit the preset as a TOML config instead.
        #[arg(long)]
        toml: bool,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
}

fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    Ok(ExperimentConfig::from_file(path).map_err(HarnessError::from)?)
}

fn emit(out: &str, text: &str) -> Result<(), CliError> {
    if out == "-" {
        let mut stdout = std::io::stdout().lock();
        stdout.write_all(text.as_bytes()).map_err(|e| CliError::Io("stdout".into(), e))
    } else {
        std::fs::write(out, text).map_err(|e| CliError::Io(out.into(), e))
    }
}

fn render(rows: &[harness::Row], json: bool) -> String {
    if json {
        let mut s = harness::to_json(rows);
        s.push('\n');
        s
    } else {
        harness::to_csv(rows)
    }
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run { config, seed, trace, out, json, metrics } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.sim.seed = s;
            }
            let t = if trace { Trace::Writer(Box::new(std::io::stderr())) } else { Trace::Off };
            let (m, _) = harness::run_traced(&cfg, t)?;
            if let Some(path) = metrics {
                let text = serde_json::to_string_pretty(&m).expect("metrics serialize");
                std::fs::write(&path, text).map_err(|e| CliError::Io(path.display().to_string(), e))?;
            }
            let g = if cfg.algorithm.name == "plain" {
                1.0
            } else {
                harness::gain(&m, &harness::run_experiment(&harness::plain_baseline(&cfg))?)?
            };
            emit(&out, &render(&harness::rows(&cfg.scenario_name(), &m, g), json))
        }
        Command::Stability { config, tol, out, json } => {
            let cfg = load(&config)?;
            let (rows, res) = harness::stability_rows(&cfg, tol)?;
            eprintln!("lambda* = {:.3} pkt/s per flow ({} probes)", res.lambda_star, res.probes.len());
            emit(&out, &render(&rows, json))
        }
        Command::Sweep { config, param, values, out, json } => {
            let cfg = load(&config)?;
            emit(&out, &render(&harness::sweep_rows(&cfg, param, &values)?, json))
        }
        Command::Topology { preset, print, toml } => {
            let cfg = ExperimentConfig::for_preset(&preset, "alg1");
            cfg.validate().map_err(HarnessError::from)?;
            if toml {
                emit("-", &cfg.to_toml())
            } else {
                let text = harness::describe_topology(&cfg)?;
                if print {
                    emit("-", &text)?;
                }
                Ok(())
            }
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
