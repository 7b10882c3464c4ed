use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use sssd_cli::{design_text, exit_code, read_config, run_validation, serve, Cache, ValidateRequest};
use sssd_core::report::DesignReport;

#[derive(Parser)]
#[command(name = "sssd", version, about = "Sample-size design for Bayesian equivalence and noninferiority tests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run both design stages and write the report.
    Design {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print per-stage wall-clock timings to stderr.
        #[arg(long)]
        timings: bool,
    },
    /// Check a report against the simulation oracle.
    Validate {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        reps: Option<usize>,
        /// Posterior draws per replication.
        #[arg(long)]
        m: Option<usize>,
        /// SSSD percentiles, comma separated.
        #[arg(long, value_delimiter = ',')]
        percentiles: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON output path; the table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

fn write_or_print(out: Option<&PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Design { config, seed, out, timings } => {
            let cfg = read_config(&config, seed)?;
            let result = design_text(&cfg, &Cache::from_env())?;
            write_or_print(out.as_ref(), &result.text)?;
            let report = DesignReport::from_text(&result.text)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if timings {
                match result.timings {
                    Some(t) => eprintln!("stage one {:.1} ms, stage two {:.1} ms", t.stage_one_ms, t.stage_two_ms),
                    None => eprintln!("served from cache {}", result.key),
                }
            }
        }
        Command::Validate { report, reps, m, percentiles, seed, out } => {
            let text =
                std::fs::read_to_string(&report).with_context(|| format!("reading report {}", report.display()))?;
            let parsed = DesignReport::from_text(&text)?;
            let req = ValidateRequest { config: serde_json::Value::Null, reps, m, percentiles, seed };
            let result = run_validation(&parsed, &req)?;
            print!("{}", result.table());
            if let Some(p) = out {
                let mut json = serde_json::to_string_pretty(&result)?;
                json.push('\n');
                std::fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Serve { port } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(port, Cache::from_env()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
