use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use faas_cli::{http, tools};
use faas_core::audit::{DEFAULT_GAP, DEFAULT_THETA};
use faas_core::registry::{parse_ledger, verify_ledger_bytes, ChainStatus};
use faas_core::scenario::{parse_scenario, run_commands, RunOptions, ScenarioError, Session};

#[derive(Parser)]
#[command(name = "faas", version, about = "Federation-as-a-Service kernel over simulated clouds")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario script against a fresh federation.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the ledger to this file.
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Print the event log as JSON lines.
        #[arg(long)]
        json: bool,
    },
    /// Check a ledger file's hash chain.
    Verify {
        ledger: PathBuf,
        /// Expected hash of the last block, hex; detects truncation at a block boundary.
        #[arg(long)]
        tip: Option<String>,
    },
    /// Serve the administration HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Scenario to run before serving, e.g. to create the federation.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Mask a JSON payload with a masking policy.
    Mask {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Existing tokenization table to extend.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Where to write the updated table.
        #[arg(long)]
        table_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reverse the reversible rules of a masking policy.
    Unmask {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// k-anonymize a delimited dataset.
    Anonymize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        hierarchies: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        max_suppressed: usize,
        #[arg(long, default_value_t = ',')]
        delimiter: char,
    },
    /// Answer count, sum:<column> or avg:<column> with Laplace noise.
    DpQuery {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        sensitivity: Option<f64>,
        #[arg(long, default_value_t = ',')]
        delimiter: char,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mine roles and flag anomalies in a ledger's access log.
    Audit {
        ledger: PathBuf,
        #[arg(long)]
        train_until: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_THETA)]
        theta: f64,
        #[arg(long, default_value_t = DEFAULT_GAP)]
        gap: u64,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn delimiter(c: char) -> Result<u8> {
    u8::try_from(c).context("delimiter must be a single byte")
}

/// Writes pretty JSON to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(v)?) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run(scenario: &Path, seed: u64, ledger: Option<PathBuf>, json: bool) -> Result<ExitCode> {
    let text = read(scenario)?;
    if let Some(path) = &ledger {
        // Each run writes a fresh ledger.
        let _ = fs::remove_file(path);
    }
    let options = RunOptions { seed, ledger_path: ledger };
    let commands = match parse_scenario(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}: {e}", scenario.display());
            return Ok(ExitCode::from(2));
        }
    };
    let mut session = Session::new(options.seed, options.ledger_path.clone());
    match run_commands(&mut session, &commands) {
        Ok(report) => {
            for step in &report.steps {
                if json {
                    println!("{}", serde_json::to_string(step)?);
                } else {
                    println!("{:>4} {:<18} {}", step.line, step.command, if step.ok { "ok" } else { "failed (expected)" });
                }
            }
            println!("ledger tip {} ({} records)", report.ledger_tip.unwrap_or_default(), report.records);
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("{}: {e}", scenario.display());
            Ok(ExitCode::from(match e {
                ScenarioError::Parse { .. } => 2,
                _ => 1,
            }))
        }
    }
}

#[tokio::main]
async fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Cmd::Run { scenario, seed, ledger, json } => run(&scenario, seed, ledger, json),
        Cmd::Verify { ledger, tip } => {
            let bytes = fs::read(&ledger).with_context(|| format!("reading {}", ledger.display()))?;
            match verify_ledger_bytes(&bytes) {
                ChainStatus::Valid => {
                    let actual = parse_ledger(&bytes).ok().and_then(|b| b.last().map(|b| b.hash.to_hex()));
                    match tip {
                        Some(expected) if actual.as_deref() != Some(expected.to_ascii_lowercase().as_str()) => {
                            println!("tip mismatch: file ends at {}", actual.as_deref().unwrap_or("<empty>"));
                            Ok(ExitCode::FAILURE)
                        }
                        _ => {
                            println!("valid");
                            Ok(ExitCode::SUCCESS)
                        }
                    }
                }
                ChainStatus::Violation(i) => {
                    println!("violation at block {i}");
                    Ok(ExitCode::FAILURE)
                }
            }
        }
        Cmd::Serve { port, seed, ledger, scenario } => {
            let mut session = Session::new(seed, ledger.clone());
            if let Some(path) = scenario {
                let commands = parse_scenario(&read(&path)?)?;
                run_commands(&mut session, &commands)?;
            }
            let app = http::router(http::AppState::new(session, ledger));
            let addr = SocketAddr::from(([127, 0, 0, 1], port));
            let listener = tokio::net::TcpListener::bind(addr).await?;
            eprintln!("listening on http://{addr}");
            axum::serve(listener, app).await?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Mask { policy, input, table, table_out, seed } => {
            let table_text = table.as_deref().map(read).transpose()?;
            let masked = tools::mask(&read(&input)?, &read(&policy)?, table_text.as_deref(), seed)?;
            print_json(&masked.document)?;
            if let Some(out) = table_out {
                fs::write(&out, serde_json::to_vec_pretty(&masked.table)?)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Unmask { policy, input, table, seed } => {
            print_json(&tools::unmask(&read(&input)?, &read(&policy)?, &read(&table)?, seed)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Anonymize { input, hierarchies, k, max_suppressed, delimiter: d } => {
            let release = tools::anonymize(&read(&input)?, delimiter(d)?, &read(&hierarchies)?, k, max_suppressed)?;
            eprintln!("levels {:?}, {} suppressed", release.levels, release.suppressed);
            print!("{}", release.dataset.to_delimited(delimiter(d)?));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::DpQuery { input, query, epsilon, sensitivity, delimiter: d, seed } => {
            let q = tools::parse_query(&query)?;
            print_json(&tools::dp_query(&read(&input)?, delimiter(d)?, &q, epsilon, sensitivity, seed)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Audit { ledger, train_until, theta, gap } => {
            let bytes = fs::read(&ledger).with_context(|| format!("reading {}", ledger.display()))?;
            print_json(&tools::audit_ledger(&bytes, train_until, theta, gap)?)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
