//! Runs simulation scenarios and checks their traces.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use dossier_sync::simnet::{self, GenParams, Scenario};

#[derive(Debug, Parser)]
#[command(name = "agent-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Check {
    Convergence,
    Confidentiality,
    Redaction,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Play a scenario file
    Run {
        scenario: PathBuf,
        /// Checks to run on the trace
        #[arg(long, value_delimiter = ',', value_name = "CHECK,...")]
        check: Vec<Check>,
        /// Write the trace's canonical bytes here
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
    },
    /// Write a random scenario file
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        agents: usize,
        #[arg(long, default_value_t = 10)]
        dossiers: usize,
        #[arg(long, default_value_t = 300)]
        events: usize,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen {
            seed,
            agents,
            dossiers,
            events,
            out,
        } => {
            let sc = simnet::random_scenario(
                seed,
                GenParams {
                    max_agents: agents,
                    max_dossiers: dossiers,
                    max_events: events,
                },
            );
            std::fs::write(&out, sc.encode()?).with_context(|| format!("cannot write {}", out.display()))?;
            println!("{} events, {} agents", sc.script.len(), sc.agents.len());
        }
        Command::Run { scenario, check, trace } => {
            let bytes = std::fs::read(&scenario).with_context(|| format!("cannot read {}", scenario.display()))?;
            let sc = Scenario::decode(&bytes).context("bad scenario file")?;
            let t = simnet::run_scenario(&sc)?;
            let errors: usize = t.steps.iter().map(|s| s.errors.len()).sum();
            println!("{} steps, {} exchanges, {} refused operations", t.steps.len(), t.exchanges().count(), errors);
            if let Some(path) = trace {
                std::fs::write(&path, t.encode()).with_context(|| format!("cannot write {}", path.display()))?;
            }
            let mut violations = 0;
            for c in check {
                match c {
                    Check::Convergence => {
                        let r = simnet::check_convergence(&t)?;
                        println!("convergence: {} grants checked, {} revoked-ok, {} violations", r.checked, r.revoked_ok.len(), r.violations.len());
                        for v in &r.violations {
                            println!("  {v}");
                        }
                        violations += r.violations.len();
                    }
                    Check::Confidentiality => {
                        let r = simnet::check_confidentiality(&t);
                        println!("confidentiality: {} bytes scanned, {} hits", r.scanned_bytes, r.hits.len());
                        for h in &r.hits {
                            println!("  {h}");
                        }
                        violations += r.hits.len();
                    }
                    Check::Redaction => {
                        let r = simnet::check_redaction(&t);
                        println!("redaction: {} mismatches", r.len());
                        for m in &r {
                            println!("  {m}");
                        }
                        violations += r.len();
                    }
                }
            }
            if violations > 0 {
                bail!("{violations} violations");
            }
        }
    }
    Ok(())
}

/// The clap error without its usage block, folded onto one line.
fn one_line(e: &clap::Error) -> String {
    let text = e.render().to_string();
    let kept: Vec<&str> = text
        .lines()
        .take_while(|l| !l.starts_with("Usage:"))
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    kept.join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("agent-sim: {}", one_line(&e));
            return ExitCode::FAILURE;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("agent-sim: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_lists_every_flag_and_subcommand() {
        let mut cmd = Cli::command();
        let help = cmd.render_long_help().to_string();
        for arg in cmd.get_arguments() {
            if let Some(long) = arg.get_long() {
                assert!(help.contains(&format!("--{long}")), "--{long} missing");
            }
        }
        for sub in cmd.get_subcommands() {
            assert!(help.contains(sub.get_name()), "{} missing", sub.get_name());
        }
    }
}
