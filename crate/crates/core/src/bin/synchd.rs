//! The synchronizer daemon.

use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::Parser;
use dossier_sync::{SyncService, SUITE_ID};

/// Untrusted synchronizer: stores wrapped keys and sealed pending dossiers.
#[derive(Debug, Parser)]
#[command(name = "synchd", version)]
struct Cli {
    /// Address to listen on, e.g. 127.0.0.1:7070 (port 0 picks a free port)
    #[arg(long, value_name = "HOST:PORT")]
    listen: String,
    /// State directory (snapshot, log and lock files)
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Crypto suite identifier agreed in the handshake
    #[arg(long, value_name = "ID", default_value = SUITE_ID)]
    suite: String,
    /// Log level: error, warn, info, debug or trace
    #[arg(long, value_name = "LEVEL", default_value = "info")]
    log_level: log::LevelFilter,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.suite != SUITE_ID {
        bail!("unsupported suite `{}` (this build speaks {SUITE_ID})", cli.suite);
    }
    let service = SyncService::open(&cli.data, &cli.suite)
        .with_context(|| format!("cannot recover state in {}", cli.data.display()))?;
    let listener = TcpListener::bind(&cli.listen).with_context(|| format!("cannot bind {}", cli.listen))?;
    let shutdown = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(sig, Arc::clone(&shutdown)).context("cannot install signal handler")?;
    }
    println!("listening on {}", listener.local_addr()?);
    log::info!("serving {} from {}", cli.suite, cli.data.display());
    service.serve(listener, shutdown).context("shutdown save failed")?;
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
            eprintln!("synchd: {}", one_line(&e));
            return ExitCode::FAILURE;
        }
    };
    env_logger::Builder::new().filter_level(cli.log_level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("synchd: {e:#}");
            ExitCode::FAILURE
        }
    }
}
