//! The client agent command line.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use dossier_sync::agent::{IdentityFile, Session};
use dossier_sync::wire::Message;
use dossier_sync::{
    Agent, AgentConfig, AgentError, DossierId, FieldName, FieldValue, Fields, Identity, RevokePolicy,
    TcpSession, UserId, SUITE_ID,
};

/// Trusted client agent for sharing dossiers through a synchronizer.
#[derive(Debug, Parser)]
#[command(name = "agent", version)]
struct Cli {
    /// Identity file holding this user's private keys
    #[arg(long, value_name = "FILE")]
    identity: PathBuf,
    /// Local state directory
    #[arg(long, value_name = "DIR")]
    store: PathBuf,
    /// Synchronizer address
    #[arg(long, value_name = "HOST:PORT", env = "DC_SYNC")]
    sync: Option<String>,
    /// What to do with a foreign record whose key was revoked: retain or purge
    #[arg(long, value_name = "POLICY", default_value = "retain")]
    revoke_policy: RevokePolicy,
    /// Keep unwrapped keys in memory this many seconds (0 disables)
    #[arg(long, value_name = "SECONDS", default_value_t = 0)]
    key_cache_ttl: u64,
    /// Log level: error, warn, info, debug or trace
    #[arg(long, value_name = "LEVEL", default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create an identity and register it at the synchronizer
    Init { user: String },
    /// Create an owned dossier, optionally with initial name=value fields
    Create { dossier: String, fields: Vec<String> },
    /// Set one field of an owned dossier
    Set { dossier: String, field: String, value: String },
    /// Delete one field of an owned dossier
    DelField { dossier: String, field: String },
    /// Give a receiver access to a comma separated list of fields
    Grant { dossier: String, receiver: String, fields: String },
    /// Withdraw a receiver's key
    Revoke { dossier: String, receiver: String },
    /// Send the current version of a dossier to its receivers
    Push {
        #[arg(required_unless_present = "all", conflicts_with = "all")]
        dossier: Option<String>,
        /// Push every owned dossier
        #[arg(long)]
        all: bool,
    },
    /// Fetch and store pending dossiers
    Pull,
    /// Decrypt and print a dossier as name=value lines
    Show { dossier: String },
    /// List owned and foreign dossiers
    List,
}

/// Connects on first use, so purely local commands work without a synchronizer.
struct LazySession {
    addr: Option<String>,
    inner: Option<TcpSession>,
}

impl Session for LazySession {
    fn call(&mut self, request: &Message) -> Result<Message, AgentError> {
        if self.inner.is_none() {
            let addr = self
                .addr
                .as_deref()
                .ok_or_else(|| AgentError::SyncUnreachable("no --sync address given".into()))?;
            self.inner = Some(TcpSession::connect(addr, SUITE_ID)?);
        }
        self.inner.as_mut().expect("connected above").call(request)
    }
}

fn write_identity(path: &Path, identity: &Identity) -> anyhow::Result<()> {
    let bytes = IdentityFile::from_identity(identity).encode()?;
    let mut opts = std::fs::OpenOptions::new();
    opts.write(true).create_new(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts
        .open(path)
        .with_context(|| format!("cannot create identity file {}", path.display()))?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

fn read_identity(path: &Path) -> anyhow::Result<Identity> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read identity file {}", path.display()))?;
    Ok(IdentityFile::decode(&bytes)
        .with_context(|| format!("bad identity file {}", path.display()))?
        .into_identity())
}

fn parse_fields(pairs: &[String]) -> anyhow::Result<Fields> {
    let mut fields = Fields::new();
    for pair in pairs {
        let (name, value) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("expected name=value, got `{pair}`"))?;
        fields.insert(FieldName::new(name)?, FieldValue::new(value.as_bytes())?);
    }
    Ok(fields)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = AgentConfig {
        revoke_policy: cli.revoke_policy,
        key_cache_ttl_seconds: cli.key_cache_ttl,
        sync_endpoint: cli.sync.clone(),
    };
    let mut session = LazySession {
        addr: cli.sync.clone(),
        inner: None,
    };
    let rng = || Box::new(rand_core::OsRng);

    if let Command::Init { user } = &cli.command {
        if cli.sync.is_none() {
            bail!("init needs --sync to register the new identity");
        }
        if cli.identity.exists() {
            bail!("identity file {} already exists", cli.identity.display());
        }
        let identity = Identity::generate(UserId::new(user.as_str())?, &mut rand_core::OsRng)?;
        let mut agent = Agent::open(identity, config, &cli.store, SUITE_ID, rng())?;
        agent.register(&mut session)?;
        write_identity(&cli.identity, agent.identity())?;
        println!("registered {user}");
        return Ok(());
    }

    let identity = read_identity(&cli.identity)?;
    let mut agent = Agent::open(identity, config, &cli.store, SUITE_ID, rng())?;
    let result = dispatch(&mut agent, &mut session, cli.command);
    agent.save()?;
    result
}

fn dispatch(agent: &mut Agent, session: &mut LazySession, command: Command) -> anyhow::Result<()> {
    match command {
        Command::Init { .. } => unreachable!("handled before the store is opened"),
        Command::Create { dossier, fields } => {
            agent.create_dossier(DossierId::new(dossier)?, parse_fields(&fields)?)?;
        }
        Command::Set { dossier, field, value } => {
            let v = agent.edit_field(
                &DossierId::new(dossier)?,
                FieldName::new(field)?,
                Some(FieldValue::new(value.into_bytes())?),
            )?;
            println!("{v}");
        }
        Command::DelField { dossier, field } => {
            let v = agent.edit_field(&DossierId::new(dossier)?, FieldName::new(field)?, None)?;
            println!("{v}");
        }
        Command::Grant {
            dossier,
            receiver,
            fields,
        } => {
            let fields = fields
                .split(',')
                .filter(|f| !f.is_empty())
                .map(FieldName::new)
                .collect::<Result<BTreeSet<_>, _>>()?;
            let report = agent.grant(session, &DossierId::new(dossier)?, &UserId::new(receiver)?, fields)?;
            for (r, e) in &report.failed {
                eprintln!("push to {r} failed: {e}");
            }
        }
        Command::Revoke { dossier, receiver } => {
            agent.revoke(session, &DossierId::new(dossier)?, &UserId::new(receiver)?)?;
        }
        Command::Push { dossier, all } => {
            let reports = if all {
                agent.push_all(session)?
            } else {
                let d = DossierId::new(dossier.expect("clap requires a dossier"))?;
                let r = agent.push(session, &d)?;
                vec![(d, r)]
            };
            let mut failed = false;
            for (d, r) in reports {
                println!("{d} {}: sent to {}", r.version, r.sent.len());
                for (u, e) in r.failed {
                    eprintln!("{d}: push to {u} failed: {e}");
                    failed = true;
                }
            }
            if failed {
                bail!("some pushes failed");
            }
        }
        Command::Pull => {
            let report = agent.pull(session)?;
            for (d, v) in &report.applied {
                println!("{d} {v}");
            }
            if !report.quarantined.is_empty() {
                eprintln!("{} entries failed the origin check and were left on the synchronizer", report.quarantined.len());
            }
        }
        Command::Show { dossier } => {
            let view = agent.use_dossier(session, &DossierId::new(dossier)?, now())?;
            let mut out = std::io::stdout().lock();
            out.write_all(&view.render())?;
        }
        Command::List => {
            let state = agent.state();
            for (d, rec) in &state.owned {
                println!("owned {d} {}", rec.dossier.version);
            }
            for (d, rec) in &state.foreign {
                println!("foreign {d} {} from {}", rec.version, rec.owner);
            }
        }
    }
    Ok(())
}

fn now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
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
            eprintln!("agent: {}", one_line(&e));
            return ExitCode::FAILURE;
        }
    };
    env_logger::Builder::new().filter_level(cli.log_level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("agent: {e:#}");
            if matches!(e.downcast_ref::<AgentError>(), Some(AgentError::AccessRevoked(_))) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
