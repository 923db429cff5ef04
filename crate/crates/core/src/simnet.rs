//! Deterministic in-process simulation.
//!
//! A [`Scenario`] names a set of agents and a script of events. [`run_scenario`]
//! plays it against a real [`SyncService`] in a scratch directory, through a
//! simulated network that can take agents offline, crash the synchronizer,
//! and withhold or reorder pending entries. Everything random is drawn from
//! the scenario seed, so a scenario always produces the same [`Trace`] bytes.
//!
//! The checks ([`check_convergence`], [`check_confidentiality`],
//! [`check_redaction`]) only look at the trace.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{Agent, AgentConfig, AgentError, AgentState, DossierView, RevokePolicy, Session};
use crate::crypto::{self, Identity, SealedBox, SUITE_ID};
use crate::model::{self, DossierId, FieldName, FieldValue, Fields, RedactedView, UserId, Version};
use crate::store::{Durability, StoreError, LOG_FILE, SNAPSHOT_FILE};
use crate::synchronizer::{SyncService, SyncState};
use crate::wire::{self, Bytes, Message, WireError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("InvalidScenario: {0}")]
    InvalidScenario(String),
    #[error("QueuesNotDrained: {0} pending entries left at the synchronizer")]
    QueuesNotDrained(u64),
    #[error("simulation setup failed: {0}")]
    Setup(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<AgentError> for SimError {
    fn from(e: AgentError) -> Self {
        SimError::Setup(e.to_string())
    }
}

/// Agent-level operation inside a script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Create {
        dossier: DossierId,
        fields: Fields,
    },
    Set {
        dossier: DossierId,
        field: FieldName,
        value: FieldValue,
    },
    DelField {
        dossier: DossierId,
        field: FieldName,
    },
    Grant {
        dossier: DossierId,
        receiver: UserId,
        fields: BTreeSet<FieldName>,
    },
    Revoke {
        dossier: DossierId,
        receiver: UserId,
    },
    Push {
        dossier: DossierId,
    },
    PushAll {},
    Pull {},
    Use {
        dossier: DossierId,
    },
}

impl Op {
    fn needs_network(&self) -> bool {
        !matches!(self, Op::Create { .. } | Op::Set { .. } | Op::DelField { .. } | Op::Use { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    AgentOp {
        user: UserId,
        op: Op,
    },
    GoOffline {
        user: UserId,
    },
    GoOnline {
        user: UserId,
    },
    CrashSync {},
    RestartSync {},
    AdvanceClock {
        seconds: u64,
    },
    /// Pulls the receiver's queue one entry at a time. `order` indexes the
    /// queue as it stands when the event starts; unlisted entries are
    /// withheld and stay queued.
    Deliver {
        user: UserId,
        order: Vec<u32>,
    },
}

impl Event {
    fn user(&self) -> Option<&UserId> {
        match self {
            Event::AgentOp { user, .. }
            | Event::GoOffline { user }
            | Event::GoOnline { user }
            | Event::Deliver { user, .. } => Some(user),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub revoke_policy: RevokePolicy,
    pub key_cache_ttl_seconds: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub agents: Vec<UserId>,
    pub config: SimConfig,
    pub script: Vec<Event>,
}

impl Scenario {
    pub fn new(seed: u64, agents: Vec<UserId>) -> Self {
        Self {
            seed,
            agents,
            config: SimConfig::default(),
            script: Vec::new(),
        }
    }

    pub fn op(&mut self, user: &UserId, op: Op) -> &mut Self {
        self.script.push(Event::AgentOp { user: user.clone(), op });
        self
    }

    pub fn event(&mut self, event: Event) -> &mut Self {
        self.script.push(event);
        self
    }

    /// Scenario file bytes: one frame holding the canonical encoding.
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        wire::frame(&wire::to_canonical(self)?)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = bytes;
        let payload = wire::deframe(&mut r)?;
        if !r.is_empty() {
            return Err(WireError::Malformed("trailing bytes after scenario".into()));
        }
        wire::from_canonical(&payload)
    }

    fn validate(&self) -> Result<(), SimError> {
        let declared: BTreeSet<&UserId> = self.agents.iter().collect();
        if declared.len() != self.agents.len() {
            return Err(SimError::InvalidScenario("agent declared twice".into()));
        }
        for (i, ev) in self.script.iter().enumerate() {
            let mut named: Vec<&UserId> = ev.user().into_iter().collect();
            if let Event::AgentOp {
                op: Op::Grant { receiver, .. } | Op::Revoke { receiver, .. },
                ..
            } = ev
            {
                named.push(receiver);
            }
            if let Some(u) = named.into_iter().find(|u| !declared.contains(u)) {
                return Err(SimError::InvalidScenario(format!("event {i} names undeclared agent {u}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: Bytes,
    pub response: Bytes,
}

/// A successful Use of a foreign dossier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UseRecord {
    pub user: UserId,
    pub dossier: DossierId,
    pub owner: UserId,
    pub version: Version,
    pub view: Bytes,
}

/// What the owner meant a receiver to see, captured when a Send was accepted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushRecord {
    pub owner: UserId,
    pub receiver: UserId,
    pub dossier: DossierId,
    pub version: Version,
    pub view: Bytes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: u64,
    pub user: Option<UserId>,
    pub exchanges: Vec<Exchange>,
    pub errors: Vec<String>,
    pub uses: Vec<UseRecord>,
    pub sync_digest: String,
    pub agent_digests: BTreeMap<UserId, String>,
}

/// A state serialization, kept whenever it changed. `owner` is absent for
/// the synchronizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDump {
    pub step: u64,
    pub owner: Option<UserId>,
    pub bytes: Bytes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurableFile {
    pub step: u64,
    pub path: String,
    pub bytes: Bytes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canary {
    pub owner: UserId,
    pub dossier: DossierId,
    pub field: FieldName,
    pub value: Bytes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub seed: u64,
    pub agents: Vec<UserId>,
    pub setup: Vec<Exchange>,
    pub steps: Vec<Step>,
    pub pushes: Vec<PushRecord>,
    pub states: Vec<StateDump>,
    pub durable: Vec<DurableFile>,
    pub canaries: Vec<Canary>,
    pub final_agents: BTreeMap<UserId, Bytes>,
    pub final_sync: Bytes,
    pub pending_left: u64,
}

impl Trace {
    pub fn encode(&self) -> Vec<u8> {
        wire::to_canonical(self).expect("trace is serialisable")
    }

    pub fn agent_state(&self, user: &UserId) -> Option<AgentState> {
        self.final_agents
            .get(user)
            .and_then(|b| wire::from_canonical(&b.0).ok())
    }

    pub fn sync_state(&self) -> SyncState {
        wire::from_canonical(&self.final_sync.0).expect("trace holds a canonical state")
    }

    /// Every message exchanged, in order.
    pub fn exchanges(&self) -> impl Iterator<Item = &Exchange> {
        self.setup.iter().chain(self.steps.iter().flat_map(|s| &s.exchanges))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Network {
    sync: Option<SyncService>,
    online: BTreeMap<UserId, bool>,
}

struct SimSession<'a> {
    net: &'a Network,
    user: &'a UserId,
    only_entry: Option<u64>,
    log: &'a mut Vec<(Message, Message)>,
}

impl Session for SimSession<'_> {
    fn call(&mut self, request: &Message) -> Result<Message, AgentError> {
        if !self.net.online[self.user] {
            return Err(AgentError::SyncUnreachable("agent offline".into()));
        }
        let Some(sync) = &self.net.sync else {
            return Err(AgentError::SyncUnreachable("synchronizer down".into()));
        };
        let mut response = sync.dispatch(request);
        if let (Some(id), Message::OkPending { entries }) = (self.only_entry, &mut response) {
            entries.retain(|e| e.entry_id == id);
        }
        self.log.push((request.clone(), response.clone()));
        Ok(response)
    }
}

struct Sim {
    dir: tempfile::TempDir,
    net: Network,
    agents: BTreeMap<UserId, Agent>,
    outbox: BTreeMap<UserId, Vec<Event>>,
    clock: u64,
    trace: Trace,
    last_sync: Option<Vec<u8>>,
    last_agent: HashMap<UserId, String>,
}

impl Sim {
    fn sync_dir(&self) -> PathBuf {
        self.dir.path().join("sync")
    }

    fn start_sync(&mut self) -> Result<(), SimError> {
        self.net.sync = Some(SyncService::open_with(self.sync_dir(), SUITE_ID, Durability::Process)?);
        Ok(())
    }

    fn capture_durable(&mut self, step: u64, sync_only: bool) -> Result<(), SimError> {
        let mut dirs = vec![("sync".to_owned(), self.sync_dir())];
        if !sync_only {
            for (i, user) in self.trace.agents.iter().enumerate() {
                dirs.push((format!("agent/{user}"), self.dir.path().join(format!("agent{i}"))));
            }
        }
        for (label, dir) in dirs {
            for file in [SNAPSHOT_FILE, LOG_FILE] {
                let path = dir.join(file);
                if path.exists() {
                    self.trace.durable.push(DurableFile {
                        step,
                        path: format!("{label}/{file}"),
                        bytes: Bytes(std::fs::read(path)?),
                    });
                }
            }
        }
        Ok(())
    }

    fn run_op(&mut self, user: &UserId, op: &Op, step: &mut Step) {
        let mut log = Vec::new();
        let agent = self.agents.get_mut(user).expect("validated");
        let mut session = SimSession {
            net: &self.net,
            user,
            only_entry: None,
            log: &mut log,
        };
        let result: Result<(), AgentError> = match op {
            Op::Create { dossier, fields } => agent.create_dossier(dossier.clone(), fields.clone()),
            Op::Set { dossier, field, value } => agent.edit_field(dossier, field.clone(), Some(value.clone())).map(drop),
            Op::DelField { dossier, field } => agent.edit_field(dossier, field.clone(), None).map(drop),
            Op::Grant {
                dossier,
                receiver,
                fields,
            } => agent.grant(&mut session, dossier, receiver, fields.clone()).map(|r| {
                step.errors.extend(r.failed.into_iter().map(|(u, e)| format!("push to {u}: {e}")));
            }),
            Op::Revoke { dossier, receiver } => agent.revoke(&mut session, dossier, receiver),
            Op::Push { dossier } => agent.push(&mut session, dossier).map(|r| {
                step.errors.extend(r.failed.into_iter().map(|(u, e)| format!("push to {u}: {e}")));
            }),
            Op::PushAll {} => agent.push_all(&mut session).map(|rs| {
                for (d, r) in rs {
                    step.errors.extend(r.failed.into_iter().map(|(u, e)| format!("push {d} to {u}: {e}")));
                }
            }),
            Op::Pull {} => agent.pull(&mut session).map(drop),
            Op::Use { dossier } => match agent.use_dossier(&mut session, dossier, self.clock) {
                Ok(DossierView::Foreign(view)) => {
                    step.uses.push(UseRecord {
                        user: user.clone(),
                        dossier: view.id.clone(),
                        owner: view.owner.clone(),
                        version: view.version,
                        view: Bytes(wire::to_canonical(&view).expect("view is serialisable")),
                    });
                    Ok(())
                }
                Ok(DossierView::Owned(_)) => Ok(()),
                Err(e) => Err(e),
            },
        };
        if let Err(e) = result {
            step.errors.push(e.to_string());
        }
        self.record_pushes(user, &log, step);
        self.record_exchanges(log, step);
    }

    fn record_pushes(&mut self, owner: &UserId, log: &[(Message, Message)], step: &mut Step) {
        let state = self.agents[owner].state();
        for (req, resp) in log {
            let (Message::Send {
                dossier,
                receiver,
                version,
                ..
            }, Message::OkEmpty {}) = (req, resp)
            else {
                continue;
            };
            let rec = &state.owned[dossier];
            let granted = state.acl.get(dossier, receiver).cloned().unwrap_or_default();
            let allowed = granted.intersection(&rec.dossier.field_names()).cloned().collect();
            let view = model::redact(&rec.dossier, &allowed).expect("subset of the dossier's fields");
            if view.version != *version {
                step.errors.push(format!("push record for {dossier} drifted from version {version}"));
            }
            self.trace.pushes.push(PushRecord {
                owner: owner.clone(),
                receiver: receiver.clone(),
                dossier: dossier.clone(),
                version: *version,
                view: Bytes(wire::to_canonical(&view).expect("view is serialisable")),
            });
        }
    }

    fn record_exchanges(&mut self, log: Vec<(Message, Message)>, step: &mut Step) {
        for (req, resp) in log {
            step.exchanges.push(Exchange {
                request: Bytes(wire::canonical_encode(&req).expect("sent messages encode")),
                response: Bytes(wire::canonical_encode(&resp).expect("received messages encode")),
            });
        }
    }

    fn deliver(&mut self, user: &UserId, order: &[u32], step: &mut Step) {
        let queue: Vec<u64> = match &self.net.sync {
            Some(sync) => sync.state().pending_for(user).iter().map(|e| e.entry_id).collect(),
            None => Vec::new(),
        };
        for &i in order {
            let Some(&id) = queue.get(i as usize) else {
                step.errors.push(format!("deliver: no queued entry at position {i}"));
                continue;
            };
            let mut log = Vec::new();
            let mut session = SimSession {
                net: &self.net,
                user,
                only_entry: Some(id),
                log: &mut log,
            };
            if let Err(e) = self.agents.get_mut(user).expect("validated").pull(&mut session) {
                step.errors.push(e.to_string());
            }
            self.record_exchanges(log, step);
        }
    }

    fn run_agent_event(&mut self, user: &UserId, ev: &Event, step: &mut Step) {
        match ev {
            Event::AgentOp { op, .. } => self.run_op(user, op, step),
            Event::Deliver { order, .. } => self.deliver(user, order, step),
            _ => unreachable!("only agent events are queued"),
        }
    }

    fn step(&mut self, index: u64, ev: &Event) -> Result<(), SimError> {
        let mut step = Step {
            index,
            user: ev.user().cloned(),
            exchanges: Vec::new(),
            errors: Vec::new(),
            uses: Vec::new(),
            sync_digest: String::new(),
            agent_digests: BTreeMap::new(),
        };
        match ev {
            Event::AgentOp { user, op } => {
                if op.needs_network() && !self.net.online[user] {
                    self.outbox.entry(user.clone()).or_default().push(ev.clone());
                } else {
                    self.run_op(user, op, &mut step);
                }
            }
            Event::Deliver { user, .. } => {
                if self.net.online[user] {
                    self.run_agent_event(user, ev, &mut step);
                } else {
                    self.outbox.entry(user.clone()).or_default().push(ev.clone());
                }
            }
            Event::GoOffline { user } => {
                self.net.online.insert(user.clone(), false);
            }
            Event::GoOnline { user } => {
                self.net.online.insert(user.clone(), true);
                for queued in self.outbox.remove(user).unwrap_or_default() {
                    self.run_agent_event(user, &queued, &mut step);
                }
            }
            Event::CrashSync {} => {
                if self.net.sync.take().is_none() {
                    step.errors.push("synchronizer already down".into());
                }
                self.capture_durable(index, true)?;
            }
            Event::RestartSync {} => {
                if self.net.sync.is_some() {
                    step.errors.push("synchronizer already running".into());
                } else {
                    self.start_sync()?;
                }
            }
            Event::AdvanceClock { seconds } => self.clock += seconds,
        }
        self.observe(&mut step)?;
        self.trace.steps.push(step);
        Ok(())
    }

    /// Digests current states and keeps a dump of anything that changed.
    fn observe(&mut self, step: &mut Step) -> Result<(), SimError> {
        if let Some(sync) = &self.net.sync {
            let bytes = wire::to_canonical(&sync.state())?;
            step.sync_digest = hex_digest(&bytes);
            if self.last_sync.as_deref() != Some(&bytes[..]) {
                self.trace.states.push(StateDump {
                    step: step.index,
                    owner: None,
                    bytes: Bytes(bytes.clone()),
                });
                self.last_sync = Some(bytes);
            }
        } else {
            step.sync_digest = "down".into();
        }
        if let Some(user) = &step.user {
            let bytes = wire::to_canonical(self.agents[user].state())?;
            let digest = hex_digest(&bytes);
            if self.last_agent.get(user) != Some(&digest) {
                self.trace.states.push(StateDump {
                    step: step.index,
                    owner: Some(user.clone()),
                    bytes: Bytes(bytes),
                });
                self.last_agent.insert(user.clone(), digest.clone());
            }
            step.agent_digests.insert(user.clone(), digest);
        }
        Ok(())
    }
}

fn collect_canaries(sc: &Scenario) -> Vec<Canary> {
    let mut out: Vec<Canary> = Vec::new();
    let mut push = |owner: &UserId, dossier: &DossierId, field: &FieldName, value: &FieldValue| {
        if value.as_bytes().len() >= 16 && !out.iter().any(|c| c.value.0 == value.as_bytes()) {
            out.push(Canary {
                owner: owner.clone(),
                dossier: dossier.clone(),
                field: field.clone(),
                value: Bytes(value.as_bytes().to_vec()),
            });
        }
    };
    for ev in &sc.script {
        match ev {
            Event::AgentOp {
                user,
                op: Op::Create { dossier, fields },
            } => {
                for (f, v) in fields {
                    push(user, dossier, f, v);
                }
            }
            Event::AgentOp {
                user,
                op: Op::Set { dossier, field, value },
            } => push(user, dossier, field, value),
            _ => {}
        }
    }
    out
}

/// Plays a scenario. Same scenario, same trace bytes.
pub fn run_scenario(sc: &Scenario) -> Result<Trace, SimError> {
    sc.validate()?;
    let dir = tempfile::tempdir()?;
    let mut master = ChaCha20Rng::seed_from_u64(sc.seed);
    let mut sim = Sim {
        dir,
        net: Network {
            sync: None,
            online: sc.agents.iter().map(|u| (u.clone(), true)).collect(),
        },
        agents: BTreeMap::new(),
        outbox: BTreeMap::new(),
        clock: 0,
        trace: Trace {
            seed: sc.seed,
            agents: sc.agents.clone(),
            setup: Vec::new(),
            steps: Vec::new(),
            pushes: Vec::new(),
            states: Vec::new(),
            durable: Vec::new(),
            canaries: collect_canaries(sc),
            final_agents: BTreeMap::new(),
            final_sync: Bytes::default(),
            pending_left: 0,
        },
        last_sync: None,
        last_agent: HashMap::new(),
    };
    sim.start_sync()?;
    let config = AgentConfig {
        revoke_policy: sc.config.revoke_policy,
        key_cache_ttl_seconds: sc.config.key_cache_ttl_seconds,
        sync_endpoint: None,
    };
    for (i, user) in sc.agents.iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(master.next_u64());
        let identity = Identity::generate(user.clone(), &mut rng).map_err(AgentError::from)?;
        let mut agent = Agent::open_with(
            identity,
            config.clone(),
            sim.dir.path().join(format!("agent{i}")),
            SUITE_ID,
            Durability::Process,
            Box::new(rng),
        )?;
        let mut log = Vec::new();
        agent.register(&mut SimSession {
            net: &sim.net,
            user,
            only_entry: None,
            log: &mut log,
        })?;
        for (req, resp) in log {
            sim.trace.setup.push(Exchange {
                request: Bytes(wire::canonical_encode(&req)?),
                response: Bytes(wire::canonical_encode(&resp)?),
            });
        }
        sim.agents.insert(user.clone(), agent);
    }
    for (i, ev) in sc.script.iter().enumerate() {
        sim.step(i as u64, ev)?;
    }

    let end = sc.script.len() as u64;
    for (user, agent) in &sim.agents {
        sim.trace
            .final_agents
            .insert(user.clone(), Bytes(wire::to_canonical(agent.state())?));
    }
    let state = match &sim.net.sync {
        Some(sync) => sync.state(),
        None => crate::store::load::<SyncState>(&sim.sync_dir(), SUITE_ID)?.state,
    };
    sim.trace.pending_left = state.pending_count() as u64;
    sim.trace.final_sync = Bytes(wire::to_canonical(&state)?);
    sim.capture_durable(end, false)?;
    Ok(sim.trace)
}

/// Byte patterns searched for by the scans. Each value is matched raw and
/// in the standalone base64 form the canonical encoding would give it.
pub struct Scanner {
    patterns: Vec<(String, Vec<u8>)>,
    by_prefix: HashMap<[u8; 3], Vec<usize>>,
}

impl Scanner {
    pub fn new() -> Self {
        Self {
            patterns: Vec::new(),
            by_prefix: HashMap::new(),
        }
    }

    fn add_pattern(&mut self, label: String, pattern: Vec<u8>) {
        let prefix = [pattern[0], pattern[1], pattern[2]];
        self.by_prefix.entry(prefix).or_default().push(self.patterns.len());
        self.patterns.push((label, pattern));
    }

    /// Values shorter than 16 bytes are ignored.
    pub fn add(&mut self, label: impl Into<String>, value: &[u8]) {
        use base64::Engine;
        if value.len() < 16 {
            return;
        }
        let label = label.into();
        self.add_pattern(label.clone(), value.to_vec());
        let b64 = base64::engine::general_purpose::STANDARD.encode(value);
        // drop the characters that depend on padding
        let stable = value.len() / 3 * 4;
        self.add_pattern(format!("{label} (base64)"), b64.as_bytes()[..stable].to_vec());
    }

    /// Labels of every pattern found in `haystack`, once each.
    pub fn scan(&self, haystack: &[u8]) -> BTreeSet<String> {
        let mut hits = BTreeSet::new();
        if self.patterns.is_empty() {
            return hits;
        }
        for i in 0..haystack.len().saturating_sub(2) {
            let prefix = [haystack[i], haystack[i + 1], haystack[i + 2]];
            if let Some(candidates) = self.by_prefix.get(&prefix) {
                for &c in candidates {
                    let (label, p) = &self.patterns[c];
                    if haystack[i..].starts_with(p) {
                        hits.insert(label.clone());
                    }
                }
            }
        }
        hits
    }
}

impl Default for Scanner {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfidentialityReport {
    pub scanned_bytes: u64,
    pub hits: Vec<String>,
}

impl ConfidentialityReport {
    pub fn is_clean(&self) -> bool {
        self.hits.is_empty()
    }
}

/// Looks for canaries and raw symmetric keys in everything the synchronizer
/// held, stored or exchanged, and for foreign canaries in agent stores and
/// in views a receiver was not meant to get.
pub fn check_confidentiality(t: &Trace) -> ConfidentialityReport {
    let mut report = ConfidentialityReport::default();
    let mut secrets = Scanner::new();
    for c in &t.canaries {
        secrets.add(format!("canary {}/{}", c.dossier, c.field), &c.value.0);
    }
    for user in t.final_agents.keys() {
        if let Some(state) = t.agent_state(user) {
            for (d, rec) in &state.owned {
                for (r, k) in &rec.keys {
                    secrets.add(format!("key {d}->{r}"), k.key.as_bytes());
                }
            }
        }
    }
    let scan = |what: &str, bytes: &[u8], scanner: &Scanner, report: &mut ConfidentialityReport| {
        report.scanned_bytes += bytes.len() as u64;
        for hit in scanner.scan(bytes) {
            report.hits.push(format!("{hit} in {what}"));
        }
    };

    for (i, x) in t.exchanges().enumerate() {
        scan(&format!("request #{i}"), &x.request.0, &secrets, &mut report);
        scan(&format!("response #{i}"), &x.response.0, &secrets, &mut report);
    }
    for dump in t.states.iter().filter(|d| d.owner.is_none()) {
        scan(&format!("synchronizer state at step {}", dump.step), &dump.bytes.0, &secrets, &mut report);
    }
    scan("final synchronizer state", &t.final_sync.0, &secrets, &mut report);
    for f in t.durable.iter().filter(|f| f.path.starts_with("sync/")) {
        scan(&format!("{} at step {}", f.path, f.step), &f.bytes.0, &secrets, &mut report);
    }

    // agents may hold their own plaintext only
    let mut foreign_to: BTreeMap<&UserId, Scanner> = BTreeMap::new();
    for user in &t.agents {
        let mut s = Scanner::new();
        for c in t.canaries.iter().filter(|c| c.owner != *user) {
            s.add(format!("canary {}/{}", c.dossier, c.field), &c.value.0);
        }
        foreign_to.insert(user, s);
    }
    for dump in &t.states {
        if let Some(user) = &dump.owner {
            scan(&format!("store of {user} at step {}", dump.step), &dump.bytes.0, &foreign_to[user], &mut report);
        }
    }
    for (user, bytes) in &t.final_agents {
        scan(&format!("final store of {user}"), &bytes.0, &foreign_to[user], &mut report);
    }
    for user in &t.agents {
        for f in t.durable.iter().filter(|f| f.path.starts_with(&format!("agent/{user}/"))) {
            scan(&format!("{} at step {}", f.path, f.step), &f.bytes.0, &foreign_to[user], &mut report);
        }
    }

    // a receiver's Use output carries only canaries its owner pushed to it
    let mut canaries = Scanner::new();
    for c in &t.canaries {
        canaries.add(format!("canary {}/{}", c.dossier, c.field), &c.value.0);
    }
    for step in &t.steps {
        for u in &step.uses {
            let pushed: BTreeSet<String> = t
                .pushes
                .iter()
                .filter(|p| p.receiver == u.user && p.dossier == u.dossier)
                .flat_map(|p| canaries.scan(&p.view.0))
                .collect();
            report.scanned_bytes += u.view.0.len() as u64;
            for hit in canaries.scan(&u.view.0).difference(&pushed) {
                report.hits.push(format!("{hit} in view used by {} at step {}", u.user, step.index));
            }
        }
    }
    report
}

/// Every successful Use output must equal a view the owner pushed to that
/// receiver at that version. Returns the mismatches.
pub fn check_redaction(t: &Trace) -> Vec<String> {
    let mut expected: BTreeMap<(&UserId, &UserId, &DossierId, Version), BTreeSet<&[u8]>> = BTreeMap::new();
    for p in &t.pushes {
        expected
            .entry((&p.owner, &p.receiver, &p.dossier, p.version))
            .or_default()
            .insert(&p.view.0);
    }
    let mut bad = Vec::new();
    for (key, views) in &expected {
        if views.len() > 1 {
            bad.push(format!("{} pushed two different views of {} {} to {}", key.0, key.2, key.3, key.1));
        }
    }
    for step in &t.steps {
        for u in &step.uses {
            match expected.get(&(&u.owner, &u.user, &u.dossier, u.version)) {
                Some(views) if views.contains(&u.view.0[..]) => {}
                Some(_) => bad.push(format!("step {}: {} saw a wrong view of {} {}", step.index, u.user, u.dossier, u.version)),
                None => bad.push(format!("step {}: {} used {} {} that was never pushed to it", step.index, u.user, u.dossier, u.version)),
            }
        }
    }
    bad
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConvergenceReport {
    pub checked: usize,
    pub violations: Vec<String>,
    /// Grants that were revoked by the end; excluded from the check.
    pub revoked_ok: Vec<(DossierId, UserId)>,
}

impl ConvergenceReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Decrypts a receiver's copy of an owner's dossier with the owner's key.
pub fn receiver_view(t: &Trace, owner: &UserId, dossier: &DossierId, receiver: &UserId) -> Option<RedactedView> {
    let o = t.agent_state(owner)?;
    let r = t.agent_state(receiver)?;
    let key = &o.owned.get(dossier)?.keys.get(receiver)?.key;
    let rec = r.foreign.get(dossier)?;
    let pt = crypto::open(
        &SealedBox {
            nonce: rec.nonce.clone(),
            ciphertext: rec.ciphertext.clone(),
        },
        key,
    )
    .ok()?;
    wire::from_canonical(&pt).ok()
}

/// For every active grant, the receiver's decrypted copy must equal the
/// owner's view at the highest version pushed to it.
pub fn check_convergence(t: &Trace) -> Result<ConvergenceReport, SimError> {
    if t.pending_left > 0 {
        return Err(SimError::QueuesNotDrained(t.pending_left));
    }
    let mut report = ConvergenceReport::default();
    for owner in &t.agents {
        let Some(state) = t.agent_state(owner) else { continue };
        for (d, rec) in &state.owned {
            for (r, k) in &rec.keys {
                if !k.active {
                    report.revoked_ok.push((d.clone(), r.clone()));
                    continue;
                }
                report.checked += 1;
                let latest = t
                    .pushes
                    .iter()
                    .filter(|p| p.owner == *owner && p.dossier == *d && p.receiver == *r)
                    .max_by_key(|p| p.version);
                let Some(latest) = latest else {
                    report.violations.push(format!("{d} was never pushed to {r}"));
                    continue;
                };
                match receiver_view(t, owner, d, r) {
                    Some(view) if wire::to_canonical(&view)? == latest.view.0 => {}
                    Some(view) => report.violations.push(format!(
                        "{r} holds {d} {} but {} was pushed",
                        view.version, latest.version
                    )),
                    None => report.violations.push(format!("{r} holds no readable copy of {d}")),
                }
            }
        }
    }
    Ok(report)
}

/// Canonical map of every decryptable receiver copy plus every owned
/// dossier; equal digests mean equal final views.
pub fn final_views(t: &Trace) -> Vec<u8> {
    let mut views: BTreeMap<String, Bytes> = BTreeMap::new();
    for owner in &t.agents {
        let Some(state) = t.agent_state(owner) else { continue };
        for (d, rec) in &state.owned {
            views.insert(
                format!("{owner}/{d}"),
                Bytes(wire::to_canonical(&rec.dossier).expect("dossier is serialisable")),
            );
            for r in rec.keys.keys() {
                if let Some(v) = receiver_view(t, owner, d, r) {
                    views.insert(
                        format!("{r}/{d}"),
                        Bytes(wire::to_canonical(&v).expect("view is serialisable")),
                    );
                }
            }
        }
    }
    wire::to_canonical(&views).expect("map is serialisable")
}

/// Size limits for [`random_scenario`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenParams {
    pub max_agents: usize,
    pub max_dossiers: usize,
    pub max_events: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            max_agents: 6,
            max_dossiers: 10,
            max_events: 300,
        }
    }
}

/// A seeded random scenario with 32-byte canary values. It ends by bringing
/// everything online and draining every queue.
pub fn random_scenario(seed: u64, params: GenParams) -> Scenario {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_5ce7_a210);
    let mut pick = |n: usize| (rng.next_u32() as usize) % n.max(1);
    let n_agents = 2 + pick(params.max_agents.saturating_sub(1).max(1));
    let n_agents = n_agents.min(params.max_agents.max(2));
    let agents: Vec<UserId> = (0..n_agents).map(|i| UserId::new(format!("u{i}")).unwrap()).collect();
    let field_names: Vec<FieldName> = (0..4).map(|i| FieldName::new(format!("f{i}")).unwrap()).collect();

    let mut canary_rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut canary = move || {
        let mut v = [0u8; 32];
        canary_rng.fill_bytes(&mut v);
        FieldValue::new(v.to_vec()).unwrap()
    };

    let mut sc = Scenario::new(seed, agents.clone());
    sc.config = SimConfig {
        revoke_policy: if pick(2) == 0 { RevokePolicy::Retain } else { RevokePolicy::Purge },
        key_cache_ttl_seconds: [0, 0, 30][pick(3)],
    };
    let budget = params.max_events.saturating_sub(2 + 3 * n_agents).max(1);
    let n_events = 1 + pick(budget);
    let mut dossiers: Vec<(UserId, DossierId)> = Vec::new();
    let mut granted: BTreeSet<(UserId, DossierId)> = BTreeSet::new();
    let mut crashed = false;

    for _ in 0..n_events {
        let user = agents[pick(agents.len())].clone();
        let owned: Vec<&DossierId> = dossiers.iter().filter(|(o, _)| *o == user).map(|(_, d)| d).collect();
        let readable: Vec<&DossierId> = granted.iter().filter(|(r, _)| *r == user).map(|(_, d)| d).collect();
        let any = if !readable.is_empty() && pick(4) != 0 {
            Some(readable[pick(readable.len())].clone())
        } else {
            dossiers.get(pick(dossiers.len())).map(|(_, d)| d.clone())
        };
        let mine = owned.get(pick(owned.len())).map(|d| (*d).clone());
        let field = field_names[pick(field_names.len())].clone();
        let other = agents[pick(agents.len())].clone();
        let ev = match pick(20) {
            0 | 1 if dossiers.len() < params.max_dossiers => {
                let d = DossierId::new(format!("{user}-d{}", dossiers.len())).unwrap();
                let n = 1 + pick(field_names.len());
                let fields: Fields = field_names[..n].iter().map(|f| (f.clone(), canary())).collect();
                dossiers.push((user.clone(), d.clone()));
                Event::AgentOp {
                    user,
                    op: Op::Create { dossier: d, fields },
                }
            }
            2..=4 => match mine {
                Some(d) => Event::AgentOp {
                    user,
                    op: Op::Set {
                        dossier: d,
                        field,
                        value: canary(),
                    },
                },
                None => continue,
            },
            5 => match mine {
                Some(d) => Event::AgentOp {
                    user,
                    op: Op::DelField { dossier: d, field },
                },
                None => continue,
            },
            6 | 7 => match mine {
                Some(d) if other != user => {
                    let mut fields: BTreeSet<FieldName> = BTreeSet::new();
                    for f in &field_names {
                        if pick(2) == 0 {
                            fields.insert(f.clone());
                        }
                    }
                    fields.insert(field);
                    granted.insert((other.clone(), d.clone()));
                    Event::AgentOp {
                        user,
                        op: Op::Grant {
                            dossier: d,
                            receiver: other,
                            fields,
                        },
                    }
                }
                _ => continue,
            },
            8 => match mine {
                Some(d) if other != user => {
                    granted.remove(&(other.clone(), d.clone()));
                    Event::AgentOp {
                        user,
                        op: Op::Revoke { dossier: d, receiver: other },
                    }
                }
                _ => continue,
            },
            9 | 10 => match mine {
                Some(d) => Event::AgentOp {
                    user,
                    op: Op::Push { dossier: d },
                },
                None => Event::AgentOp { user, op: Op::PushAll {} },
            },
            11 | 12 => Event::AgentOp { user, op: Op::Pull {} },
            13 | 14 => match any {
                Some(d) => Event::AgentOp {
                    user,
                    op: Op::Use { dossier: d },
                },
                None => continue,
            },
            15 => Event::GoOffline { user },
            16 => Event::GoOnline { user },
            17 => {
                crashed = !crashed;
                if crashed {
                    Event::CrashSync {}
                } else {
                    Event::RestartSync {}
                }
            }
            18 => Event::AdvanceClock {
                seconds: 1 + pick(40) as u64,
            },
            _ => Event::Deliver {
                user,
                order: (0..pick(3) as u32).collect(),
            },
        };
        sc.script.push(ev);
    }

    if crashed {
        sc.script.push(Event::RestartSync {});
    }
    for u in &agents {
        sc.script.push(Event::GoOnline { user: u.clone() });
    }
    for u in &agents {
        sc.script.push(Event::AgentOp {
            user: u.clone(),
            op: Op::PushAll {},
        });
    }
    for u in &agents {
        sc.script.push(Event::AgentOp {
            user: u.clone(),
            op: Op::Pull {},
        });
    }
    for (r, d) in granted {
        if sc.script.len() >= params.max_events {
            break;
        }
        sc.op(&r, Op::Use { dossier: d });
    }
    sc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uid(s: &str) -> UserId {
        UserId::new(s).unwrap()
    }

    fn did(s: &str) -> DossierId {
        DossierId::new(s).unwrap()
    }

    fn fname(s: &str) -> FieldName {
        FieldName::new(s).unwrap()
    }

    fn value(tag: u8) -> FieldValue {
        FieldValue::new(vec![tag; 32]).unwrap()
    }

    fn fields(pairs: &[(&str, u8)]) -> Fields {
        pairs.iter().map(|(k, t)| (fname(k), value(*t))).collect()
    }

    /// u1 owns d1 and shares it with u2 and u3, then everyone pulls.
    fn replication_scenario() -> Scenario {
        let (u1, u2, u3) = (uid("u1"), uid("u2"), uid("u3"));
        let mut sc = Scenario::new(7, vec![u1.clone(), u2.clone(), u3.clone()]);
        sc.op(&u1, Op::Create { dossier: did("d1"), fields: fields(&[("a", 1), ("b", 2)]) })
            .op(&u1, Op::Grant { dossier: did("d1"), receiver: u2.clone(), fields: [fname("a")].into() })
            .op(&u1, Op::Grant { dossier: did("d1"), receiver: u3.clone(), fields: [fname("a"), fname("b")].into() })
            .op(&u1, Op::Push { dossier: did("d1") })
            .op(&u2, Op::Pull {})
            .op(&u3, Op::Pull {})
            .op(&u2, Op::Use { dossier: did("d1") })
            .op(&u3, Op::Use { dossier: did("d1") });
        sc
    }

    #[test]
    fn shared_dossier_is_replicated_on_each_receiver() {
        let t = run_scenario(&replication_scenario()).unwrap();
        for r in ["u2", "u3"] {
            assert!(t.agent_state(&uid(r)).unwrap().foreign.contains_key(&did("d1")));
        }
        let uses: Vec<_> = t.steps.iter().flat_map(|s| &s.uses).collect();
        assert_eq!(uses.len(), 2);
        let v2: RedactedView = wire::from_canonical(&uses[0].view.0).unwrap();
        assert_eq!(v2.fields.keys().collect::<Vec<_>>(), vec![&fname("a")]);
        assert!(t.steps.iter().all(|s| s.errors.is_empty()), "{:?}", t.steps);
        let conv = check_convergence(&t).unwrap();
        assert_eq!(conv.checked, 2);
        assert!(conv.is_clean(), "{conv:?}");
        assert!(check_confidentiality(&t).is_clean());
        assert!(check_redaction(&t).is_empty());
    }

    #[test]
    fn empty_script_gives_empty_trace() {
        let t = run_scenario(&Scenario::new(1, vec![uid("a")])).unwrap();
        assert!(t.steps.is_empty());
        assert!(t.pushes.is_empty());
    }

    #[test]
    fn same_seed_same_trace_bytes() {
        let sc = random_scenario(11, GenParams { max_events: 80, ..GenParams::default() });
        assert_eq!(run_scenario(&sc).unwrap().encode(), run_scenario(&sc).unwrap().encode());
        let sc = replication_scenario();
        assert_eq!(run_scenario(&sc).unwrap().encode(), run_scenario(&sc).unwrap().encode());
    }

    #[test]
    fn undeclared_agent_is_rejected() {
        let mut sc = Scenario::new(1, vec![uid("a")]);
        sc.op(&uid("b"), Op::Pull {});
        assert!(matches!(run_scenario(&sc), Err(SimError::InvalidScenario(_))));
        let mut sc = Scenario::new(1, vec![uid("a")]);
        sc.op(&uid("a"), Op::Revoke { dossier: did("d"), receiver: uid("z") });
        assert!(matches!(run_scenario(&sc), Err(SimError::InvalidScenario(_))));
        assert!(matches!(run_scenario(&Scenario::new(1, vec![uid("a"), uid("a")])), Err(SimError::InvalidScenario(_))));
    }

    #[test]
    fn scenario_file_round_trip() {
        let sc = random_scenario(3, GenParams::default());
        assert_eq!(Scenario::decode(&sc.encode().unwrap()).unwrap(), sc);
    }

    #[test]
    fn undrained_queue_is_reported() {
        let mut sc = replication_scenario();
        sc.script.truncate(4);
        let t = run_scenario(&sc).unwrap();
        assert!(matches!(check_convergence(&t), Err(SimError::QueuesNotDrained(2))));
    }

    #[test]
    fn revoked_receiver_is_classified() {
        let mut sc = replication_scenario();
        sc.op(&uid("u1"), Op::Revoke { dossier: did("d1"), receiver: uid("u2") });
        let t = run_scenario(&sc).unwrap();
        let conv = check_convergence(&t).unwrap();
        assert_eq!(conv.revoked_ok, vec![(did("d1"), uid("u2"))]);
        assert_eq!(conv.checked, 1);
    }

    #[test]
    fn withheld_entries_stay_queued() {
        let mut sc = replication_scenario();
        sc.script.truncate(4);
        sc.event(Event::Deliver { user: uid("u2"), order: vec![] });
        let t = run_scenario(&sc).unwrap();
        assert_eq!(t.pending_left, 2);
    }

    #[test]
    fn offline_ops_are_queued_until_reconnect() {
        let (u1, u2) = (uid("u1"), uid("u2"));
        let mut sc = Scenario::new(5, vec![u1.clone(), u2.clone()]);
        sc.op(&u1, Op::Create { dossier: did("d"), fields: fields(&[("a", 1)]) })
            .event(Event::GoOffline { user: u1.clone() })
            .op(&u1, Op::Grant { dossier: did("d"), receiver: u2.clone(), fields: [fname("a")].into() });
        let t = run_scenario(&sc).unwrap();
        assert!(t.steps[2].exchanges.is_empty());
        sc.event(Event::GoOnline { user: u1.clone() });
        let t = run_scenario(&sc).unwrap();
        assert_eq!(t.steps[3].exchanges.len(), 3, "lookup, grant, send");
    }

    #[test]
    fn scanner_finds_raw_and_base64_forms() {
        use base64::Engine;
        let v = [7u8; 32];
        let mut s = Scanner::new();
        s.add("c", &v);
        let mut hay = b"xx".to_vec();
        hay.extend_from_slice(&v);
        assert_eq!(s.scan(&hay).len(), 1);
        let b64 = base64::engine::general_purpose::STANDARD.encode(v);
        assert_eq!(s.scan(format!("{{\"v\":\"{b64}\"}}").as_bytes()).len(), 1);
        assert!(s.scan(&v[..31]).is_empty());
        s.add("short", b"tiny");
        assert_eq!(s.patterns.len(), 2);
    }

    #[test]
    fn planted_leak_is_caught() {
        let mut t = run_scenario(&replication_scenario()).unwrap();
        assert!(check_confidentiality(&t).is_clean());
        let mut leaked = t.final_sync.0.clone();
        leaked.extend_from_slice(&[2u8; 32]);
        t.final_sync = Bytes(leaked);
        assert_eq!(check_confidentiality(&t).hits.len(), 1);
    }

    #[test]
    fn random_scenarios_stay_clean() {
        for seed in 0..6 {
            let sc = random_scenario(seed, GenParams { max_events: 120, ..GenParams::default() });
            let t = run_scenario(&sc).unwrap();
            let conf = check_confidentiality(&t);
            assert!(conf.is_clean(), "seed {seed}: {:?}", conf.hits);
            assert!(check_redaction(&t).is_empty(), "seed {seed}");
            let conv = check_convergence(&t).unwrap();
            assert!(conv.is_clean(), "seed {seed}: {:?}", conv.violations);
        }
    }
}
