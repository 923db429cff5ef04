//! The trusted client agent.
//!
//! An agent keeps the dossiers its user owns in plaintext and every foreign
//! dossier only as the sealed bytes it received. It drives the five protocol
//! sequences against a [`Session`]:
//!
//! | sequence | method |
//! |----------|--------|
//! | Grant    | [`Agent::grant`] |
//! | Send     | [`Agent::push`] |
//! | Receive  | [`Agent::pull`] |
//! | Use      | [`Agent::use_dossier`] |
//! | Revoke   | [`Agent::revoke`] |
//!
//! Each local mutation is expressed as an [`AgentCommand`] and, when the
//! agent is backed by a state directory, appended to its log before it is
//! applied.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::time::Duration;

use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, CryptoError, Identity, PublicKeyBundle, SealedBox, Signature, SymKey};
use crate::model::{self, Acl, Dossier, DossierId, FieldName, FieldValue, Fields, ModelError, RedactedView, UserId, Version};
use crate::store::{Durability, Replay, StateKind, Store, StoreError};
use crate::wire::{self, Bytes, ErrorCode, Message, WireError};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("dossier {0} already exists")]
    DuplicateDossier(DossierId),
    #[error("unknown dossier {0}")]
    UnknownDossier(DossierId),
    #[error("NotOwner: dossier {0} belongs to another user")]
    NotOwner(DossierId),
    #[error("unknown receiver {0}")]
    UnknownReceiver(UserId),
    #[error("synchronizer unreachable: {0}")]
    SyncUnreachable(String),
    #[error("synchronizer refused request: {code}: {detail}")]
    Sync { code: ErrorCode, detail: String },
    #[error("unexpected response `{0}`")]
    UnexpectedResponse(&'static str),
    #[error("AccessRevoked: no key for dossier {0}")]
    AccessRevoked(DossierId),
    #[error("corrupt record for dossier {0}: {1}")]
    CorruptRecord(DossierId, String),
    #[error("store belongs to {stored}, not {identity}")]
    WrongStore { stored: UserId, identity: UserId },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl AgentError {
    fn from_response(m: Message) -> AgentError {
        match m {
            Message::Err { code, detail } => AgentError::Sync { code, detail },
            other => AgentError::UnexpectedResponse(other.type_name()),
        }
    }
}

/// Request/response channel to a synchronizer.
pub trait Session {
    /// Sends one request and waits for its response. Transport failures map
    /// to [`AgentError::SyncUnreachable`].
    fn call(&mut self, request: &Message) -> Result<Message, AgentError>;
}

/// A session that never reaches anything. Used when working offline.
pub struct Offline;

impl Session for Offline {
    fn call(&mut self, _: &Message) -> Result<Message, AgentError> {
        Err(AgentError::SyncUnreachable("offline".into()))
    }
}

/// The wire protocol over TCP.
pub struct TcpSession {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpSession {
    pub fn connect(addr: &str, suite: &str) -> Result<Self, AgentError> {
        let unreachable = |e: &dyn std::fmt::Display| AgentError::SyncUnreachable(format!("{addr}: {e}"));
        let sock = addr
            .to_socket_addrs()
            .map_err(|e| unreachable(&e))?
            .next()
            .ok_or_else(|| unreachable(&"no address"))?;
        let stream = TcpStream::connect_timeout(&sock, Duration::from_secs(5)).map_err(|e| unreachable(&e))?;
        stream.set_nodelay(true).ok();
        let mut session = TcpSession {
            reader: BufReader::new(stream.try_clone().map_err(|e| unreachable(&e))?),
            writer: BufWriter::new(stream),
        };
        session.handshake(suite).map_err(|e| unreachable(&e))?;
        Ok(session)
    }

    fn handshake(&mut self, suite: &str) -> Result<(), WireError> {
        use std::io::{BufRead, Read, Write};
        struct Both<'a>(&'a mut BufReader<TcpStream>, &'a mut BufWriter<TcpStream>);
        impl Read for Both<'_> {
            fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
                self.0.read(buf)
            }
        }
        impl BufRead for Both<'_> {
            fn fill_buf(&mut self) -> std::io::Result<&[u8]> {
                self.0.fill_buf()
            }
            fn consume(&mut self, amt: usize) {
                self.0.consume(amt)
            }
        }
        impl Write for Both<'_> {
            fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
                self.1.write(buf)
            }
            fn flush(&mut self) -> std::io::Result<()> {
                self.1.flush()
            }
        }
        wire::client_handshake(&mut Both(&mut self.reader, &mut self.writer), suite)
    }
}

impl Session for TcpSession {
    fn call(&mut self, request: &Message) -> Result<Message, AgentError> {
        let io = |e: WireError| match e {
            WireError::Io(_) | WireError::TruncatedFrame => AgentError::SyncUnreachable(e.to_string()),
            other => AgentError::Wire(other),
        };
        wire::write_message(&mut self.writer, request).map_err(io)?;
        let payload = wire::deframe(&mut self.reader).map_err(io)?;
        Ok(wire::decode(&payload)?)
    }
}

/// What to do with a foreign record whose key has been withdrawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevokePolicy {
    /// Delete the local ciphertext.
    Purge,
    /// Keep the ciphertext, since access may be restored later.
    #[default]
    Retain,
}

impl std::str::FromStr for RevokePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "purge" => Ok(RevokePolicy::Purge),
            "retain" => Ok(RevokePolicy::Retain),
            other => Err(format!("unknown revoke policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AgentConfig {
    pub revoke_policy: RevokePolicy,
    /// Lifetime of unwrapped keys in memory; 0 disables the cache.
    pub key_cache_ttl_seconds: u64,
    pub sync_endpoint: Option<String>,
}

/// The owner's key for one receiver of one dossier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiverKey {
    pub key: SymKey,
    pub fields: BTreeSet<FieldName>,
    /// Inactive keys belong to revoked receivers and are kept for re-grants.
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnedRecord {
    pub dossier: Dossier,
    pub keys: BTreeMap<UserId, ReceiverKey>,
}

/// Sealed copy of someone else's dossier, as last received.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignRecord {
    pub dossier: DossierId,
    pub owner: UserId,
    pub version: Version,
    pub nonce: Bytes,
    pub ciphertext: Bytes,
}

/// Everything an agent persists. Private identity keys are kept apart, in
/// the identity file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentState {
    pub user: Option<UserId>,
    pub owned: BTreeMap<DossierId, OwnedRecord>,
    pub acl: Acl,
    pub foreign: BTreeMap<DossierId, ForeignRecord>,
    pub last_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AgentCommand {
    Init {
        user: UserId,
    },
    Create {
        dossier: DossierId,
        fields: Fields,
    },
    SetField {
        dossier: DossierId,
        field: FieldName,
        value: FieldValue,
    },
    DeleteField {
        dossier: DossierId,
        field: FieldName,
    },
    Grant {
        dossier: DossierId,
        receiver: UserId,
        fields: BTreeSet<FieldName>,
        key: SymKey,
        bump_version: bool,
    },
    Revoke {
        dossier: DossierId,
        receiver: UserId,
    },
    StoreForeign {
        record: ForeignRecord,
    },
    PurgeForeign {
        dossier: DossierId,
    },
    Seq {
        value: u64,
    },
}

impl Replay for AgentState {
    type Command = AgentCommand;
    const KIND: StateKind = StateKind::Agent;

    fn replay(&mut self, cmd: &AgentCommand) {
        match cmd {
            AgentCommand::Init { user } => self.user = Some(user.clone()),
            AgentCommand::Create { dossier, fields } => {
                let owner = self.user.clone().expect("store initialised before use");
                self.owned.insert(
                    dossier.clone(),
                    OwnedRecord {
                        dossier: Dossier::new(dossier.clone(), owner, fields.clone()),
                        keys: BTreeMap::new(),
                    },
                );
            }
            AgentCommand::SetField {
                dossier,
                field,
                value,
            } => {
                if let Some(rec) = self.owned.get_mut(dossier) {
                    rec.dossier.fields.insert(field.clone(), value.clone());
                    rec.dossier.version = rec.dossier.version.next();
                }
            }
            AgentCommand::DeleteField { dossier, field } => {
                if let Some(rec) = self.owned.get_mut(dossier) {
                    rec.dossier.fields.remove(field);
                    rec.dossier.version = rec.dossier.version.next();
                }
            }
            AgentCommand::Grant {
                dossier,
                receiver,
                fields,
                key,
                bump_version,
            } => {
                if let Some(rec) = self.owned.get_mut(dossier) {
                    if *bump_version {
                        rec.dossier.version = rec.dossier.version.next();
                    }
                    rec.keys.insert(
                        receiver.clone(),
                        ReceiverKey {
                            key: key.clone(),
                            fields: fields.clone(),
                            active: true,
                        },
                    );
                    let owner = rec.dossier.owner.clone();
                    // validated before the command was issued
                    let _ = self.acl.grant(dossier, &owner, receiver, fields.clone());
                }
            }
            AgentCommand::Revoke { dossier, receiver } => {
                self.acl.revoke(dossier, receiver);
                if let Some(k) = self
                    .owned
                    .get_mut(dossier)
                    .and_then(|r| r.keys.get_mut(receiver))
                {
                    k.active = false;
                }
            }
            AgentCommand::StoreForeign { record } => {
                self.foreign.insert(record.dossier.clone(), record.clone());
            }
            AgentCommand::PurgeForeign { dossier } => {
                self.foreign.remove(dossier);
            }
            AgentCommand::Seq { value } => self.last_seq = self.last_seq.max(*value),
        }
    }
}

/// Result of a [`Agent::use_dossier`] call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DossierView {
    Owned(Dossier),
    Foreign(RedactedView),
}

impl DossierView {
    pub fn fields(&self) -> &Fields {
        match self {
            DossierView::Owned(d) => &d.fields,
            DossierView::Foreign(v) => &v.fields,
        }
    }

    pub fn version(&self) -> Version {
        match self {
            DossierView::Owned(d) => d.version,
            DossierView::Foreign(v) => v.version,
        }
    }

    /// `name=value` lines sorted by name.
    pub fn render(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, value) in self.fields() {
            out.extend_from_slice(name.as_str().as_bytes());
            out.push(b'=');
            out.extend_from_slice(value.as_bytes());
            out.push(b'\n');
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PushReport {
    pub version: Version,
    pub sent: Vec<UserId>,
    pub failed: Vec<(UserId, String)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PullReport {
    pub applied: Vec<(DossierId, Version)>,
    pub stale: usize,
    pub quarantined: Vec<u64>,
}

/// The file holding a user's private keys.
#[derive(Serialize, Deserialize)]
pub struct IdentityFile {
    pub user: UserId,
    #[serde(with = "crate::wire::b64_array")]
    pub enc_private: [u8; 32],
    #[serde(with = "crate::wire::b64_array")]
    pub sig_private: [u8; 32],
}

impl IdentityFile {
    pub fn from_identity(id: &Identity) -> Self {
        let (enc_private, sig_private) = id.secret_bytes();
        Self {
            user: id.user().clone(),
            enc_private,
            sig_private,
        }
    }

    pub fn into_identity(self) -> Identity {
        let user = self.user.clone();
        Identity::from_secrets(user, self.enc_private, self.sig_private)
    }

    /// Frame-wrapped canonical encoding.
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        wire::frame(&wire::to_canonical(self)?)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = bytes;
        let payload = wire::deframe(&mut r)?;
        if !r.is_empty() {
            return Err(WireError::Malformed("trailing bytes after identity".into()));
        }
        wire::from_canonical(&payload)
    }
}

impl Drop for IdentityFile {
    fn drop(&mut self) {
        use zeroize::Zeroize;
        self.enc_private.zeroize();
        self.sig_private.zeroize();
    }
}

pub struct Agent {
    identity: Identity,
    state: AgentState,
    config: AgentConfig,
    journal: Option<Store<AgentState>>,
    rng: Box<dyn CryptoRngCore + Send>,
    key_cache: HashMap<DossierId, (SymKey, u64)>,
    bundles: HashMap<UserId, PublicKeyBundle>,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("user", self.identity.user())
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Agent {
    /// An agent whose state lives only in memory.
    pub fn in_memory(identity: Identity, config: AgentConfig, rng: Box<dyn CryptoRngCore + Send>) -> Self {
        let state = AgentState {
            user: Some(identity.user().clone()),
            ..AgentState::default()
        };
        Self {
            identity,
            state,
            config,
            journal: None,
            rng,
            key_cache: HashMap::new(),
            bundles: HashMap::new(),
        }
    }

    /// Opens (or initialises) the state directory for `identity`.
    pub fn open(
        identity: Identity,
        config: AgentConfig,
        dir: impl Into<PathBuf>,
        suite: &str,
        rng: Box<dyn CryptoRngCore + Send>,
    ) -> Result<Self, AgentError> {
        Self::open_with(identity, config, dir, suite, Durability::Fsync, rng)
    }

    pub fn open_with(
        identity: Identity,
        config: AgentConfig,
        dir: impl Into<PathBuf>,
        suite: &str,
        durability: Durability,
        rng: Box<dyn CryptoRngCore + Send>,
    ) -> Result<Self, AgentError> {
        let (store, state) = Store::<AgentState>::open_with(dir, suite, durability)?;
        let mut agent = Self {
            identity,
            state,
            config,
            journal: Some(store),
            rng,
            key_cache: HashMap::new(),
            bundles: HashMap::new(),
        };
        match &agent.state.user {
            Some(u) if u != agent.identity.user() => {
                return Err(AgentError::WrongStore {
                    stored: u.clone(),
                    identity: agent.identity.user().clone(),
                })
            }
            Some(_) => {}
            None => {
                let user = agent.identity.user().clone();
                agent.commit(AgentCommand::Init { user })?;
            }
        }
        Ok(agent)
    }

    /// Compacts the state directory, if there is one.
    pub fn save(&mut self) -> Result<(), AgentError> {
        if let Some(store) = &mut self.journal {
            store.save(&self.state)?;
        }
        Ok(())
    }

    pub fn user(&self) -> &UserId {
        self.identity.user()
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    fn commit(&mut self, cmd: AgentCommand) -> Result<(), AgentError> {
        if let Some(store) = &mut self.journal {
            store.append(&cmd)?;
        }
        self.state.replay(&cmd);
        Ok(())
    }

    fn owned(&self, id: &DossierId) -> Result<&OwnedRecord, AgentError> {
        match self.state.owned.get(id) {
            Some(rec) => Ok(rec),
            None if self.state.foreign.contains_key(id) => Err(AgentError::NotOwner(id.clone())),
            None => Err(AgentError::UnknownDossier(id.clone())),
        }
    }

    fn sign(&self, mut m: Message) -> Result<Message, AgentError> {
        let sig = self.identity.sign(&wire::signing_bytes(&m)?);
        if let Some(slot) = m.signature_mut() {
            *slot = sig;
        }
        Ok(m)
    }

    fn next_seq(&mut self) -> Result<u64, AgentError> {
        let value = self.state.last_seq + 1;
        self.commit(AgentCommand::Seq { value })?;
        Ok(value)
    }

    fn expect_empty(resp: Message) -> Result<(), AgentError> {
        match resp {
            Message::OkEmpty {} => Ok(()),
            other => Err(AgentError::from_response(other)),
        }
    }

    /// Publishes this agent's public keys.
    pub fn register<S: Session + ?Sized>(&mut self, session: &mut S) -> Result<(), AgentError> {
        let p = self.identity.public();
        let resp = session.call(&Message::Register {
            user: p.user,
            enc_public: Bytes(p.enc_public.to_vec()),
            sig_public: Bytes(p.sig_public.to_vec()),
        })?;
        Self::expect_empty(resp)
    }

    fn lookup<S: Session + ?Sized>(&mut self, session: &mut S, user: &UserId) -> Result<PublicKeyBundle, AgentError> {
        if let Some(b) = self.bundles.get(user) {
            return Ok(b.clone());
        }
        match session.call(&Message::Lookup { user: user.clone() })? {
            Message::OkBundle {
                user: u,
                enc_public,
                sig_public,
            } if u == *user => {
                let bundle = PublicKeyBundle {
                    user: u,
                    enc_public: enc_public
                        .0
                        .as_slice()
                        .try_into()
                        .map_err(|_| CryptoError::MalformedPublicKey)?,
                    sig_public: sig_public
                        .0
                        .as_slice()
                        .try_into()
                        .map_err(|_| CryptoError::MalformedPublicKey)?,
                };
                self.bundles.insert(user.clone(), bundle.clone());
                Ok(bundle)
            }
            Message::Err {
                code: ErrorCode::UnknownUser,
                ..
            } => Err(AgentError::UnknownReceiver(user.clone())),
            other => Err(AgentError::from_response(other)),
        }
    }

    pub fn create_dossier(&mut self, id: DossierId, fields: Fields) -> Result<(), AgentError> {
        if self.state.owned.contains_key(&id) || self.state.foreign.contains_key(&id) {
            return Err(AgentError::DuplicateDossier(id));
        }
        self.commit(AgentCommand::Create { dossier: id, fields })
    }

    /// Sets (`Some`) or deletes (`None`) one field and bumps the version.
    pub fn edit_field(&mut self, id: &DossierId, name: FieldName, value: Option<FieldValue>) -> Result<Version, AgentError> {
        let rec = self.owned(id)?;
        let cmd = match value {
            Some(value) => AgentCommand::SetField {
                dossier: id.clone(),
                field: name,
                value,
            },
            None => {
                if !rec.dossier.fields.contains_key(&name) {
                    return Err(ModelError::UnknownField(name).into());
                }
                AgentCommand::DeleteField {
                    dossier: id.clone(),
                    field: name,
                }
            }
        };
        self.commit(cmd)?;
        Ok(self.state.owned[id].dossier.version)
    }

    /// Grant sequence: key generation (or reuse), wrapping, signing, upload,
    /// then an initial push of the receiver's view.
    pub fn grant<S: Session + ?Sized>(
        &mut self,
        session: &mut S,
        id: &DossierId,
        receiver: &UserId,
        fields: BTreeSet<FieldName>,
    ) -> Result<PushReport, AgentError> {
        let rec = self.owned(id)?;
        let mut probe = Acl::new();
        probe.grant(id, &rec.dossier.owner, receiver, fields.clone())?;
        if let Some(missing) = fields.iter().find(|f| !rec.dossier.fields.contains_key(*f)) {
            return Err(ModelError::UnknownField(missing.clone()).into());
        }
        let previous = rec.keys.get(receiver).cloned();
        let bundle = self.lookup(session, receiver)?;

        // Re-grants keep the old key so retained ciphertext stays readable.
        let key = match &previous {
            Some(k) => k.key.clone(),
            None => crypto::gen_sym_key(&mut *self.rng)?,
        };
        // The receiver may already hold the current version with another
        // field set; a new version makes the narrowed view win.
        let bump_version = previous.as_ref().is_some_and(|k| k.fields != fields);

        let wrapped = crypto::wrap_key(&key, &bundle, &mut *self.rng)?;
        let msg = self.sign(Message::Grant {
            dossier: id.clone(),
            owner: self.user().clone(),
            receiver: receiver.clone(),
            wrapped: Bytes(wrapped),
            signature: Signature(Bytes::default()),
        })?;
        Self::expect_empty(session.call(&msg)?)?;
        self.commit(AgentCommand::Grant {
            dossier: id.clone(),
            receiver: receiver.clone(),
            fields,
            key,
            bump_version,
        })?;
        self.push_to(session, id, Some(receiver))
    }

    /// Send sequence: one redacted, sealed, signed pending dossier per receiver.
    pub fn push<S: Session + ?Sized>(&mut self, session: &mut S, id: &DossierId) -> Result<PushReport, AgentError> {
        self.push_to(session, id, None)
    }

    pub fn push_all<S: Session + ?Sized>(&mut self, session: &mut S) -> Result<Vec<(DossierId, PushReport)>, AgentError> {
        let ids: Vec<DossierId> = self.state.owned.keys().cloned().collect();
        let mut out = Vec::new();
        for id in ids {
            let report = self.push(session, &id)?;
            out.push((id, report));
        }
        Ok(out)
    }

    fn push_to<S: Session + ?Sized>(
        &mut self,
        session: &mut S,
        id: &DossierId,
        only: Option<&UserId>,
    ) -> Result<PushReport, AgentError> {
        let rec = self.owned(id)?.clone();
        let targets: Vec<(UserId, BTreeSet<FieldName>)> = self
            .state
            .acl
            .receivers(id)
            .filter(|(r, _)| only.is_none_or(|o| o == *r))
            .map(|(r, f)| (r.clone(), f.clone()))
            .collect();
        let mut report = PushReport {
            version: rec.dossier.version,
            ..PushReport::default()
        };
        let mut unreachable = 0;
        for (receiver, granted) in targets {
            let allowed: BTreeSet<FieldName> = granted
                .intersection(&rec.dossier.field_names())
                .cloned()
                .collect();
            let result = (|| {
                let key = &rec
                    .keys
                    .get(&receiver)
                    .filter(|k| k.active)
                    .ok_or_else(|| AgentError::UnknownReceiver(receiver.clone()))?
                    .key;
                let view = model::redact(&rec.dossier, &allowed)?;
                let sealed = crypto::seal(&wire::to_canonical(&view)?, key, &mut *self.rng)?;
                let msg = self.sign(Message::Send {
                    dossier: id.clone(),
                    owner: self.user().clone(),
                    receiver: receiver.clone(),
                    version: rec.dossier.version,
                    nonce: sealed.nonce,
                    ciphertext: sealed.ciphertext,
                    signature: Signature(Bytes::default()),
                })?;
                Self::expect_empty(session.call(&msg)?)
            })();
            match result {
                Ok(()) => report.sent.push(receiver),
                Err(e) => {
                    if matches!(e, AgentError::SyncUnreachable(_)) {
                        unreachable += 1;
                    }
                    report.failed.push((receiver, e.to_string()));
                }
            }
        }
        if report.sent.is_empty() && unreachable > 0 {
            return Err(AgentError::SyncUnreachable(report.failed[0].1.clone()));
        }
        Ok(report)
    }

    /// Receive sequence: fetch, check origin, store sealed, acknowledge.
    pub fn pull<S: Session + ?Sized>(&mut self, session: &mut S) -> Result<PullReport, AgentError> {
        let mut report = PullReport::default();
        let me = self.user().clone();
        loop {
            let seq = self.next_seq()?;
            let fetch = self.sign(Message::Fetch {
                receiver: me.clone(),
                request_seq: seq,
                signature: Signature(Bytes::default()),
            })?;
            let entries = match session.call(&fetch)? {
                Message::OkPending { entries } => entries,
                other => return Err(AgentError::from_response(other)),
            };
            if entries.is_empty() {
                break;
            }
            let mut ack = Vec::new();
            for e in entries {
                let verified = match self.lookup(session, &e.owner) {
                    Ok(bundle) => wire::signing_bytes(&e.as_send(&me))
                        .is_ok_and(|bytes| crypto::verify(&bytes, &e.signature, &bundle)),
                    Err(AgentError::UnknownReceiver(_)) => false,
                    Err(err) => return Err(err),
                };
                let conflicting = self.state.owned.contains_key(&e.dossier)
                    || self
                        .state
                        .foreign
                        .get(&e.dossier)
                        .is_some_and(|r| r.owner != e.owner);
                if !verified || conflicting {
                    log::warn!("quarantining pending entry {} for {}", e.entry_id, e.dossier);
                    report.quarantined.push(e.entry_id);
                    continue;
                }
                let newer = self
                    .state
                    .foreign
                    .get(&e.dossier)
                    .is_none_or(|r| e.version > r.version);
                if newer {
                    self.commit(AgentCommand::StoreForeign {
                        record: ForeignRecord {
                            dossier: e.dossier.clone(),
                            owner: e.owner.clone(),
                            version: e.version,
                            nonce: e.nonce,
                            ciphertext: e.ciphertext,
                        },
                    })?;
                    report.applied.push((e.dossier, e.version));
                } else {
                    report.stale += 1;
                }
                ack.push(e.entry_id);
            }
            if ack.is_empty() {
                break;
            }
            let seq = self.next_seq()?;
            let msg = self.sign(Message::Ack {
                receiver: me.clone(),
                entry_ids: ack,
                request_seq: seq,
                signature: Signature(Bytes::default()),
            })?;
            Self::expect_empty(session.call(&msg)?)?;
        }
        Ok(report)
    }

    /// Returns a cached key if caching is on and the entry is younger than the TTL.
    pub fn key_cache_lookup(&mut self, id: &DossierId, now: u64) -> Option<SymKey> {
        let ttl = self.config.key_cache_ttl_seconds;
        if ttl == 0 {
            self.key_cache.clear();
            return None;
        }
        match self.key_cache.get(id) {
            Some((key, fetched)) if now.saturating_sub(*fetched) < ttl => Some(key.clone()),
            Some(_) => {
                self.key_cache.remove(id);
                None
            }
            None => None,
        }
    }

    /// Use sequence. `now` is in seconds and only matters for the key cache.
    pub fn use_dossier<S: Session + ?Sized>(
        &mut self,
        session: &mut S,
        id: &DossierId,
        now: u64,
    ) -> Result<DossierView, AgentError> {
        if let Some(rec) = self.state.owned.get(id) {
            return Ok(DossierView::Owned(rec.dossier.clone()));
        }
        let Some(record) = self.state.foreign.get(id).cloned() else {
            return Err(AgentError::UnknownDossier(id.clone()));
        };
        let key = match self.key_cache_lookup(id, now) {
            Some(k) => k,
            None => {
                let seq = self.next_seq()?;
                let msg = self.sign(Message::GetKey {
                    dossier: id.clone(),
                    receiver: self.user().clone(),
                    request_seq: seq,
                    signature: Signature(Bytes::default()),
                })?;
                match session.call(&msg)? {
                    Message::OkKey { wrapped } => {
                        let key = self
                            .identity
                            .unwrap_key(&wrapped.0)
                            .map_err(|e| AgentError::CorruptRecord(id.clone(), e.to_string()))?;
                        if self.config.key_cache_ttl_seconds > 0 {
                            self.key_cache.insert(id.clone(), (key.clone(), now));
                        }
                        key
                    }
                    Message::Err {
                        code: ErrorCode::NoKey,
                        ..
                    } => {
                        self.key_cache.remove(id);
                        if self.config.revoke_policy == RevokePolicy::Purge {
                            self.commit(AgentCommand::PurgeForeign { dossier: id.clone() })?;
                            // the log still holds the ciphertext until compaction
                            self.save()?;
                        }
                        return Err(AgentError::AccessRevoked(id.clone()));
                    }
                    other => return Err(AgentError::from_response(other)),
                }
            }
        };
        let sealed = SealedBox {
            nonce: record.nonce.clone(),
            ciphertext: record.ciphertext.clone(),
        };
        let corrupt = |why: String| AgentError::CorruptRecord(id.clone(), why);
        let plaintext = crypto::open(&sealed, &key).map_err(|e| corrupt(e.to_string()))?;
        let view: RedactedView = wire::from_canonical(&plaintext).map_err(|e| corrupt(e.to_string()))?;
        if view.id != record.dossier || view.owner != record.owner || view.version != record.version {
            return Err(corrupt("sealed view does not match its envelope".into()));
        }
        Ok(DossierView::Foreign(view))
    }

    /// Revoke sequence: delete the receiver's key at the synchronizer.
    pub fn revoke<S: Session + ?Sized>(&mut self, session: &mut S, id: &DossierId, receiver: &UserId) -> Result<(), AgentError> {
        self.owned(id)?;
        let msg = self.sign(Message::Revoke {
            dossier: id.clone(),
            owner: self.user().clone(),
            receiver: receiver.clone(),
            signature: Signature(Bytes::default()),
        })?;
        Self::expect_empty(session.call(&msg)?)?;
        self.commit(AgentCommand::Revoke {
            dossier: id.clone(),
            receiver: receiver.clone(),
        })
    }
}
