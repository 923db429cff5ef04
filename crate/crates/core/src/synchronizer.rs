//! The untrusted synchronizer.
//!
//! [`SyncState`] holds only public keys, wrapped keys and sealed pending
//! dossiers. Every request is handled by a deterministic function of
//! `(state, message)`, so the state is rebuilt on startup by replaying the
//! logged requests through the same code. [`SyncService`] puts a lock and
//! the command log around it and serves the wire protocol over TCP.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, PublicKeyBundle, Signature};
use crate::model::{DossierId, UserId, Version};
use crate::store::{self, Durability, Replay, StateKind, Store, StoreError};
use crate::wire::{self, Bytes, ErrorCode, Message, PendingWire, WireError};

/// Rough byte budget for one `OkPending` page, well under the frame cap.
pub const FETCH_PAGE_BUDGET: usize = 1_400_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyncError {
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("`{0}` is not a request")]
    UnexpectedMessage(&'static str),
    #[error("user {0} is already registered with different keys")]
    KeyConflict(UserId),
    #[error("owner {0} is not registered")]
    UnknownOwner(UserId),
    #[error("user {0} is not registered")]
    UnknownUser(UserId),
    #[error("signature does not verify")]
    BadSignature,
    #[error("request_seq {got} is not above {last}")]
    ReplayedRequest { got: u64, last: u64 },
    #[error("no key")]
    NoKey,
    #[error("{0} does not own this grant")]
    NotGrantOwner(UserId),
}

impl SyncError {
    pub fn code(&self) -> ErrorCode {
        match self {
            SyncError::Malformed(_) => ErrorCode::Malformed,
            SyncError::UnexpectedMessage(_) => ErrorCode::UnexpectedMessage,
            SyncError::KeyConflict(_) => ErrorCode::KeyConflict,
            SyncError::UnknownOwner(_) => ErrorCode::UnknownOwner,
            SyncError::UnknownUser(_) => ErrorCode::UnknownUser,
            SyncError::BadSignature => ErrorCode::BadSignature,
            SyncError::ReplayedRequest { .. } => ErrorCode::ReplayedRequest,
            SyncError::NoKey => ErrorCode::NoKey,
            SyncError::NotGrantOwner(_) => ErrorCode::NotGrantOwner,
        }
    }

    fn into_message(self) -> Message {
        Message::err(self.code(), self.to_string())
    }
}

/// A receiver's symmetric key, wrapped for it and signed by the owner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrappedKey {
    pub dossier: DossierId,
    pub owner: UserId,
    pub receiver: UserId,
    pub wrapped: Bytes,
    pub signature: Signature,
}

impl WrappedKey {
    fn as_grant(&self) -> Message {
        Message::Grant {
            dossier: self.dossier.clone(),
            owner: self.owner.clone(),
            receiver: self.receiver.clone(),
            wrapped: self.wrapped.clone(),
            signature: self.signature.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingEntry {
    pub entry_id: u64,
    pub dossier: DossierId,
    pub owner: UserId,
    pub receiver: UserId,
    pub version: Version,
    pub nonce: Bytes,
    pub ciphertext: Bytes,
    pub signature: Signature,
}

impl PendingEntry {
    pub fn to_wire(&self) -> PendingWire {
        PendingWire {
            entry_id: self.entry_id,
            dossier: self.dossier.clone(),
            owner: self.owner.clone(),
            version: self.version,
            nonce: self.nonce.clone(),
            ciphertext: self.ciphertext.clone(),
            signature: self.signature.clone(),
        }
    }
}

/// The full synchronizer state. Holds no plaintext and no unwrapped key.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncState {
    registry: BTreeMap<UserId, PublicKeyBundle>,
    keystore: BTreeMap<DossierId, BTreeMap<UserId, WrappedKey>>,
    pending: BTreeMap<UserId, Vec<PendingEntry>>,
    last_seq: BTreeMap<UserId, u64>,
    next_entry_id: u64,
}

/// What handling one request produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub response: Message,
    /// Whether the state changed and the request must be logged.
    pub mutated: bool,
}

fn bundle_from(user: &UserId, enc: &Bytes, sig: &Bytes) -> Result<PublicKeyBundle, SyncError> {
    let enc_public = enc
        .0
        .as_slice()
        .try_into()
        .map_err(|_| SyncError::Malformed("enc_public must be 32 bytes".into()))?;
    let sig_public = sig
        .0
        .as_slice()
        .try_into()
        .map_err(|_| SyncError::Malformed("sig_public must be 32 bytes".into()))?;
    Ok(PublicKeyBundle {
        user: user.clone(),
        enc_public,
        sig_public,
    })
}

impl SyncState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bundle(&self, user: &UserId) -> Option<&PublicKeyBundle> {
        self.registry.get(user)
    }

    pub fn key(&self, dossier: &DossierId, receiver: &UserId) -> Option<&WrappedKey> {
        self.keystore.get(dossier)?.get(receiver)
    }

    pub fn keys(&self) -> impl Iterator<Item = &WrappedKey> {
        self.keystore.values().flat_map(BTreeMap::values)
    }

    pub fn pending_for(&self, receiver: &UserId) -> &[PendingEntry] {
        self.pending.get(receiver).map_or(&[], Vec::as_slice)
    }

    pub fn pending(&self) -> impl Iterator<Item = &PendingEntry> {
        self.pending.values().flatten()
    }

    pub fn pending_count(&self) -> usize {
        self.pending.values().map(Vec::len).sum()
    }

    /// Handles one message. Failed requests leave the state untouched,
    /// except that a request which passed its replay check consumes its
    /// `request_seq`.
    pub fn handle(&mut self, msg: &Message) -> Outcome {
        let mut mutated = false;
        let response = match self.dispatch(msg, &mut mutated) {
            Ok(m) => m,
            Err(e) => e.into_message(),
        };
        Outcome { response, mutated }
    }

    fn dispatch(&mut self, msg: &Message, mutated: &mut bool) -> Result<Message, SyncError> {
        match msg {
            Message::Register {
                user,
                enc_public,
                sig_public,
            } => self.handle_register(bundle_from(user, enc_public, sig_public)?, mutated),
            Message::Lookup { user } => {
                let b = self
                    .registry
                    .get(user)
                    .ok_or_else(|| SyncError::UnknownUser(user.clone()))?;
                Ok(Message::OkBundle {
                    user: b.user.clone(),
                    enc_public: Bytes(b.enc_public.to_vec()),
                    sig_public: Bytes(b.sig_public.to_vec()),
                })
            }
            Message::Grant { .. } => self.handle_grant(msg, mutated),
            Message::Send { .. } => self.handle_send(msg, mutated),
            Message::Fetch { .. } => self.handle_fetch(msg, mutated),
            Message::Ack { .. } => self.handle_ack(msg, mutated),
            Message::GetKey { .. } => self.handle_getkey(msg, mutated),
            Message::Revoke { .. } => self.handle_revoke(msg, mutated),
            other => Err(SyncError::UnexpectedMessage(other.type_name())),
        }
    }

    fn handle_register(&mut self, bundle: PublicKeyBundle, mutated: &mut bool) -> Result<Message, SyncError> {
        match self.registry.get(&bundle.user) {
            Some(existing) if *existing == bundle => Ok(Message::OkEmpty {}),
            Some(_) => Err(SyncError::KeyConflict(bundle.user)),
            None => {
                self.registry.insert(bundle.user.clone(), bundle);
                *mutated = true;
                Ok(Message::OkEmpty {})
            }
        }
    }

    fn check_origin(&self, msg: &Message, signer: &UserId, unknown: fn(UserId) -> SyncError) -> Result<(), SyncError> {
        let bundle = self
            .registry
            .get(signer)
            .ok_or_else(|| unknown(signer.clone()))?;
        let bytes = wire::signing_bytes(msg).map_err(|e| SyncError::Malformed(e.to_string()))?;
        let sig = msg.signature().expect("signed variant");
        if crypto::verify(&bytes, sig, bundle) {
            Ok(())
        } else {
            Err(SyncError::BadSignature)
        }
    }

    /// Origin and replay checks for receiver-side reads. Consumes the sequence number.
    fn check_read(&mut self, msg: &Message, receiver: &UserId, seq: u64, mutated: &mut bool) -> Result<(), SyncError> {
        self.check_origin(msg, receiver, SyncError::UnknownUser)?;
        let last = self.last_seq.get(receiver).copied().unwrap_or(0);
        if seq <= last {
            return Err(SyncError::ReplayedRequest { got: seq, last });
        }
        self.last_seq.insert(receiver.clone(), seq);
        *mutated = true;
        Ok(())
    }

    fn grant_owner_matches(&self, dossier: &DossierId, receiver: &UserId, owner: &UserId) -> Result<(), SyncError> {
        match self.key(dossier, receiver) {
            Some(k) if k.owner != *owner => Err(SyncError::NotGrantOwner(owner.clone())),
            _ => Ok(()),
        }
    }

    fn handle_grant(&mut self, msg: &Message, mutated: &mut bool) -> Result<Message, SyncError> {
        let Message::Grant {
            dossier,
            owner,
            receiver,
            wrapped,
            signature,
        } = msg
        else {
            unreachable!()
        };
        self.check_origin(msg, owner, SyncError::UnknownOwner)?;
        if !self.registry.contains_key(receiver) {
            return Err(SyncError::UnknownUser(receiver.clone()));
        }
        self.grant_owner_matches(dossier, receiver, owner)?;
        let key = WrappedKey {
            dossier: dossier.clone(),
            owner: owner.clone(),
            receiver: receiver.clone(),
            wrapped: wrapped.clone(),
            signature: signature.clone(),
        };
        self.keystore
            .entry(dossier.clone())
            .or_default()
            .insert(receiver.clone(), key);
        *mutated = true;
        Ok(Message::OkEmpty {})
    }

    fn handle_send(&mut self, msg: &Message, mutated: &mut bool) -> Result<Message, SyncError> {
        let Message::Send {
            dossier,
            owner,
            receiver,
            version,
            nonce,
            ciphertext,
            signature,
        } = msg
        else {
            unreachable!()
        };
        self.check_origin(msg, owner, SyncError::UnknownOwner)?;
        // only the holder of a live grant may queue data for the receiver
        match self.key(dossier, receiver) {
            Some(k) if k.owner == *owner => {}
            _ => return Err(SyncError::NotGrantOwner(owner.clone())),
        }
        let queue = self.pending.entry(receiver.clone()).or_default();
        if queue
            .iter()
            .any(|e| e.dossier == *dossier && e.version == *version)
        {
            return Ok(Message::OkEmpty {});
        }
        self.next_entry_id += 1;
        queue.push(PendingEntry {
            entry_id: self.next_entry_id,
            dossier: dossier.clone(),
            owner: owner.clone(),
            receiver: receiver.clone(),
            version: *version,
            nonce: nonce.clone(),
            ciphertext: ciphertext.clone(),
            signature: signature.clone(),
        });
        *mutated = true;
        Ok(Message::OkEmpty {})
    }

    fn handle_fetch(&mut self, msg: &Message, mutated: &mut bool) -> Result<Message, SyncError> {
        let Message::Fetch {
            receiver,
            request_seq,
            ..
        } = msg
        else {
            unreachable!()
        };
        self.check_read(msg, receiver, *request_seq, mutated)?;
        let mut budget = 0usize;
        let mut entries = Vec::new();
        for e in self.pending_for(receiver) {
            let size = 512 + (e.nonce.0.len() + e.ciphertext.0.len()) * 4 / 3;
            if !entries.is_empty() && budget + size > FETCH_PAGE_BUDGET {
                break;
            }
            budget += size;
            entries.push(e.to_wire());
        }
        Ok(Message::OkPending { entries })
    }

    fn handle_ack(&mut self, msg: &Message, mutated: &mut bool) -> Result<Message, SyncError> {
        let Message::Ack {
            receiver,
            entry_ids,
            request_seq,
            ..
        } = msg
        else {
            unreachable!()
        };
        self.check_read(msg, receiver, *request_seq, mutated)?;
        if let Some(queue) = self.pending.get_mut(receiver) {
            queue.retain(|e| !entry_ids.contains(&e.entry_id));
            if queue.is_empty() {
                self.pending.remove(receiver);
            }
        }
        Ok(Message::OkEmpty {})
    }

    fn handle_getkey(&mut self, msg: &Message, mutated: &mut bool) -> Result<Message, SyncError> {
        let Message::GetKey {
            dossier,
            receiver,
            request_seq,
            ..
        } = msg
        else {
            unreachable!()
        };
        self.check_read(msg, receiver, *request_seq, mutated)?;
        // the signer is the receiver, so a client can only ever see keys wrapped for it
        self.key(dossier, receiver)
            .map(|k| Message::OkKey {
                wrapped: k.wrapped.clone(),
            })
            .ok_or(SyncError::NoKey)
    }

    fn handle_revoke(&mut self, msg: &Message, mutated: &mut bool) -> Result<Message, SyncError> {
        let Message::Revoke {
            dossier,
            owner,
            receiver,
            ..
        } = msg
        else {
            unreachable!()
        };
        self.check_origin(msg, owner, SyncError::UnknownOwner)?;
        self.grant_owner_matches(dossier, receiver, owner)?;
        if let Some(rows) = self.keystore.get_mut(dossier) {
            if rows.remove(receiver).is_some() {
                *mutated = true;
            }
            if rows.is_empty() {
                self.keystore.remove(dossier);
            }
        }
        if let Some(queue) = self.pending.get_mut(receiver) {
            let before = queue.len();
            queue.retain(|e| !(e.dossier == *dossier && e.owner == *owner));
            *mutated |= queue.len() != before;
            if queue.is_empty() {
                self.pending.remove(receiver);
            }
        }
        Ok(Message::OkEmpty {})
    }

    /// Re-checks the ingest invariants. Returns a description of each violation.
    pub fn audit(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for k in self.keys() {
            let ok = self.registry.get(&k.owner).is_some_and(|b| {
                wire::signing_bytes(&k.as_grant()).is_ok_and(|bytes| crypto::verify(&bytes, &k.signature, b))
            });
            if !ok {
                problems.push(format!("key ({}, {}) fails origin check", k.dossier, k.receiver));
            }
        }
        let mut last_id = 0;
        let mut ids: Vec<u64> = self.pending().map(|e| e.entry_id).collect();
        ids.sort_unstable();
        for id in ids {
            if id <= last_id {
                problems.push(format!("duplicate entry id {id}"));
            }
            last_id = id;
        }
        if last_id > self.next_entry_id {
            problems.push("entry id above counter".into());
        }
        for (receiver, queue) in &self.pending {
            for w in queue.windows(2) {
                if w[0].entry_id >= w[1].entry_id {
                    problems.push(format!("queue for {receiver} out of order"));
                }
            }
            for e in queue {
                let send = e.to_wire().as_send(receiver);
                let ok = e.receiver == *receiver
                    && self.registry.get(&e.owner).is_some_and(|b| {
                        wire::signing_bytes(&send).is_ok_and(|bytes| crypto::verify(&bytes, &e.signature, b))
                    });
                if !ok {
                    problems.push(format!("pending entry {} fails origin check", e.entry_id));
                }
            }
        }
        problems
    }
}

impl Replay for SyncState {
    type Command = Message;
    const KIND: StateKind = StateKind::Synchronizer;

    fn replay(&mut self, cmd: &Message) {
        self.handle(cmd);
    }
}

struct Inner {
    state: SyncState,
    store: Store<SyncState>,
    suite: String,
}

/// The synchronizer service: state, command log and network front end.
#[derive(Clone)]
pub struct SyncService {
    inner: Arc<Mutex<Inner>>,
    suite: String,
}

impl SyncService {
    pub fn open(data_dir: impl Into<PathBuf>, suite: &str) -> Result<Self, StoreError> {
        Self::open_with(data_dir, suite, Durability::Fsync)
    }

    pub fn open_with(data_dir: impl Into<PathBuf>, suite: &str, durability: Durability) -> Result<Self, StoreError> {
        let (store, state) = Store::open_with(data_dir, suite, durability)?;
        Ok(Self {
            inner: Arc::new(Mutex::new(Inner {
                state,
                store,
                suite: suite.to_owned(),
            })),
            suite: suite.to_owned(),
        })
    }

    pub fn suite(&self) -> &str {
        &self.suite
    }

    pub fn state(&self) -> SyncState {
        self.inner.lock().expect("poisoned").state.clone()
    }

    /// Applies one request. Mutations are logged before the response is returned.
    pub fn dispatch(&self, msg: &Message) -> Message {
        let mut guard = self.inner.lock().expect("poisoned");
        let inner = &mut *guard;
        let outcome = inner.state.handle(msg);
        if outcome.mutated {
            if let Err(e) = inner.store.append(msg) {
                log::error!("log append failed, reloading durable state: {e}");
                match store::load::<SyncState>(inner.store.dir(), &inner.suite) {
                    Ok(loaded) => inner.state = loaded.state,
                    Err(e) => log::error!("reload failed: {e}"),
                }
                return Message::err(ErrorCode::Internal, "request could not be made durable");
            }
        }
        outcome.response
    }

    /// Writes a snapshot and empties the log.
    pub fn save(&self) -> Result<(), StoreError> {
        let mut guard = self.inner.lock().expect("poisoned");
        let inner = &mut *guard;
        inner.store.save(&inner.state)
    }

    /// Serves one connection until the peer closes it.
    pub fn handle_connection(&self, stream: TcpStream) -> Result<(), WireError> {
        stream.set_nodelay(true).ok();
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        {
            let mut hs = HandshakeStream {
                r: &mut reader,
                w: &mut writer,
            };
            wire::server_handshake(&mut hs, &self.suite)?;
        }
        loop {
            let payload = match wire::read_frame(&mut reader) {
                Ok(Some(p)) => p,
                Ok(None) => return Ok(()),
                Err(WireError::FrameTooLarge(n)) => {
                    // cannot resynchronise after an oversized frame
                    let m = Message::err(ErrorCode::OversizeField, format!("frame of {n} bytes"));
                    wire::write_message(&mut writer, &m)?;
                    return Ok(());
                }
                Err(e) => return Err(e),
            };
            let response = match wire::decode(&payload) {
                Ok(msg) => self.dispatch(&msg),
                Err(e) => Message::err(wire_error_code(&e), e.to_string()),
            };
            wire::write_message(&mut writer, &response)?;
        }
    }

    /// Accepts connections until `shutdown` is set, then saves a snapshot.
    pub fn serve(&self, listener: TcpListener, shutdown: Arc<AtomicBool>) -> Result<(), StoreError> {
        listener.set_nonblocking(true)?;
        while !shutdown.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    stream.set_nonblocking(false)?;
                    let svc = self.clone();
                    std::thread::spawn(move || {
                        log::debug!("connection from {peer}");
                        if let Err(e) = svc.handle_connection(stream) {
                            log::warn!("connection from {peer} ended: {e}");
                        }
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(20));
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
        log::info!("shutting down, writing snapshot");
        self.save()
    }
}

pub(crate) fn wire_error_code(e: &WireError) -> ErrorCode {
    match e {
        WireError::NonCanonical => ErrorCode::NonCanonical,
        WireError::UnknownType(_) => ErrorCode::UnknownType,
        WireError::OversizeField(_) | WireError::FrameTooLarge(_) => ErrorCode::OversizeField,
        _ => ErrorCode::Malformed,
    }
}

struct HandshakeStream<'a> {
    r: &'a mut BufReader<TcpStream>,
    w: &'a mut BufWriter<TcpStream>,
}

impl std::io::Read for HandshakeStream<'_> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        self.r.read(buf)
    }
}

impl std::io::BufRead for HandshakeStream<'_> {
    fn fill_buf(&mut self) -> std::io::Result<&[u8]> {
        self.r.fill_buf()
    }
    fn consume(&mut self, amt: usize) {
        self.r.consume(amt)
    }
}

impl std::io::Write for HandshakeStream<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.w.write(buf)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.w.flush()
    }
}
