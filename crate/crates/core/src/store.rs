//! In-memory state with a command log on disk.
//!
//! A state directory holds three files:
//!
//! * `snapshot.dc`: one frame holding the canonical [`Snapshot`];
//! * `log.dc`: concatenated frames, one [`LogRecord`] each, numbered from
//!   `snapshot.sequence + 1`;
//! * `lock`: `<pid> <nonce>` of the process that owns the directory.
//!
//! Loading folds the log over the snapshot with the same deterministic
//! handlers used live. A torn final record is dropped with a warning. Saving
//! writes `snapshot.dc.tmp`, renames it over the snapshot and then empties the
//! log; records already folded into the snapshot are skipped if a crash lands
//! between the rename and the truncation.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use rand_core::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{self, WireError};

pub const SNAPSHOT_FILE: &str = "snapshot.dc";
pub const LOG_FILE: &str = "log.dc";
pub const LOCK_FILE: &str = "lock";
const SNAPSHOT_TMP: &str = "snapshot.dc.tmp";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("corrupt log record {sequence}: {reason}")]
    CorruptLog { sequence: u64, reason: String },
    #[error("log gap: expected record {expected}, found {found}")]
    LogGap { expected: u64, found: u64 },
    #[error("suite mismatch: directory uses `{found}`, expected `{expected}`")]
    SuiteMismatch { expected: String, found: String },
    #[error("disk full")]
    DiskFull,
    #[error("lock on the state directory was lost")]
    LockLost,
    #[error("state directory {0} is locked by another process")]
    Locked(PathBuf),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull {
            StoreError::DiskFull
        } else {
            StoreError::Io(e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    Agent,
    Synchronizer,
}

/// A state that can be rebuilt by replaying commands.
pub trait Replay: Default + Serialize + DeserializeOwned {
    type Command: Serialize + DeserializeOwned;
    const KIND: StateKind;

    /// Applies one logged command. Must be deterministic.
    fn replay(&mut self, cmd: &Self::Command);
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Snapshot<S> {
    pub suite_id: String,
    pub state_kind: StateKind,
    pub sequence: u64,
    pub body: S,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LogRecord<C> {
    pub sequence: u64,
    pub record: C,
}

/// Whether appends and saves call `fsync`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Durability {
    Fsync,
    /// Writes reach the OS but are not flushed to the device. Survives a
    /// process crash, not a power loss. Used by the simulator.
    Process,
}

/// Result of reading a state directory.
#[derive(Debug)]
pub struct Loaded<S> {
    pub state: S,
    pub sequence: u64,
    /// Length of the valid prefix of `log.dc`.
    pub log_len: u64,
    pub torn_tail: bool,
}

fn read_optional(path: &Path) -> Result<Option<Vec<u8>>, StoreError> {
    match fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn read_snapshot<S: Replay>(dir: &Path, suite: &str) -> Result<(S, u64), StoreError> {
    let Some(bytes) = read_optional(&dir.join(SNAPSHOT_FILE))? else {
        return Ok((S::default(), 0));
    };
    let mut r = bytes.as_slice();
    let payload = wire::deframe(&mut r).map_err(|e| StoreError::CorruptSnapshot(e.to_string()))?;
    if !r.is_empty() {
        return Err(StoreError::CorruptSnapshot("trailing bytes".into()));
    }
    let snap: Snapshot<S> =
        wire::from_canonical(&payload).map_err(|e| StoreError::CorruptSnapshot(e.to_string()))?;
    if snap.suite_id != suite {
        return Err(StoreError::SuiteMismatch {
            expected: suite.to_owned(),
            found: snap.suite_id,
        });
    }
    if snap.state_kind != S::KIND {
        return Err(StoreError::CorruptSnapshot(format!(
            "holds {:?} state, expected {:?}",
            snap.state_kind,
            S::KIND
        )));
    }
    Ok((snap.body, snap.sequence))
}

/// Reads a state directory without taking its lock.
pub fn load<S: Replay>(dir: &Path, suite: &str) -> Result<Loaded<S>, StoreError> {
    let (mut state, snap_seq) = read_snapshot::<S>(dir, suite)?;
    let log = read_optional(&dir.join(LOG_FILE))?.unwrap_or_default();
    let mut sequence = snap_seq;
    let mut rest = log.as_slice();
    let mut log_len = 0u64;
    let mut torn_tail = false;
    loop {
        let before = rest.len();
        match wire::read_frame(&mut rest) {
            Ok(None) => break,
            Ok(Some(payload)) => {
                let record: LogRecord<S::Command> =
                    wire::from_canonical(&payload).map_err(|e| StoreError::CorruptLog {
                        sequence: sequence + 1,
                        reason: e.to_string(),
                    })?;
                log_len += (before - rest.len()) as u64;
                if record.sequence <= snap_seq {
                    // already folded into the snapshot
                    continue;
                }
                if record.sequence != sequence + 1 {
                    return Err(StoreError::LogGap {
                        expected: sequence + 1,
                        found: record.sequence,
                    });
                }
                state.replay(&record.record);
                sequence = record.sequence;
            }
            Err(WireError::TruncatedFrame) => {
                log::warn!(
                    "discarding torn record at offset {log_len} of {}",
                    dir.join(LOG_FILE).display()
                );
                torn_tail = true;
                break;
            }
            Err(e) => {
                return Err(StoreError::CorruptLog {
                    sequence: sequence + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(Loaded {
        state,
        sequence,
        log_len,
        torn_tail,
    })
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

/// Exclusive owner of one state directory.
pub struct Store<S: Replay> {
    dir: PathBuf,
    suite: String,
    sequence: u64,
    log: File,
    log_len: u64,
    _lock: File,
    lock_contents: String,
    durability: Durability,
    _state: PhantomData<fn() -> S>,
}

impl<S: Replay> std::fmt::Debug for Store<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("dir", &self.dir)
            .field("sequence", &self.sequence)
            .finish_non_exhaustive()
    }
}

impl<S: Replay> Store<S> {
    /// Locks `dir` (creating it if needed) and recovers its state.
    pub fn open(dir: impl Into<PathBuf>, suite: &str) -> Result<(Self, S), StoreError> {
        Self::open_with(dir, suite, Durability::Fsync)
    }

    pub fn open_with(
        dir: impl Into<PathBuf>,
        suite: &str,
        durability: Durability,
    ) -> Result<(Self, S), StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let lock = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(dir.join(LOCK_FILE))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(StoreError::Locked(dir)),
            Err(fs::TryLockError::Error(e)) => return Err(e.into()),
        }
        let mut nonce = [0u8; 8];
        rand_core::OsRng.fill_bytes(&mut nonce);
        let lock_contents = format!(
            "{} {}\n",
            std::process::id(),
            nonce.iter().map(|b| format!("{b:02x}")).collect::<String>()
        );
        lock.set_len(0)?;
        (&lock).write_all(lock_contents.as_bytes())?;
        if durability == Durability::Fsync {
            lock.sync_all()?;
        }

        let loaded = load::<S>(&dir, suite)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(LOG_FILE))?;
        if loaded.torn_tail {
            log.set_len(loaded.log_len)?;
        }
        let mut store = Store {
            dir,
            suite: suite.to_owned(),
            sequence: loaded.sequence,
            log,
            log_len: loaded.log_len,
            _lock: lock,
            lock_contents,
            durability,
            _state: PhantomData,
        };
        if !store.dir.join(SNAPSHOT_FILE).exists() {
            store.save(&S::default())?;
        }
        Ok((store, loaded.state))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Sequence number of the last durable record.
    pub fn sequence(&self) -> u64 {
        self.sequence
    }

    fn check_lock(&self) -> Result<(), StoreError> {
        let mut current = String::new();
        File::open(self.dir.join(LOCK_FILE))
            .and_then(|mut f| f.read_to_string(&mut current))
            .map_err(|_| StoreError::LockLost)?;
        if current != self.lock_contents {
            return Err(StoreError::LockLost);
        }
        Ok(())
    }

    /// Appends one command. Returns once it is durable.
    pub fn append(&mut self, cmd: &S::Command) -> Result<u64, StoreError> {
        self.check_lock()?;
        let sequence = self.sequence + 1;
        let record = LogRecord {
            sequence,
            record: cmd,
        };
        let payload = wire::to_canonical(&record).map_err(|e| StoreError::CorruptLog {
            sequence,
            reason: e.to_string(),
        })?;
        let framed = wire::frame(&payload).map_err(|e| StoreError::CorruptLog {
            sequence,
            reason: e.to_string(),
        })?;
        let written = self.log.write_all(&framed).and_then(|()| match self.durability {
            Durability::Fsync => self.log.sync_data(),
            Durability::Process => Ok(()),
        });
        if let Err(e) = written {
            // leave no torn record behind for the next append to follow
            let _ = self.log.set_len(self.log_len);
            return Err(e.into());
        }
        self.log_len += framed.len() as u64;
        self.sequence = sequence;
        Ok(sequence)
    }

    pub(crate) fn write_temp_snapshot(&self, state: &S) -> Result<PathBuf, StoreError> {
        let snap = Snapshot {
            suite_id: self.suite.clone(),
            state_kind: S::KIND,
            sequence: self.sequence,
            body: state,
        };
        let payload = wire::to_canonical(&snap)
            .map_err(|e| StoreError::CorruptSnapshot(e.to_string()))?;
        let tmp = self.dir.join(SNAPSHOT_TMP);
        let mut f = File::create(&tmp)?;
        f.write_all(&(payload.len() as u32).to_be_bytes())?;
        f.write_all(&payload)?;
        if self.durability == Durability::Fsync {
            f.sync_all()?;
        }
        Ok(tmp)
    }

    /// Writes a fresh snapshot atomically and empties the log.
    pub fn save(&mut self, state: &S) -> Result<(), StoreError> {
        self.check_lock()?;
        let tmp = self.write_temp_snapshot(state)?;
        fs::rename(&tmp, self.dir.join(SNAPSHOT_FILE))?;
        if self.durability == Durability::Fsync {
            sync_dir(&self.dir)?;
        }
        self.log.set_len(0)?;
        if self.durability == Durability::Fsync {
            self.log.sync_all()?;
        }
        self.log_len = 0;
        Ok(())
    }
}
