#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use dossier_sync::crypto::{self, Identity, Signature};
use dossier_sync::store::{self, LOG_FILE, SNAPSHOT_FILE};
use dossier_sync::synchronizer::SyncService;
use dossier_sync::wire::{self, Bytes, Message};
use dossier_sync::{DossierId, FieldName, FieldValue, SyncState, UserId, Version, SUITE_ID};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn uid(s: &str) -> UserId {
    UserId::new(s).unwrap()
}

pub fn did(s: &str) -> DossierId {
    DossierId::new(s).unwrap()
}

pub fn fname(s: &str) -> FieldName {
    FieldName::new(s).unwrap()
}

pub fn canary(tag: u8) -> FieldValue {
    FieldValue::new(vec![tag; 32]).unwrap()
}

/// A running `synchd` child; stopped with SIGTERM.
pub struct Synchd {
    child: Option<Child>,
    pub addr: String,
}

impl Synchd {
    pub fn start(data: &Path) -> Synchd {
        let mut child = Command::new(env!("CARGO_BIN_EXE_synchd"))
            .args(["--listen", "127.0.0.1:0", "--log-level", "warn", "--data"])
            .arg(data)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("synchd starts");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
            .to_owned();
        Synchd {
            child: Some(child),
            addr,
        }
    }

    /// Sends SIGTERM and returns the exit code.
    pub fn stop(&mut self) -> Option<i32> {
        let mut child = self.child.take()?;
        Command::new("kill")
            .args(["-TERM", &child.id().to_string()])
            .status()
            .unwrap();
        child.wait().unwrap().code()
    }
}

impl Drop for Synchd {
    fn drop(&mut self) {
        if let Some(mut c) = self.child.take() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

/// One `agent` invocation for a user whose files live under `root`.
pub fn agent(root: &Path, user: &str, sync: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agent"))
        .arg("--identity")
        .arg(root.join(format!("{user}.id")))
        .arg("--store")
        .arg(root.join(format!("{user}.store")))
        .args(["--sync", sync])
        .args(args)
        .output()
        .expect("agent runs")
}

pub fn sign(id: &Identity, mut m: Message) -> Message {
    let sig = id.sign(&wire::signing_bytes(&m).unwrap());
    *m.signature_mut().unwrap() = sig;
    m
}

fn blank() -> Signature {
    Signature(Bytes::default())
}

pub fn register(id: &Identity) -> Message {
    let p = id.public();
    Message::Register {
        user: p.user,
        enc_public: Bytes(p.enc_public.to_vec()),
        sig_public: Bytes(p.sig_public.to_vec()),
    }
}

/// A random request schedule over four users, mostly well formed, with
/// forged signatures, replayed sequence numbers, key conflicts, foreign
/// acks and stray revokes mixed in.
pub fn schedule(seed: u64, len: usize) -> Vec<Message> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let users: Vec<Identity> = (0..4)
        .map(|i| Identity::generate(uid(&format!("user{i}")), &mut rng).unwrap())
        .collect();
    let impostor = Identity::generate(uid("user0"), &mut rng).unwrap();
    let mut seq = [0u64; 4];
    let mut grants: Vec<(usize, DossierId, usize)> = Vec::new();
    let mut version = 1u64;
    let mut out = Vec::new();
    let pick = |rng: &mut ChaCha20Rng, n: usize| (rng.next_u32() as usize) % n;

    while out.len() < len {
        let a = pick(&mut rng, 4);
        let b = (a + 1 + pick(&mut rng, 3)) % 4;
        let signer = if pick(&mut rng, 12) == 0 { &impostor } else { &users[a] };
        let mut next_seq = |rng: &mut ChaCha20Rng, u: usize| {
            if pick(rng, 10) == 0 {
                seq[u].saturating_sub(pick(rng, 2) as u64)
            } else {
                seq[u] += 1;
                seq[u]
            }
        };
        let m = match pick(&mut rng, 11) {
            0 => {
                if pick(&mut rng, 6) == 0 {
                    register(&impostor)
                } else {
                    register(&users[a])
                }
            }
            1 | 2 => {
                let d = did(&format!("d{}", pick(&mut rng, 5)));
                let key = crypto::gen_sym_key(&mut rng).unwrap();
                let wrapped = crypto::wrap_key(&key, &users[b].public(), &mut rng).unwrap();
                grants.push((a, d.clone(), b));
                sign(
                    signer,
                    Message::Grant {
                        dossier: d,
                        owner: users[a].user().clone(),
                        receiver: users[b].user().clone(),
                        wrapped: Bytes(wrapped),
                        signature: blank(),
                    },
                )
            }
            3..=5 => {
                let (o, d, r) = match grants.get(pick(&mut rng, grants.len().max(1))) {
                    Some(g) => g.clone(),
                    None => (a, did("d0"), b),
                };
                if pick(&mut rng, 3) != 0 {
                    version += 1;
                }
                let mut ct = vec![0u8; 48];
                rng.fill_bytes(&mut ct);
                let mut nonce = vec![0u8; 24];
                rng.fill_bytes(&mut nonce);
                sign(
                    if std::ptr::eq(signer, &impostor) { &impostor } else { &users[o] },
                    Message::Send {
                        dossier: d,
                        owner: users[o].user().clone(),
                        receiver: users[r].user().clone(),
                        version: Version(version),
                        nonce: Bytes(nonce),
                        ciphertext: Bytes(ct),
                        signature: blank(),
                    },
                )
            }
            6 => sign(
                signer,
                Message::Fetch {
                    receiver: users[a].user().clone(),
                    request_seq: next_seq(&mut rng, a),
                    signature: blank(),
                },
            ),
            7 => {
                let ids = (0..1 + pick(&mut rng, 4)).map(|_| pick(&mut rng, 40) as u64).collect();
                sign(
                    signer,
                    Message::Ack {
                        receiver: users[a].user().clone(),
                        entry_ids: ids,
                        request_seq: next_seq(&mut rng, a),
                        signature: blank(),
                    },
                )
            }
            8 => sign(
                signer,
                Message::GetKey {
                    dossier: did(&format!("d{}", pick(&mut rng, 5))),
                    receiver: users[a].user().clone(),
                    request_seq: next_seq(&mut rng, a),
                    signature: blank(),
                },
            ),
            9 => {
                let (o, d, r) = match grants.get(pick(&mut rng, grants.len().max(1))) {
                    Some(g) if pick(&mut rng, 4) != 0 => g.clone(),
                    _ => (a, did(&format!("d{}", pick(&mut rng, 5))), b),
                };
                sign(
                    &users[o],
                    Message::Revoke {
                        dossier: d,
                        owner: users[o].user().clone(),
                        receiver: users[r].user().clone(),
                        signature: blank(),
                    },
                )
            }
            _ => Message::Lookup {
                user: users[a].user().clone(),
            },
        };
        out.push(m);
    }
    out
}

/// Byte offsets at which each complete frame of `bytes` ends, starting with 0.
pub fn frame_boundaries(bytes: &[u8]) -> Vec<usize> {
    let mut out = vec![0];
    let mut at = 0;
    while at + 4 <= bytes.len() {
        let len = u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        if at + 4 + len > bytes.len() {
            break;
        }
        at += 4 + len;
        out.push(at);
    }
    out
}

pub struct CrashReplayOutcome {
    pub prefixes: usize,
    pub restarts: usize,
}

/// Drives a [`SyncService`] through a schedule with random kills and
/// restarts, recording the live state after every logged record. Then, for
/// every prefix of the log, recovers a copy of the directory cut at that
/// prefix and compares it with the live state at that point and with a
/// fresh fold of the logged requests.
pub fn crash_replay(seed: u64, len: usize) -> Result<CrashReplayOutcome, String> {
    let dir = tempfile::tempdir().unwrap();
    let open = || SyncService::open_with(dir.path(), SUITE_ID, store::Durability::Process).unwrap();
    let mut svc = open();
    let mut live: Vec<SyncState> = vec![SyncState::default()];
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xc4a5);
    let mut restarts = 0;
    for (i, m) in schedule(seed, len).iter().enumerate() {
        svc.dispatch(m);
        let log = std::fs::read(dir.path().join(LOG_FILE)).unwrap();
        let n = frame_boundaries(&log).len() - 1;
        if n == live.len() {
            live.push(svc.state());
        } else if n + 1 != live.len() {
            return Err(format!("op {i}: log jumped to {n} records"));
        } else if svc.state() != *live.last().unwrap() {
            return Err(format!("op {i}: state changed without a log record"));
        }
        if rng.next_u32() % 20 == 0 {
            let before = svc.state();
            drop(svc);
            svc = open();
            restarts += 1;
            if svc.state() != before {
                return Err(format!("op {i}: restart lost state"));
            }
        }
    }
    drop(svc);

    let log = std::fs::read(dir.path().join(LOG_FILE)).unwrap();
    let snapshot = std::fs::read(dir.path().join(SNAPSHOT_FILE)).unwrap();
    let bounds = frame_boundaries(&log);
    let mut fold = SyncState::default();
    for (k, &end) in bounds.iter().enumerate() {
        if k > 0 {
            let mut r = &log[bounds[k - 1]..end];
            let rec: store::LogRecord<Message> = wire::from_canonical(&wire::deframe(&mut r).unwrap()).unwrap();
            fold.handle(&rec.record);
        }
        let cut = tempfile::tempdir().unwrap();
        std::fs::write(cut.path().join(SNAPSHOT_FILE), &snapshot).unwrap();
        std::fs::write(cut.path().join(LOG_FILE), &log[..end]).unwrap();
        let recovered = store::load::<SyncState>(cut.path(), SUITE_ID)
            .map_err(|e| format!("prefix {k}: {e}"))?
            .state;
        if recovered != live[k] {
            return Err(format!("prefix {k}: recovered state differs from the live run"));
        }
        if fold != live[k] {
            return Err(format!("prefix {k}: pure fold differs from the live run"));
        }
    }
    Ok(CrashReplayOutcome {
        prefixes: bounds.len(),
        restarts,
    })
}

pub fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}
