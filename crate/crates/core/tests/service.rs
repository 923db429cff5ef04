mod common;

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::Command;

use common::*;
use dossier_sync::agent::Session;
use dossier_sync::store::{self, LOG_FILE};
use dossier_sync::wire::{self, ErrorCode, Message};
use dossier_sync::{Identity, SyncState, TcpSession, SUITE_ID};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[test]
fn help_exits_zero() {
    let out = Command::new(env!("CARGO_BIN_EXE_synchd")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--listen", "--data", "--suite", "--log-level"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn missing_data_flag_exits_one_and_names_it() {
    let out = Command::new(env!("CARGO_BIN_EXE_synchd"))
        .args(["--listen", "127.0.0.1:0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--data"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn agent_bad_flag_exits_one() {
    let out = Command::new(env!("CARGO_BIN_EXE_agent"))
        .args(["--bogus"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_frame_is_answered_and_connection_survives() {
    let dir = tmp();
    let mut sync = Synchd::start(dir.path());
    let stream = TcpStream::connect(&sync.addr).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    writer.write_all(wire::handshake_line(SUITE_ID).as_bytes()).unwrap();
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    assert_eq!(line, wire::handshake_line(SUITE_ID));

    let read = |reader: &mut BufReader<TcpStream>| {
        let payload = wire::read_frame(reader).unwrap().expect("a response");
        wire::decode(&payload).unwrap()
    };
    wire::write_frame(&mut writer, b"{\"type\":").unwrap();
    match read(&mut reader) {
        Message::Err { code, .. } => assert_eq!(code, ErrorCode::Malformed),
        other => panic!("unexpected {other:?}"),
    }
    wire::write_frame(&mut writer, br#"{"type":"lookup", "user":"alice"}"#).unwrap();
    assert!(matches!(read(&mut reader), Message::Err { code: ErrorCode::NonCanonical | ErrorCode::Malformed, .. }));
    wire::write_message(&mut writer, &Message::Lookup { user: uid("alice") }).unwrap();
    assert!(matches!(read(&mut reader), Message::Err { code: ErrorCode::UnknownUser, .. }));
    assert_eq!(sync.stop(), Some(0));
}

#[test]
fn wrong_suite_is_refused() {
    let dir = tmp();
    let sync = Synchd::start(dir.path());
    assert!(TcpSession::connect(&sync.addr, "some-other-suite").is_err());
}

#[test]
fn state_survives_restart() {
    let dir = tmp();
    let id = Identity::generate(uid("alice"), &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
    let mut sync = Synchd::start(dir.path());
    let mut s = TcpSession::connect(&sync.addr, SUITE_ID).unwrap();
    assert_eq!(s.call(&register(&id)).unwrap(), Message::OkEmpty {});
    drop(s);
    assert_eq!(sync.stop(), Some(0));

    let sync = Synchd::start(dir.path());
    let mut s = TcpSession::connect(&sync.addr, SUITE_ID).unwrap();
    match s.call(&Message::Lookup { user: uid("alice") }).unwrap() {
        Message::OkBundle { sig_public, .. } => assert_eq!(sig_public.0, id.public().sig_public.to_vec()),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn second_instance_on_same_data_is_refused() {
    let dir = tmp();
    let _sync = Synchd::start(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_synchd"))
        .args(["--listen", "127.0.0.1:0", "--data"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn lifecycle_matches_fold_oracle() {
    let dir = tmp();
    let requests = schedule(11, 100);
    let mut oracle = SyncState::default();
    let expected: Vec<Message> = requests.iter().map(|m| oracle.handle(m).response).collect();

    let mut sync = Synchd::start(dir.path());
    let mut s = TcpSession::connect(&sync.addr, SUITE_ID).unwrap();
    for (i, (m, want)) in requests.iter().zip(&expected).enumerate() {
        assert_eq!(&s.call(m).unwrap(), want, "request {i}");
    }
    drop(s);
    assert_eq!(sync.stop(), Some(0));

    let loaded = store::load::<SyncState>(dir.path(), SUITE_ID).unwrap();
    assert_eq!(loaded.state, oracle);
    assert_eq!(std::fs::metadata(dir.path().join(LOG_FILE)).unwrap().len(), 0);
}
