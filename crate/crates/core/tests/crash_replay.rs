mod common;

use common::*;
use dossier_sync::store::{self, Durability, LOG_FILE, SNAPSHOT_FILE};
use dossier_sync::synchronizer::SyncService;
use dossier_sync::{SyncState, SUITE_ID};
use proptest::prelude::*;

#[test]
fn every_prefix_recovers() {
    for seed in 100..110 {
        let o = crash_replay(seed, 120).unwrap();
        assert!(o.prefixes > 10, "seed {seed}: only {} prefixes", o.prefixes);
    }
}

/// Writes a log from `requests` and returns its bytes and the folded state
/// after each record.
fn logged(requests: usize, seed: u64) -> (Vec<u8>, Vec<u8>, Vec<SyncState>) {
    let dir = tmp();
    let svc = SyncService::open_with(dir.path(), SUITE_ID, Durability::Process).unwrap();
    let mut states = vec![SyncState::default()];
    let mut fold = SyncState::default();
    for m in schedule(seed, requests) {
        if fold.handle(&m).mutated {
            states.push(fold.clone());
        }
        svc.dispatch(&m);
    }
    drop(svc);
    let log = std::fs::read(dir.path().join(LOG_FILE)).unwrap();
    let snap = std::fs::read(dir.path().join(SNAPSHOT_FILE)).unwrap_or_default();
    (snap, log, states)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Cutting the log at any byte recovers the state after the last whole
    /// record and reports a torn tail exactly when the cut is mid-record.
    #[test]
    fn torn_tail_recovers_last_whole_record(seed in 0u64..1000, cut in 0.0f64..1.0) {
        let (snap, log, states) = logged(60, seed);
        let bounds = frame_boundaries(&log);
        prop_assert_eq!(bounds.len(), states.len());
        let at = (log.len() as f64 * cut) as usize;
        let dir = tmp();
        if !snap.is_empty() {
            std::fs::write(dir.path().join(SNAPSHOT_FILE), &snap).unwrap();
        }
        std::fs::write(dir.path().join(LOG_FILE), &log[..at]).unwrap();
        let whole = bounds.iter().filter(|&&b| b <= at).count() - 1;
        let loaded = store::load::<SyncState>(dir.path(), SUITE_ID).unwrap();
        prop_assert_eq!(&loaded.state, &states[whole]);
        prop_assert_eq!(loaded.torn_tail, !bounds.contains(&at));
        prop_assert_eq!(loaded.log_len as usize, bounds[whole]);

        // opening for writing truncates the tail and keeps appending cleanly
        let svc = SyncService::open_with(dir.path(), SUITE_ID, Durability::Process).unwrap();
        prop_assert_eq!(svc.state(), states[whole].clone());
        drop(svc);
        let log_after = std::fs::read(dir.path().join(LOG_FILE)).unwrap();
        prop_assert_eq!(log_after.len(), bounds[whole]);
    }
}

#[test]
fn snapshot_then_log_replays() {
    let dir = tmp();
    let requests = schedule(42, 150);
    let mut fold = SyncState::default();
    let svc = SyncService::open_with(dir.path(), SUITE_ID, Durability::Process).unwrap();
    for (i, m) in requests.iter().enumerate() {
        fold.handle(m);
        svc.dispatch(m);
        if i == 70 {
            svc.save().unwrap();
        }
    }
    drop(svc);
    let loaded = store::load::<SyncState>(dir.path(), SUITE_ID).unwrap();
    assert_eq!(loaded.state, fold);
    assert!(!loaded.torn_tail);
}
