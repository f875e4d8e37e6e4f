use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use dlsm::{Db, FaultInjector, Options, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STRATEGIES: [Strategy; 4] = [Strategy::Dlsm, Strategy::Lsm, Strategy::SteppedMerge, Strategy::Leveled];
const UNIVERSE: u64 = 1_500;

fn small(strategy: Strategy, faults: Arc<FaultInjector>) -> Options {
    Options {
        strategy,
        size_ratio: 4,
        levels: 3,
        level0_capacity: 32 << 10,
        table_size: 8 << 10,
        cache_capacity: 128 << 10,
        faults,
        ..Options::default()
    }
}

fn key(i: u64) -> Vec<u8> {
    format!("user{:06}", (i * 7919) % 10_007).into_bytes()
}

fn value(i: u64, n: u64) -> Vec<u8> {
    let mut v = format!("{i}:{n}:").into_bytes();
    v.resize(80, b'.');
    v
}

fn sst_files(dir: &Path) -> HashSet<u64> {
    std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().into_string().unwrap();
            name.strip_suffix(".sst")?.parse().ok()
        })
        .collect()
}

/// Applies random writes until one fails. Returns the key whose fate is
/// unknown (its write was not acknowledged) with the value it would have.
fn write_until_failure(
    db: &Db,
    oracle: &mut BTreeMap<Vec<u8>, Vec<u8>>,
    rng: &mut ChaCha8Rng,
    ops: u64,
) -> Option<(Vec<u8>, Option<Vec<u8>>)> {
    for n in 0..ops {
        let i = rng.gen_range(0..UNIVERSE);
        let k = key(i);
        if rng.gen_bool(0.15) {
            if db.delete(&k).is_err() {
                return Some((k, None));
            }
            oracle.remove(&k);
        } else {
            let v = value(i, n);
            if db.put(&k, &v).is_err() {
                return Some((k, Some(v)));
            }
            oracle.insert(k, v);
        }
    }
    None
}

fn check(db: &Db, oracle: &BTreeMap<Vec<u8>, Vec<u8>>, unknown: &Option<(Vec<u8>, Option<Vec<u8>>)>, case: u64) {
    for i in 0..UNIVERSE {
        let k = key(i);
        let got = db.get(&k).unwrap();
        let want = oracle.get(&k).cloned();
        match unknown {
            Some((uk, uv)) if *uk == k => {
                assert!(got == want || got == *uv, "case {case}: unacknowledged key has a third value");
            }
            _ => assert_eq!(got, want, "case {case}: key {}", String::from_utf8_lossy(&k)),
        }
    }
}

fn ops_needed(strategy: Strategy, ops: u64) -> u64 {
    let dir = tempfile::tempdir().unwrap();
    let faults = Arc::new(FaultInjector::fail_after(1 << 40));
    let db = Db::open(dir.path(), small(strategy, Arc::clone(&faults))).unwrap();
    let before = faults.observed();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(write_until_failure(&db, &mut BTreeMap::new(), &mut rng, ops).is_none());
    faults.observed() - before
}

#[test]
fn fifty_random_kill_points() {
    const OPS: u64 = 4_000;
    let budgets: Vec<u64> = STRATEGIES.iter().map(|&s| ops_needed(s, OPS)).collect();
    let mut picker = ChaCha8Rng::seed_from_u64(2024);
    let mut tripped = 0;
    for case in 0..50u64 {
        let s = STRATEGIES[case as usize % STRATEGIES.len()];
        let dir = tempfile::tempdir().unwrap();
        let mut oracle = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(case);

        // some history written cleanly, then a faulty session
        {
            let db = Db::open(dir.path(), small(s, Arc::new(FaultInjector::disabled()))).unwrap();
            assert!(write_until_failure(&db, &mut oracle, &mut rng, 2_000).is_none());
        }
        let kill_at = picker.gen_range(1..=budgets[case as usize % STRATEGIES.len()]);
        let faults = Arc::new(FaultInjector::fail_after(kill_at));
        let unknown = match Db::open(dir.path(), small(s, Arc::clone(&faults))) {
            Ok(db) => {
                let u = write_until_failure(&db, &mut oracle, &mut rng, OPS);
                db.crash();
                u
            }
            Err(_) => None,
        };
        tripped += faults.tripped() as u32;

        let db = Db::open(dir.path(), small(s, Arc::new(FaultInjector::disabled()))).unwrap();
        check(&db, &oracle, &unknown, case);
        assert_eq!(db.live_files(), sst_files(dir.path()), "case {case}: stray or missing table files");
        db.flush().unwrap();
        let live = db.live_files();
        drop(db);

        // replaying the manifest from scratch lands on the same file set
        let db = Db::open(dir.path(), small(s, Arc::new(FaultInjector::disabled()))).unwrap();
        assert_eq!(db.live_files(), live, "case {case}: manifest replay changed the file set");
        assert_eq!(sst_files(dir.path()), live, "case {case}");
        check(&db, &oracle, &unknown, case);
    }
    assert!(tripped >= 45, "only {tripped} sessions hit their kill point");
}

#[test]
fn torn_wal_tail_is_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let faults = Arc::new(FaultInjector::fail_after(1 << 40));
    let db = Db::open(dir.path(), small(Strategy::Dlsm, Arc::clone(&faults))).unwrap();
    let start = faults.observed();
    drop(db);
    // the open itself ticks a few times; leave room for 100 appends
    let faults = Arc::new(FaultInjector::fail_after(start + 100));
    let db = Db::open(dir.path(), small(Strategy::Dlsm, Arc::clone(&faults))).unwrap();
    let mut acked = 0;
    for i in 0..200u64 {
        if db.put(&key(i), &value(i, 0)).is_err() {
            break;
        }
        acked += 1;
    }
    assert!(db.is_poisoned());
    assert!(db.put(b"x", b"y").is_err());
    db.crash();
    let db = Db::open(dir.path(), small(Strategy::Dlsm, Arc::new(FaultInjector::disabled()))).unwrap();
    for i in 0..acked {
        assert_eq!(db.get(&key(i)).unwrap(), Some(value(i, 0)));
    }
    assert_eq!(db.get(&key(acked)).unwrap(), None);
}

#[test]
fn missing_table_refuses_to_open() {
    let dir = tempfile::tempdir().unwrap();
    {
        let db = Db::open(dir.path(), small(Strategy::Lsm, Arc::new(FaultInjector::disabled()))).unwrap();
        for i in 0..2_000 {
            db.put(&key(i), &value(i, 0)).unwrap();
        }
        db.flush().unwrap();
    }
    let victim = *sst_files(dir.path()).iter().next().unwrap();
    std::fs::remove_file(dir.path().join(format!("{victim:06}.sst"))).unwrap();
    assert!(Db::open(dir.path(), small(Strategy::Lsm, Arc::new(FaultInjector::disabled()))).is_err());
}

#[test]
fn repeated_crashes_keep_buffer_segments_apart() {
    let dir = tempfile::tempdir().unwrap();
    let mut oracle = BTreeMap::new();
    for round in 0..4u64 {
        let db = Db::open(dir.path(), small(Strategy::Dlsm, Arc::new(FaultInjector::disabled()))).unwrap();
        for i in 0..200 {
            let k = key(i * 3 + round);
            db.put(&k, &value(i, round)).unwrap();
            oracle.insert(k, value(i, round));
        }
        db.crash();
    }
    let db = Db::open(dir.path(), small(Strategy::Dlsm, Arc::new(FaultInjector::disabled()))).unwrap();
    db.version().check(db.options()).unwrap();
    for (k, v) in &oracle {
        assert_eq!(db.get(k).unwrap().as_ref(), Some(v));
    }
}
