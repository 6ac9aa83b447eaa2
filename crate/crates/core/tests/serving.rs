mod common;

use forge_core::pet::relevance_score;
use forge_core::serving::{batch_score, pair_key, RelevanceService, Snapshot, Tier};

#[test]
fn thousand_pair_batch_equals_per_pair_scoring() {
    let fx = common::serving_fixture();
    assert!(fx.pairs.len() >= 1000, "{} pairs", fx.pairs.len());
    let pairs = &fx.pairs[..1000];
    let (snap, stats) = batch_score(&fx.model, &fx.prompt, &fx.vocab, &fx.catalog, pairs, common::meta("b")).unwrap();
    assert_eq!(stats.requested, 1000);
    assert_eq!(stats.duplicates, 0);
    assert_eq!(snap.len(), 1000);
    for (q, i) in pairs {
        let want = relevance_score(&fx.model, &fx.prompt, &fx.vocab, q, fx.catalog.get(i).unwrap()).unwrap();
        assert_eq!(snap.get(q, i).unwrap().to_bits(), want.score.to_bits());
    }
}

#[test]
fn snapshot_round_trips_and_rejects_corruption() {
    let snap = Snapshot::new(common::meta("r"), [(pair_key("a", "b"), 0.5), (pair_key("c", "d"), 0.25)]).unwrap();
    let bytes = snap.to_bytes().unwrap();
    assert_eq!(Snapshot::from_bytes(&bytes).unwrap(), snap);
    let mut bad = bytes.clone();
    *bad.last_mut().unwrap() ^= 1;
    assert!(Snapshot::from_bytes(&bad).is_err());
    assert!(Snapshot::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn failed_swap_keeps_live_snapshot() {
    let svc = RelevanceService::new(Snapshot::empty("live"), Box::new(common::ConstScorer(0.5)));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.snap");
    std::fs::write(&path, b"not a snapshot").unwrap();
    assert!(svc.swap_from_path(&path).is_err());
    assert_eq!(svc.snapshot().version(), "live");
}

#[test]
fn tiers_and_hit_rate() {
    assert_eq!(common::replay_hit_rate().unwrap(), 0.60);
    let svc = RelevanceService::new(Snapshot::empty("e"), Box::new(common::ConstScorer(0.4)));
    let r = svc.score_with_fallback("q", "i").unwrap();
    assert_eq!(r.tier, Tier::Online);
    assert!(!r.relevant());
}

#[test]
fn concurrent_readers_never_see_mixed_versions() {
    let (reads, swaps) = common::swap_stress(100).unwrap();
    assert_eq!(swaps, 100);
    assert!(reads > 0);
}

#[test]
fn serving_criterion() {
    let detail = common::criterion_serving().unwrap();
    println!("{detail}");
}
