mod common;

use common::{brute_knn_mean, random_archive, random_unit, record, tiny_layout, unit, BACKEND};
use ee_core::archive::{Archive, Origin};
use ee_core::rng::rng_from_seed;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn knn_novelty_matches_brute_force() {
    let archive = random_archive(500, 16, 10, 1);
    let mut rng = rng_from_seed(2);
    for q in 0..50 {
        let query = random_unit(&mut rng, 16);
        let fast = archive.novelty(&query, 10).unwrap();
        let oracle = brute_knn_mean(&archive, query.vector(), 10, None);
        assert!((fast - oracle).abs() < 1e-9, "query {q}: {fast} vs {oracle}");
    }
    for id in (0..500).step_by(10) {
        let own = archive.records()[id].embedding.vector().to_vec();
        for k in [10, 3] {
            let fast = archive.novelty_of(id, k).unwrap();
            let oracle = brute_knn_mean(&archive, &own, k, Some(id));
            assert!((fast - oracle).abs() < 1e-9, "record {id}, k={k}");
        }
    }
}

#[test]
fn cached_neighbor_lists_match_a_full_scan() {
    let archive = random_archive(300, 8, 10, 3);
    for r in archive.records() {
        let mut all: Vec<(f64, usize)> = archive
            .records()
            .iter()
            .filter(|o| o.id != r.id)
            .map(|o| ((1.0 - r.embedding.dot(&o.embedding)).clamp(0.0, 2.0), o.id))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(10);
        let cached = archive.neighbors_of(r.id);
        assert_eq!(cached.len(), all.len());
        for (c, o) in cached.iter().zip(&all) {
            assert_eq!(c.1, o.1);
            assert!((c.0 - o.0).abs() < 1e-12);
        }
    }
}

#[test]
fn nearest_to_matches_brute_force_argmin() {
    let archive = random_archive(1000, 12, 10, 4);
    let mut rng = rng_from_seed(5);
    for _ in 0..100 {
        let goal = random_unit(&mut rng, 12);
        let (best, dist) = archive.nearest_to(&goal).unwrap();
        let mut oracle = (0, f64::INFINITY);
        for r in archive.records() {
            let d = (1.0 - r.embedding.dot(&goal)).clamp(0.0, 2.0);
            if d < oracle.1 {
                oracle = (r.id, d);
            }
        }
        assert_eq!(best.id, oracle.0);
        assert!((dist - oracle.1).abs() < 1e-12);
    }
}

#[test]
fn a_stored_embedding_is_its_own_nearest_record() {
    let archive = random_archive(200, 12, 10, 6);
    for id in [0, 57, 199] {
        let goal = archive.records()[id].embedding.clone();
        let (best, dist) = archive.nearest_to(&goal).unwrap();
        assert_eq!(best.id, id);
        assert!(dist.abs() < 1e-12);
    }
}

#[test]
fn uniform_selection_when_alpha_is_zero() {
    let archive = random_archive(100, 8, 10, 8);
    let mut rng = rng_from_seed(9);
    let draws = 100_000;
    let mut counts = [0usize; 100];
    for _ in 0..draws {
        counts[archive.sample_high_novelty_with(1, 0.0, &mut rng).unwrap()[0]] += 1;
    }
    let expected = draws as f64 / 100.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(99.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 = {chi2}, p = {p}");
}

#[test]
fn selection_odds_follow_novelty_to_the_fourth() {
    // Two isolated records with novelty 0.1 and 0.2; their duplicated
    // neighbors have novelty 0 and are never drawn.
    let s = 0.19f64.sqrt();
    let points = [
        [1.0, 0.0, 0.0, 0.0],
        [0.9, s, 0.0, 0.0],
        [0.9, s, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.8, 0.6],
        [0.0, 0.0, 0.8, 0.6],
    ];
    let mut archive = Archive::new(BACKEND, 4, tiny_layout(), 1);
    for (i, p) in points.iter().enumerate() {
        archive.insert(record(Origin::Seed, None, unit(p), i)).unwrap();
    }
    let nov = archive.novelty_scores();
    assert!((nov[0] - 0.1).abs() < 1e-12 && (nov[3] - 0.2).abs() < 1e-12);
    let mut rng = rng_from_seed(10);
    let (mut low, mut high) = (0usize, 0usize);
    for _ in 0..100_000 {
        match archive.sample_high_novelty_with(1, 4.0, &mut rng).unwrap()[0] {
            0 => low += 1,
            3 => high += 1,
            other => panic!("drew zero-novelty record {other}"),
        }
    }
    let ratio = high as f64 / low as f64;
    assert!((ratio / 16.0 - 1.0).abs() < 0.05, "ratio {ratio}");
}

#[test]
fn archives_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let empty = Archive::new(BACKEND, 8, tiny_layout(), 10);
    empty.save(dir.path(), serde_json::json!({})).unwrap();
    let (back, manifest) = Archive::load(dir.path()).unwrap();
    assert!(back.is_empty());
    assert_eq!(manifest.record_count, 0);

    let mut archive = random_archive(999, 32, 10, 11);
    let parent = archive.len() - 1;
    archive
        .insert(record(Origin::Expansion, Some(parent), random_unit(&mut rng_from_seed(1), 32), 1000))
        .unwrap();
    archive.save(dir.path(), serde_json::json!({ "note": "x" })).unwrap();
    let (back, manifest) = Archive::load(dir.path()).unwrap();
    assert_eq!(manifest.record_count, 1000);
    assert_eq!(back.records(), archive.records());
    for r in back.records() {
        assert_eq!(back.neighbors_of(r.id), archive.neighbors_of(r.id));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn duplicating_a_record_never_raises_novelty(seed in any::<u64>(), pick in 0usize..40) {
        let mut archive = random_archive(40, 6, 5, seed);
        let before = archive.novelty_scores();
        let copy = archive.records()[pick].embedding.clone();
        archive.insert(record(Origin::Seed, None, copy, 41)).unwrap();
        let after = archive.novelty_scores();
        for (b, a) in before.iter().zip(&after) {
            prop_assert!(a <= b);
        }
        prop_assert!(after[pick] < before[pick] || before[pick] == 0.0);
    }

    #[test]
    fn sampled_ids_are_distinct(seed in any::<u64>(), n in 1usize..30, alpha in 0.0f64..8.0) {
        let archive = random_archive(25, 6, 5, seed);
        let ids = archive.sample_high_novelty(n, alpha, seed).unwrap();
        prop_assert_eq!(ids.len(), n.min(25));
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), ids.len());
    }
}
