use cirbench_core::metrics::{
    composite_score, map_at_k, rank_candidates, recall_at_k, round2, theoretical_random, CompositeSpec, MetricKey,
    MetricReport, DEFAULT_KS, DEFAULT_SUBSET_KS,
};
use cirbench_core::ImageId;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn id(s: impl Into<String>) -> ImageId {
    ImageId::new(s).unwrap()
}

#[test]
fn theoretical_random_subset_values() {
    assert_eq!(theoretical_random(5, 1).unwrap(), 20.0);
    assert_eq!(theoretical_random(5, 2).unwrap(), 40.0);
    assert_eq!(theoretical_random(5, 3).unwrap(), 60.0);
    assert!(theoretical_random(5, 0).is_err());
    assert!(theoretical_random(5, 6).is_err());
}

#[test]
fn empirical_random_subset_recall_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 20_000;
    let ranks: Vec<Option<usize>> = (0..n)
        .map(|_| {
            let mut pool: Vec<usize> = (0..5).collect();
            pool.shuffle(&mut rng);
            pool.iter().position(|&c| c == 0).map(|p| p + 1)
        })
        .collect();
    for k in 1..=3 {
        let r = recall_at_k(&ranks, k).unwrap();
        assert!((r - 20.0 * k as f64).abs() <= 2.0, "K={k}: {r}");
    }
}

#[test]
fn map_at_1_equals_recall_at_1() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let pool = rng.random_range(1..100);
        let ranks: Vec<Option<usize>> = (0..n)
            .map(|_| rng.random_bool(0.9).then(|| rng.random_range(1..=pool)))
            .collect();
        assert_eq!(map_at_k(&ranks, 1).unwrap(), recall_at_k(&ranks, 1).unwrap());
        let mut prev = 0.0;
        for k in 1..=pool {
            let r = recall_at_k(&ranks, k).unwrap();
            assert!(r >= prev);
            prev = r;
        }
    }
}

#[test]
fn composite_of_table_row() {
    let mut report = MetricReport::from_gold_ranks(&[], &[], &DEFAULT_KS, &DEFAULT_SUBSET_KS, &CompositeSpec::cirr()).unwrap();
    report.recall.insert(5, 52.55);
    report.recall_subset.insert(1, 39.20);
    let c = composite_score(&report, &CompositeSpec::cirr()).unwrap();
    assert_eq!(round2(c), 45.88);
}

#[test]
fn composite_needs_every_metric() {
    let report = MetricReport::from_gold_ranks(&[Some(1)], &[], &DEFAULT_KS, &DEFAULT_SUBSET_KS, &CompositeSpec::cirr()).unwrap();
    assert!(report.composite.is_none());
    assert!(composite_score(&report, &CompositeSpec::cirr()).is_err());
}

#[test]
fn ranking_breaks_ties_by_id() {
    let q = [0.0, 0.0];
    let a = [1.0, 0.0];
    let b = [0.0, 1.0];
    let c = [0.5, 0.0];
    let pool: Vec<(ImageId, &[f64])> = vec![(id("b"), &b), (id("a"), &a), (id("c"), &c)];
    let r = rank_candidates(7, &q, &pool, Some(&id("a"))).unwrap();
    let order: Vec<&str> = r.candidates.iter().map(|c| c.as_str()).collect();
    assert_eq!(order, ["c", "a", "b"]);
    assert_eq!(r.gold_rank, Some(2));
}

#[test]
fn ranking_errors() {
    let q = [0.0, 0.0];
    assert!(rank_candidates(1, &q, &[], None).is_err());
    let short = [1.0];
    assert!(rank_candidates(1, &q, &[(id("a"), &short)], None).is_err());
}

#[test]
fn metric_keys_round_trip() {
    for key in [MetricKey::Recall(5), MetricKey::RecallSubset(1), MetricKey::Map(50), MetricKey::MapSubset(3)] {
        assert_eq!(key.to_string().parse::<MetricKey>().unwrap(), key);
    }
    assert!("R@x".parse::<MetricKey>().is_err());
}

#[test]
fn rounding_is_half_up() {
    assert_eq!(round2(45.875), 45.88);
    assert_eq!(round2(1.005), 1.01);
    assert_eq!(round2(20.0), 20.0);
    assert_eq!(round2(14.6149), 14.61);
}

proptest! {
    #[test]
    fn recall_bounds_and_monotonicity(ranks in prop::collection::vec(prop::option::of(1usize..60), 1..300)) {
        let mut prev = 0.0;
        for k in [1, 2, 3, 5, 10, 50] {
            let r = recall_at_k(&ranks, k).unwrap();
            let m = map_at_k(&ranks, k).unwrap();
            prop_assert!((0.0..=100.0).contains(&r));
            prop_assert!(m <= r + 1e-9);
            prop_assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn rank_is_permutation_of_pool(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ids: Vec<ImageId> = (0..n).map(|i| id(format!("x{i}"))).collect();
        let pool: Vec<(ImageId, &[f64])> = ids.iter().cloned().zip(feats.iter().map(|f| f.as_slice())).collect();
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rank_candidates(0, &q, &pool, Some(&ids[0])).unwrap();
        let mut sorted = r.candidates.clone();
        sorted.sort();
        let mut expected = ids.clone();
        expected.sort();
        prop_assert_eq!(sorted, expected);
        prop_assert!(r.gold_rank.is_some());
    }
}
