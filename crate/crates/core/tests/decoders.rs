use joint_parse::constituent::{cky_decode, loss_augmented_decode, GoldSpans, SpanScores};
use joint_parse::dependency::{eisner_decode, ArcScores};
use joint_parse::trees::{enumerate_constituent_trees, validate_projective, DependencyTree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_arcs(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..=n).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect()
}

#[test]
fn eisner_always_returns_a_single_rooted_projective_tree() {
    for seed in 0..500 {
        let n = 1 + (seed as usize % 30);
        let raw = random_arcs(n, seed);
        let heads = eisner_decode(&ArcScores::from_fn(n, |d, h| raw[d - 1][h]));
        let tree = DependencyTree::unlabeled(heads.clone());
        assert_eq!(heads.len(), n);
        assert!(tree.validate().is_ok(), "seed {seed}: {heads:?}");
        assert!(validate_projective(&tree), "seed {seed}: {heads:?}");
        assert_eq!(heads.iter().filter(|&&h| h == 0).count(), 1);
    }
}

#[test]
fn eisner_ignores_per_dependent_shifts() {
    // the per-row log-softmax cancels any constant added to a dependent's row
    for seed in 0..100 {
        let n = 2 + (seed as usize % 12);
        let raw = random_arcs(n, seed);
        let base = eisner_decode(&ArcScores::from_fn(n, |d, h| raw[d - 1][h]));
        let shifted = eisner_decode(&ArcScores::from_fn(n, |d, h| raw[d - 1][h] + 3.0 * d as f64 - 7.0));
        assert_eq!(base, shifted, "seed {seed}");
    }
}

#[test]
fn cky_matches_full_labeled_enumeration() {
    for seed in 0..60 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1 + seed as usize % 4;
        let labels = 2 + seed as usize % 2;
        let scores = SpanScores::from_fn(n, labels, |_, _, _| rng.gen_range(-8i32..=8) as f64 / 4.0);
        let (tree, score) = cky_decode(&scores);
        let best = enumerate_constituent_trees(n, labels)
            .unwrap()
            .map(|t| scores.tree_score(&t))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(score, best, "seed {seed}");
        assert_eq!(scores.tree_score(&tree), best);
    }
}

#[test]
fn loss_augmented_decode_never_scores_below_gold() {
    // with Δ(T*, T*) = 0 the augmented maximum is at least s(T*)
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1 + seed as usize % 8;
        let scores = SpanScores::from_fn(n, 4, |_, _, _| rng.gen_range(-2.0..2.0));
        let (gold_tree, _) = cky_decode(&SpanScores::from_fn(n, 4, |_, _, _| rng.gen_range(-2.0..2.0)));
        let labeled: Vec<_> = gold_tree.labeled().copied().collect();
        let gold = GoldSpans::new(n, &labeled);
        let (_, aug) = loss_augmented_decode(&scores, &gold);
        assert!(aug >= gold.score(&scores) - 1e-12, "seed {seed}");
    }
}
