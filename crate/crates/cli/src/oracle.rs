//! Brute-force equivalence suites behind `oracle-check`.
//!
//! Each suite takes the decoder under test as a function so a deliberately
//! broken decoder can be run through the same oracle.

use std::collections::HashMap;

use joint_parse::config::{CharEncoder, Composition, Mode, ModelConfig};
use joint_parse::constituent::{GoldSpans, SpanScores};
use joint_parse::corpus::{Corpus, Example};
use joint_parse::dependency::ArcScores;
use joint_parse::gradcheck::{check_params, primitive_suite};
use joint_parse::model::JointModel;
use joint_parse::treebank::read_bracketed;
use joint_parse::trees::{enumerate_bracketings, enumerate_projective_trees, ChartSpan, ChartTree, DependencyTree};
use joint_parse::vocab::Vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Outcome of one suite; `failures` holds a description per failing case.
#[derive(Clone, Debug, Default)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub failures: Vec<String>,
}

impl SuiteResult {
    fn new(name: &str) -> Self {
        SuiteResult {
            name: name.to_string(),
            ..SuiteResult::default()
        }
    }

    pub fn passed(&self) -> bool {
        self.cases > 0 && self.failures.is_empty()
    }

    fn fail(&mut self, what: String) {
        // a broken decoder fails thousands of cases; keep the report short
        if self.failures.len() < 20 {
            self.failures.push(what);
        } else if self.failures.len() == 20 {
            self.failures.push("...".into());
        }
    }
}

/// Dyadic scores, so every sum the decoders and the oracle form is exact.
/// Odd seeds draw from a coarse grid to force ties.
fn random_score(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    if seed % 2 == 1 {
        rng.gen_range(-2i32..=2) as f64
    } else {
        rng.gen_range(-256i32..=256) as f64 / 64.0
    }
}

fn random_span_scores(n: usize, labels: usize, seed: u64) -> SpanScores {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add((n * 10 + labels) as u64));
    SpanScores::from_fn(n, labels, |_, _, _| random_score(&mut rng, seed))
}

/// Best labeled tree by enumeration. Scores decompose over spans, so for a
/// fixed bracketing the best labeling takes the best label per span (never
/// empty at the root); ties go to the lexicographically smallest split
/// sequence, then the lowest label.
fn brute_force(n: usize, labels: usize, cost: impl Fn(usize, usize, usize) -> f64) -> (ChartTree, f64) {
    let mut best: Option<(ChartTree, f64, Vec<usize>)> = None;
    for mut tree in enumerate_bracketings(n).expect("n within enumeration guard") {
        let mut total = 0.0;
        for s in tree.spans.iter_mut() {
            let first = usize::from(s.start == 0 && s.end == n);
            let (mut bl, mut bs) = (first, cost(s.start, s.end, first));
            for l in first + 1..labels {
                let v = cost(s.start, s.end, l);
                if v > bs {
                    bl = l;
                    bs = v;
                }
            }
            s.label = bl;
            total += bs;
        }
        let splits = tree.split_sequence();
        let better = match &best {
            None => true,
            Some((_, b, bsplits)) => total > *b || (total == *b && splits < *bsplits),
        };
        if better {
            best = Some((tree, total, splits));
        }
    }
    let (tree, total, _) = best.expect("at least one bracketing");
    (tree, total)
}

fn tree_cost(tree: &ChartTree, cost: impl Fn(usize, usize, usize) -> f64) -> f64 {
    tree.spans.iter().map(|s| cost(s.start, s.end, s.label)).sum()
}

fn span_score(scores: &SpanScores, i: usize, j: usize, l: usize) -> f64 {
    if l == 0 {
        0.0
    } else {
        scores.get(i, j, l)
    }
}

/// CKY against enumeration for every n in `1..=max_n` and label count in
/// `label_counts`.
pub fn cky_suite(
    seeds: u64,
    max_n: usize,
    label_counts: &[usize],
    decode: impl Fn(&SpanScores) -> (ChartTree, f64),
) -> SuiteResult {
    let mut out = SuiteResult::new("cky-vs-enumeration");
    for seed in 0..seeds {
        for n in 1..=max_n {
            for &labels in label_counts {
                let scores = random_span_scores(n, labels, seed);
                let cost = |i, j, l| span_score(&scores, i, j, l);
                let (want, want_score) = brute_force(n, labels, cost);
                let (got, got_score) = decode(&scores);
                out.cases += 1;
                if got_score != want_score || tree_cost(&got, cost) != want_score || got != want {
                    out.fail(format!(
                        "seed {seed} n {n} L {labels}: decoder {got_score} {:?}, oracle {want_score} {:?}",
                        got.spans, want.spans
                    ));
                }
            }
        }
    }
    out
}

/// A random gold tree: a random bracketing with a non-empty root label and
/// arbitrary labels elsewhere.
fn random_gold(n: usize, labels: usize, rng: &mut ChaCha8Rng) -> GoldSpans {
    let all = enumerate_bracketings(n).expect("n within enumeration guard");
    let mut tree = all[rng.gen_range(0..all.len())].clone();
    for s in tree.spans.iter_mut() {
        s.label = if s.start == 0 && s.end == n {
            rng.gen_range(1..labels)
        } else {
            rng.gen_range(0..labels)
        };
    }
    let labeled: Vec<ChartSpan> = tree.spans.iter().copied().filter(|s| s.label != 0).collect();
    GoldSpans::new(n, &labeled)
}

/// Loss-augmented decoding against enumeration of `s(T) + Δ(T, T*)`, with
/// Δ counted here from the gold spans directly.
pub fn loss_augmented_suite(
    seeds: u64,
    max_n: usize,
    label_counts: &[usize],
    decode: impl Fn(&SpanScores, &GoldSpans) -> (ChartTree, f64),
) -> SuiteResult {
    let mut out = SuiteResult::new("loss-augmented-vs-enumeration");
    for seed in 0..seeds {
        for n in 1..=max_n {
            for &labels in label_counts {
                let scores = random_span_scores(n, labels, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000 ^ (n * 16 + labels) as u64);
                let gold = random_gold(n, labels, &mut rng);
                let gold_at: HashMap<(usize, usize), usize> =
                    gold.spans().iter().map(|s| ((s.start, s.end), s.label)).collect();
                let cost = |i: usize, j: usize, l: usize| {
                    let g = gold_at.get(&(i, j)).copied().unwrap_or(0);
                    span_score(&scores, i, j, l) + if l == g { 0.0 } else { 1.0 }
                };
                let (want, want_score) = brute_force(n, labels, cost);
                let (got, got_score) = decode(&scores, &gold);
                out.cases += 1;
                if got_score != want_score || tree_cost(&got, cost) != want_score || got != want {
                    out.fail(format!(
                        "seed {seed} n {n} L {labels}: decoder {got_score} {:?}, oracle {want_score} {:?}",
                        got.spans, want.spans
                    ));
                }
            }
        }
    }
    out
}

fn log_softmax_rows(n: usize, raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    raw.iter()
        .enumerate()
        .map(|(d, row)| {
            let live: Vec<f64> = (0..=n).filter(|&h| h != d + 1).map(|h| row[h]).collect();
            let m = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + live.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter().map(|x| x - lse).collect()
        })
        .collect()
}

/// Eisner against enumeration of single-root projective trees, scoring
/// both with the oracle's own log-softmax. Outputs must also be valid
/// projective trees with one root attachment.
pub fn eisner_suite(seeds: u64, max_n: usize, decode: impl Fn(&ArcScores) -> Vec<usize>) -> SuiteResult {
    let mut out = SuiteResult::new("eisner-vs-enumeration");
    let trees: Vec<Vec<DependencyTree>> = (0..=max_n)
        .map(|n| enumerate_projective_trees(n).expect("n within enumeration guard"))
        .collect();
    for seed in 0..seeds {
        for n in 1..=max_n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(n as u64));
            let raw: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..=n).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let lp = log_softmax_rows(n, &raw);
            let total = |heads: &[usize]| -> f64 { heads.iter().enumerate().map(|(d, &h)| lp[d][h]).sum() };
            let want = trees[n]
                .iter()
                .map(|t| total(&t.heads))
                .fold(f64::NEG_INFINITY, f64::max);
            let scores = ArcScores::from_fn(n, |d, h| raw[d - 1][h]);
            let got = decode(&scores);
            out.cases += 1;
            let tree = DependencyTree::unlabeled(got.clone());
            let roots = got.iter().filter(|&&h| h == 0).count();
            if got.len() != n || tree.validate().is_err() || !tree.is_projective() || roots != 1 {
                out.fail(format!("seed {seed} n {n}: invalid output {got:?}"));
            } else if total(&got) != want {
                out.fail(format!("seed {seed} n {n}: decoder total {} vs oracle {want}", total(&got)));
            }
        }
    }
    out
}

/// Primitive checks at `PRIMITIVE_TOLERANCE` over `seeds` input draws.
pub fn primitive_gradient_suite(seeds: u64) -> SuiteResult {
    let mut out = SuiteResult::new("gradient-primitives");
    for seed in 0..seeds {
        for (name, report) in primitive_suite(seed) {
            out.cases += 1;
            if !report.passes(PRIMITIVE_TOLERANCE) {
                out.fail(format!("seed {seed} {name}: max rel err {:e} at {:?}", report.max_rel_err, report.worst));
            }
        }
    }
    out
}

const GRAD_TREE: &str = "(S (NP (DT the) (NN dog)) (VP (VBD barked)))";

/// The 3-token sentence and small model the joint-loss checks run on.
/// Seeds alternate between char encoders and composition modes.
pub fn tiny_model(seed: u64) -> (JointModel, Example) {
    let (sentence, tree) = read_bracketed(GRAD_TREE).expect("valid tree").remove(0);
    let deps = DependencyTree::new(vec![2, 3, 0], vec!["det".into(), "nsubj".into(), "root".into()]);
    let example = Example::new(sentence, Some(tree), Some(deps));
    let corpus = Corpus::new(vec![example.clone()]);
    let vocab = Vocabulary::build(&corpus, 1).expect("vocabulary");
    let config = ModelConfig {
        use_pos: true,
        char_encoder: if seed % 2 == 0 { CharEncoder::Lstm } else { CharEncoder::Cnn },
        composition: if seed % 4 < 2 { Composition::Sum } else { Composition::Concat },
        d_word: 4,
        d_pos: 4,
        d_char_emb: 4,
        d_char_out: 4,
        char_cnn_widths: vec![2, 3],
        d_model: 8,
        max_len: 16,
        total_layers: 2,
        shared_layers: 1,
        heads: 2,
        d_ff: 8,
        span_hidden: 6,
        d_arc: 6,
        d_label: 4,
        ..ModelConfig::default()
    };
    let model = JointModel::new(&config, vocab, None, seed).expect("model");
    (model, example)
}

/// Finite differences through `J1 + lambda * J2` for every parameter
/// tensor, `per_param` sampled entries each.
pub fn model_gradient_suite(seeds: u64, per_param: usize) -> SuiteResult {
    let mut out = SuiteResult::new("gradient-joint-loss");
    for seed in 0..seeds {
        let (model, example) = tiny_model(seed);
        let inst = model.prepare(&example, Mode::Joint).expect("instance");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grad = model
            .sentence_grad(&inst, Mode::Joint, 1.0, false, &mut rng)
            .expect("gradient");
        let mut store = model.store().clone();
        let report = check_params(
            &mut store,
            &grad.grads,
            |s| model.eval_loss_with(s, &inst, Mode::Joint, 1.0).expect("loss"),
            Some(per_param),
            seed,
        );
        out.cases += 1;
        if !report.passes(MODEL_TOLERANCE) {
            out.fail(format!("seed {seed}: max rel err {:e} at {:?}", report.max_rel_err, report.worst));
        }
    }
    out
}
