//! Span scoring, CKY decoding and the structured hinge loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::trees::{ChartSpan, ChartTree, ConstituentTree, EMPTY_LABEL};
use crate::vocab::Vocabulary;

/// Dense `s(i, j, label)` for fenceposts `0 <= i < j <= n`, label 0 being
/// the empty label whose score is always zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanScores {
    n: usize,
    num_labels: usize,
    data: Vec<f64>,
}

impl SpanScores {
    pub fn zeros(n: usize, num_labels: usize) -> Self {
        SpanScores {
            n,
            num_labels,
            data: vec![0.0; (n + 1) * (n + 1) * num_labels],
        }
    }

    /// Builds scores from `f(i, j, label)` for non-empty labels.
    pub fn from_fn(n: usize, num_labels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut s = SpanScores::zeros(n, num_labels);
        for i in 0..n {
            for j in i + 1..=n {
                for l in 1..num_labels {
                    s.set(i, j, l, f(i, j, l));
                }
            }
        }
        s
    }

    /// Scores from the `[num_spans, num_labels - 1]` matrix produced by
    /// [`SpanScorer::forward`], rows ordered as in [`span_list`].
    pub fn from_matrix(n: usize, num_labels: usize, values: &[f64]) -> Self {
        let width = num_labels - 1;
        let spans = span_list(n);
        assert_eq!(values.len(), spans.len() * width);
        let mut s = SpanScores::zeros(n, num_labels);
        for (row, &(i, j)) in spans.iter().enumerate() {
            for l in 1..num_labels {
                s.set(i, j, l, values[row * width + l - 1]);
            }
        }
        s
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn idx(&self, i: usize, j: usize, l: usize) -> usize {
        (i * (self.n + 1) + j) * self.num_labels + l
    }

    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.data[self.idx(i, j, l)]
    }

    /// Sets a non-empty label score; the empty label stays at zero.
    pub fn set(&mut self, i: usize, j: usize, l: usize, v: f64) {
        assert!(l != EMPTY_LABEL, "the empty label score is fixed at zero");
        let k = self.idx(i, j, l);
        self.data[k] = v;
    }

    pub fn tree_score(&self, tree: &ChartTree) -> f64 {
        tree.score(|i, j, l| self.get(i, j, l))
    }
}

/// All spans `(i, j)` with `0 <= i < j <= n`, ordered by `i` then `j`.
pub fn span_list(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i + 1..=n {
            out.push((i, j));
        }
    }
    out
}

/// Row of span `(i, j)` in [`span_list`] order.
pub fn span_row(n: usize, i: usize, j: usize) -> usize {
    // rows before start i: sum over a < i of (n - a)
    i * n - i * i.saturating_sub(1) / 2 + (j - i - 1)
}

/// Gold labels per span; the empty label where the gold tree has no
/// constituent.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldSpans {
    n: usize,
    labels: Vec<usize>,
    spans: Vec<ChartSpan>,
}

impl GoldSpans {
    pub fn new(n: usize, spans: &[ChartSpan]) -> Self {
        let mut labels = vec![EMPTY_LABEL; (n + 1) * (n + 1)];
        for s in spans {
            assert!(s.start < s.end && s.end <= n, "gold span out of range");
            labels[s.start * (n + 1) + s.end] = s.label;
        }
        GoldSpans {
            n,
            labels,
            spans: spans.to_vec(),
        }
    }

    /// Maps a gold tree's collapsed spans to label ids.
    pub fn from_tree(tree: &ConstituentTree, vocab: &Vocabulary) -> Result<Self> {
        let n = tree.len();
        let mut spans = Vec::new();
        for s in tree.to_labeled_spans() {
            let label = vocab
                .label_id(&s.label)
                .ok_or_else(|| Error::Data(format!("constituent label {} not in vocabulary", s.label)))?;
            spans.push(ChartSpan {
                start: s.start,
                end: s.end,
                label,
            });
        }
        if !spans.iter().any(|s| s.start == 0 && s.end == n) {
            return Err(Error::Data("gold tree has no labeled root span".into()));
        }
        Ok(GoldSpans::new(n, &spans))
    }

    pub fn label(&self, i: usize, j: usize) -> usize {
        self.labels[i * (self.n + 1) + j]
    }

    pub fn spans(&self) -> &[ChartSpan] {
        &self.spans
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `s(T*)`: the sum of gold span scores.
    pub fn score(&self, scores: &SpanScores) -> f64 {
        self.spans.iter().map(|s| scores.get(s.start, s.end, s.label)).sum()
    }
}

/// Exact CKY over binary trees. At every span the label is the highest
/// scoring one (the root may not take the empty label); ties prefer the
/// smaller split point, then the lower label id.
pub fn cky_decode(scores: &SpanScores) -> (ChartTree, f64) {
    cky_with(scores, |i, j, l| scores.get(i, j, l))
}

fn cky_with(scores: &SpanScores, score: impl Fn(usize, usize, usize) -> f64) -> (ChartTree, f64) {
    let n = scores.n();
    let num_labels = scores.num_labels();
    assert!(n >= 1 && num_labels >= 2, "need at least one word and one label");
    let w = n + 1;
    let mut best = vec![0.0; w * w];
    let mut label = vec![EMPTY_LABEL; w * w];
    let mut split = vec![0usize; w * w];
    for len in 1..=n {
        for i in 0..=n - len {
            let j = i + len;
            let first = if i == 0 && j == n { 1 } else { 0 };
            let mut best_l = first;
            let mut best_s = score(i, j, first);
            for l in first + 1..num_labels {
                let s = score(i, j, l);
                if s > best_s {
                    best_s = s;
                    best_l = l;
                }
            }
            let mut inner = 0.0;
            if len > 1 {
                let mut best_k = i + 1;
                inner = best[i * w + i + 1] + best[(i + 1) * w + j];
                for k in i + 2..j {
                    let v = best[i * w + k] + best[k * w + j];
                    if v > inner {
                        inner = v;
                        best_k = k;
                    }
                }
                split[i * w + j] = best_k;
            }
            best[i * w + j] = best_s + inner;
            label[i * w + j] = best_l;
        }
    }
    let mut spans = Vec::with_capacity(2 * n - 1);
    let mut stack = vec![(0, n)];
    while let Some((i, j)) = stack.pop() {
        spans.push(ChartSpan {
            start: i,
            end: j,
            label: label[i * w + j],
        });
        if j - i > 1 {
            let k = split[i * w + j];
            stack.push((k, j));
            stack.push((i, k));
        }
    }
    (ChartTree { n, spans }, best[n])
}

/// Δ(pred, gold): spans of the predicted binary structure whose label
/// (empty included) differs from gold's label at the same position.
pub fn hamming_delta(pred: &ChartTree, gold: &GoldSpans) -> usize {
    pred.spans
        .iter()
        .filter(|s| s.label != gold.label(s.start, s.end))
        .count()
}

/// `argmax_T s(T) + Δ(T, T*)` by CKY over cost-augmented scores
/// `s(i, j, l) + [l != gold(i, j)]`. Returns the tree and its augmented
/// score.
pub fn loss_augmented_decode(scores: &SpanScores, gold: &GoldSpans) -> (ChartTree, f64) {
    assert_eq!(scores.n(), gold.n());
    cky_with(scores, |i, j, l| {
        let cost = if l == gold.label(i, j) { 0.0 } else { 1.0 };
        scores.get(i, j, l) + cost
    })
}

/// Two-layer span classifier over fencepost differences.
#[derive(Clone, Debug)]
pub struct SpanScorer {
    w1: ParamId,
    b1: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    w2: ParamId,
    b2: ParamId,
    num_labels: usize,
}

impl SpanScorer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        hidden: usize,
        num_labels: usize,
        rng: &mut R,
    ) -> Self {
        assert!(num_labels >= 2, "label inventory needs a non-empty label");
        SpanScorer {
            w1: store.add(format!("{prefix}.w1"), Tensor::glorot(vec![d_model, hidden], rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![1, hidden])),
            ln_gain: store.add(format!("{prefix}.ln.gain"), Tensor::filled(vec![1, hidden], 1.0)),
            ln_bias: store.add(format!("{prefix}.ln.bias"), Tensor::zeros(vec![1, hidden])),
            w2: store.add(
                format!("{prefix}.w2"),
                Tensor::glorot(vec![hidden, num_labels - 1], rng),
            ),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![1, num_labels - 1])),
            num_labels,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Span representations from the padded encoder output `[n + 2, d]`.
    /// The feature vector splits into a forward and a backward half (each
    /// taking half of the content and half of the position channel); span
    /// `(i, j)` is `[f_j - f_i ; b_i - b_j]` with `f_k` read at row `k` and
    /// `b_k` at row `k + 1`.
    pub fn span_features(g: &mut Graph, encoded: Var, n: usize) -> Var {
        let (rows, d) = g.shape(encoded);
        assert_eq!(rows, n + 2, "encoder output must include boundary rows");
        assert_eq!(d % 4, 0, "model width must be divisible by 4");
        let q = d / 4;
        let fc = g.slice_cols(encoded, 0, q);
        let fp = g.slice_cols(encoded, 2 * q, q);
        let fwd = g.concat_cols(&[fc, fp]);
        let bc = g.slice_cols(encoded, q, q);
        let bp = g.slice_cols(encoded, 3 * q, q);
        let bwd = g.concat_cols(&[bc, bp]);
        let spans = span_list(n);
        let at = |f: &dyn Fn(&(usize, usize)) -> usize| -> Vec<Option<usize>> {
            spans.iter().map(|s| Some(f(s))).collect()
        };
        let fj = g.gather_rows(fwd, &at(&|s| s.1));
        let fi = g.gather_rows(fwd, &at(&|s| s.0));
        let bi = g.gather_rows(bwd, &at(&|s| s.0 + 1));
        let bj = g.gather_rows(bwd, &at(&|s| s.1 + 1));
        let forward = g.sub(fj, fi);
        let backward = g.sub(bi, bj);
        g.concat_cols(&[forward, backward])
    }

    /// `[num_spans, num_labels - 1]` scores for the non-empty labels.
    pub fn forward(&self, g: &mut Graph, encoded: Var, n: usize) -> Var {
        let feats = SpanScorer::span_features(g, encoded, n);
        let (w1, b1) = (g.param(self.w1), g.param(self.b1));
        let h = g.affine(feats, w1, b1);
        let (gain, bias) = (g.param(self.ln_gain), g.param(self.ln_bias));
        let h = g.layer_norm(h, gain, bias);
        let h = g.relu(h);
        let (w2, b2) = (g.param(self.w2), g.param(self.b2));
        g.affine(h, w2, b2)
    }
}

/// Flat indices into the score matrix for the non-empty spans of `spans`.
fn flat_indices(n: usize, num_labels: usize, spans: impl Iterator<Item = ChartSpan>) -> Vec<usize> {
    let width = num_labels - 1;
    spans
        .filter(|s| s.label != EMPTY_LABEL)
        .map(|s| span_row(n, s.start, s.end) * width + s.label - 1)
        .collect()
}

/// Result of [`hinge_loss`].
pub struct Hinge {
    pub loss: Var,
    pub augmented: ChartTree,
    pub delta: usize,
}

/// `max(0, max_T [s(T) + Δ(T, T*)] - s(T*))` on a score matrix from
/// [`SpanScorer::forward`]. When the margin holds the loss is a constant
/// zero and no gradient flows.
pub fn hinge_loss(g: &mut Graph, score_matrix: Var, gold: &GoldSpans, num_labels: usize) -> Hinge {
    let n = gold.n();
    let scores = SpanScores::from_matrix(n, num_labels, g.value(score_matrix));
    let (augmented, _) = loss_augmented_decode(&scores, gold);
    let delta = hamming_delta(&augmented, gold);
    let pred_idx = flat_indices(n, num_labels, augmented.spans.iter().copied());
    let gold_idx = flat_indices(n, num_labels, gold.spans().iter().copied());
    let values = g.value(score_matrix);
    let pred_sum: f64 = pred_idx.iter().map(|&k| values[k]).sum();
    let gold_sum: f64 = gold_idx.iter().map(|&k| values[k]).sum();
    let margin = pred_sum + delta as f64 - gold_sum;
    let loss = if margin > 0.0 {
        let p = g.pick(score_matrix, &pred_idx);
        let p = g.sum(p);
        let q = g.pick(score_matrix, &gold_idx);
        let q = g.sum(q);
        let diff = g.sub(p, q);
        let d = g.constant(Tensor::scalar(delta as f64));
        g.add(diff, d)
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    Hinge {
        loss,
        augmented,
        delta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trees::enumerate_constituent_trees;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_scores(rng: &mut ChaCha8Rng, n: usize, num_labels: usize) -> SpanScores {
        SpanScores::from_fn(n, num_labels, |_, _, _| rng.gen_range(-5..=5) as f64)
    }

    #[test]
    fn span_rows_follow_list_order() {
        for n in 1..8 {
            for (row, &(i, j)) in span_list(n).iter().enumerate() {
                assert_eq!(span_row(n, i, j), row);
            }
        }
    }

    #[test]
    fn single_span() {
        let mut s = SpanScores::zeros(1, 2);
        s.set(0, 1, 1, 2.0);
        let (tree, score) = cky_decode(&s);
        assert_eq!(score, 2.0);
        assert_eq!(tree.spans, vec![ChartSpan { start: 0, end: 1, label: 1 }]);
    }

    #[test]
    fn zero_scores_give_left_branching_tie_break() {
        let s = SpanScores::zeros(4, 3);
        let (tree, score) = cky_decode(&s);
        assert_eq!(score, 0.0);
        assert_eq!(tree.split_sequence(), vec![1, 2, 3]);
        assert_eq!(tree.spans[0].label, 1);
        assert!(tree.spans[1..].iter().all(|s| s.label == EMPTY_LABEL));
    }

    #[test]
    fn cky_matches_full_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let n = rng.gen_range(1..=4);
            let num_labels = rng.gen_range(2..=3);
            let s = random_scores(&mut rng, n, num_labels);
            let (tree, score) = cky_decode(&s);
            let best = enumerate_constituent_trees(n, num_labels)
                .unwrap()
                .map(|t| s.tree_score(&t))
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(score, best);
            assert_eq!(s.tree_score(&tree), score);
        }
    }

    #[test]
    fn delta_counts_label_flips() {
        // gold {(0,3,S),(0,2,NP),(2,3,VP)} with S=1, NP=2, VP=3
        let gold = GoldSpans::new(
            3,
            &[
                ChartSpan { start: 0, end: 3, label: 1 },
                ChartSpan { start: 0, end: 2, label: 2 },
                ChartSpan { start: 2, end: 3, label: 3 },
            ],
        );
        let mk = |np: usize| ChartTree {
            n: 3,
            spans: vec![
                ChartSpan { start: 0, end: 3, label: 1 },
                ChartSpan { start: 0, end: 2, label: np },
                ChartSpan { start: 0, end: 1, label: 0 },
                ChartSpan { start: 1, end: 2, label: 0 },
                ChartSpan { start: 2, end: 3, label: 3 },
            ],
        };
        assert_eq!(hamming_delta(&mk(2), &gold), 0);
        assert_eq!(hamming_delta(&mk(3), &gold), 1);
        // right-branching structure: (1,3) is empty in gold, (0,2) missing
        let right = ChartTree {
            n: 3,
            spans: vec![
                ChartSpan { start: 0, end: 3, label: 1 },
                ChartSpan { start: 0, end: 1, label: 2 },
                ChartSpan { start: 1, end: 3, label: 3 },
                ChartSpan { start: 1, end: 2, label: 0 },
                ChartSpan { start: 2, end: 3, label: 0 },
            ],
        };
        // (0,1): NP vs empty, (1,3): VP vs empty, (2,3): empty vs VP
        assert_eq!(hamming_delta(&right, &gold), 3);
    }

    #[test]
    fn dominant_gold_wins_augmented_search() {
        let n = 3;
        let gold = GoldSpans::new(
            n,
            &[
                ChartSpan { start: 0, end: 3, label: 1 },
                ChartSpan { start: 0, end: 2, label: 2 },
            ],
        );
        let big = (n * n + 1) as f64 * 10.0;
        let s = SpanScores::from_fn(n, 3, |i, j, l| if gold.label(i, j) == l { big } else { -big });
        let (tree, aug) = loss_augmented_decode(&s, &gold);
        assert_eq!(hamming_delta(&tree, &gold), 0);
        assert_eq!(aug, gold.score(&s));
    }

    #[test]
    fn hinge_zero_when_margin_holds() {
        let n = 2;
        let gold = GoldSpans::new(n, &[ChartSpan { start: 0, end: 2, label: 1 }]);
        let mut g = Graph::new();
        // rows: (0,1), (0,2), (1,2); labels 1, 2
        let m = g.input(Tensor::matrix(3, 2, vec![-9.0, -9.0, 9.0, -9.0, -9.0, -9.0]).unwrap(), true);
        let h = hinge_loss(&mut g, m, &gold, 3);
        assert_eq!(g.scalar(h.loss), 0.0);
        assert_eq!(h.delta, 0);

        let mut g = Graph::new();
        let m = g.input(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap(), true);
        let h = hinge_loss(&mut g, m, &gold, 3);
        assert!(g.scalar(h.loss) > 0.0);
        g.backward(h.loss).unwrap();
        let grad = g.grad(m).unwrap().to_vec();
        // every augmented span avoids gold's label: root takes 2, leaves take 1
        assert_eq!(h.delta, 3);
        assert_eq!(grad, vec![1.0, 0.0, -1.0, 1.0, 1.0, 0.0]);
    }
}
