//! Biaffine arc and relation scoring with first-order Eisner decoding.

use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::trees::DependencyTree;

/// Arc scores `alpha[d][h]` for dependents `d` in `1..=n` and heads `h` in
/// `0..=n` (0 is ROOT). Row 0 and the diagonal are `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct ArcScores {
    n: usize,
    data: Vec<f64>,
}

impl ArcScores {
    /// Wraps an `[n + 1, n + 1]` row-major matrix, masking row 0 and the
    /// diagonal.
    pub fn new(n: usize, mut data: Vec<f64>) -> Self {
        assert_eq!(data.len(), (n + 1) * (n + 1), "arc score matrix must be square");
        for h in 0..=n {
            data[h] = f64::NEG_INFINITY;
        }
        for d in 0..=n {
            data[d * (n + 1) + d] = f64::NEG_INFINITY;
        }
        ArcScores { n, data }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; (n + 1) * (n + 1)];
        for d in 1..=n {
            for h in 0..=n {
                data[d * (n + 1) + h] = f(d, h);
            }
        }
        ArcScores::new(n, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, dep: usize, head: usize) -> f64 {
        self.data[dep * (self.n + 1) + head]
    }

    /// Each dependent row replaced by its log-softmax over candidate heads.
    pub fn log_probs(&self) -> ArcScores {
        let w = self.n + 1;
        let mut data = self.data.clone();
        for row in data.chunks_mut(w).skip(1) {
            let lse = crate::tensor::log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        ArcScores { n: self.n, data }
    }

    /// `sum_d alpha[d][heads[d]]` for 1-based `heads`.
    pub fn tree_score(&self, heads: &[usize]) -> f64 {
        heads.iter().enumerate().map(|(i, &h)| self.get(i + 1, h)).sum()
    }
}

/// Single-layer perceptron `relu(x W + b)`.
#[derive(Clone, Debug)]
pub struct Perceptron {
    w: ParamId,
    b: ParamId,
}

impl Perceptron {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Perceptron {
            w: store.add(format!("{prefix}.w"), Tensor::glorot(vec![d_in, d_out], rng)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(vec![1, d_out])),
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.affine(x, w, b);
        g.relu(y)
    }
}

/// `alpha = h W g^T + h U + (g V)^T + b`.
#[derive(Clone, Debug)]
pub struct ArcScorer {
    pub dep_mlp: Perceptron,
    pub head_mlp: Perceptron,
    pub w: ParamId,
    pub u: ParamId,
    pub v: ParamId,
    pub b: ParamId,
}

impl ArcScorer {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_model: usize, d_arc: usize, rng: &mut R) -> Self {
        ArcScorer {
            dep_mlp: Perceptron::new(store, &format!("{prefix}.dep"), d_model, d_arc, rng),
            head_mlp: Perceptron::new(store, &format!("{prefix}.head"), d_model, d_arc, rng),
            // zero bilinear start keeps early head distributions near uniform
            w: store.add(format!("{prefix}.w"), Tensor::zeros(vec![d_arc, d_arc])),
            u: store.add(format!("{prefix}.u"), Tensor::zeros(vec![d_arc, 1])),
            v: store.add(format!("{prefix}.v"), Tensor::glorot(vec![d_arc, 1], rng)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(vec![1, 1])),
        }
    }

    /// Dependent (`h`) and head (`g`) views of the encoder rows `0..=n`,
    /// row 0 being the start marker that stands in for ROOT.
    pub fn project_heads(&self, g: &mut Graph, encoded: Var, n: usize) -> (Var, Var) {
        let rows = g.slice_rows(encoded, 0, n + 1);
        let h = self.dep_mlp.forward(g, rows);
        let head = self.head_mlp.forward(g, rows);
        (h, head)
    }

    /// Unmasked `[n + 1, n + 1]` scores, rows dependents and columns heads.
    pub fn biaffine(&self, g: &mut Graph, h: Var, head: Var) -> Var {
        let w = g.param(self.w);
        let hw = g.matmul(h, w);
        let gt = g.transpose(head);
        let bilinear = g.matmul(hw, gt);
        let u = g.param(self.u);
        let hu = g.matmul(h, u);
        let v = g.param(self.v);
        let gv = g.matmul(head, v);
        let gv = g.transpose(gv);
        let b = g.param(self.b);
        let s = g.add_broadcast(bilinear, hu);
        let s = g.add_broadcast(s, gv);
        g.add_broadcast(s, b)
    }

    /// Dependent rows `1..=n` with self-arcs masked, as an `[n, n + 1]`
    /// matrix.
    pub fn forward(&self, g: &mut Graph, encoded: Var, n: usize) -> Var {
        let (h, head) = self.project_heads(g, encoded, n);
        let full = self.biaffine(g, h, head);
        let rows = g.slice_rows(full, 1, n);
        let mask = self_arc_mask(g, n);
        g.add(rows, mask)
    }
}

fn self_arc_mask(g: &mut Graph, n: usize) -> Var {
    let mut m = vec![0.0; n * (n + 1)];
    for d in 1..=n {
        m[(d - 1) * (n + 1) + d] = f64::NEG_INFINITY;
    }
    g.constant_matrix(n, n + 1, m)
}

/// Arc scores from the `[n, n + 1]` output of [`ArcScorer::forward`].
pub fn arc_scores_from(n: usize, rows: &[f64]) -> ArcScores {
    let mut data = vec![0.0; n + 1];
    data.extend_from_slice(rows);
    ArcScores::new(n, data)
}

/// Relation scores for (dependent, head) pairs: a bilinear form with one
/// weight slice per relation, a linear term on the concatenated pair, and a
/// bias.
#[derive(Clone, Debug)]
pub struct LabelScorer {
    pub dep_mlp: Perceptron,
    pub head_mlp: Perceptron,
    w: ParamId,
    u: ParamId,
    b: ParamId,
    d_label: usize,
    num_rels: usize,
}

impl LabelScorer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_label: usize,
        num_rels: usize,
        rng: &mut R,
    ) -> Self {
        assert!(num_rels >= 1, "relation inventory is empty");
        LabelScorer {
            dep_mlp: Perceptron::new(store, &format!("{prefix}.dep"), d_model, d_label, rng),
            head_mlp: Perceptron::new(store, &format!("{prefix}.head"), d_model, d_label, rng),
            w: store.add(format!("{prefix}.w"), Tensor::zeros(vec![d_label, num_rels * d_label])),
            u: store.add(format!("{prefix}.u"), Tensor::glorot(vec![2 * d_label, num_rels], rng)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(vec![1, num_rels])),
            d_label,
            num_rels,
        }
    }

    pub fn num_rels(&self) -> usize {
        self.num_rels
    }

    /// `[n, R]` relation scores for each token given its (1-based) head.
    pub fn forward(&self, g: &mut Graph, encoded: Var, heads: &[usize]) -> Var {
        let n = heads.len();
        let rows = g.slice_rows(encoded, 0, n + 1);
        let dep_all = self.dep_mlp.forward(g, rows);
        let head_all = self.head_mlp.forward(g, rows);
        let dep = g.slice_rows(dep_all, 1, n);
        let index: Vec<Option<usize>> = heads.iter().map(|&h| Some(h)).collect();
        let head = g.gather_rows(head_all, &index);
        let w = g.param(self.w);
        let t = g.matmul(dep, w);
        debug_assert_eq!(g.cols(t), self.num_rels * self.d_label);
        let bilinear = g.bilinear_rows(t, head);
        let pair = g.concat_cols(&[dep, head]);
        let (u, b) = (g.param(self.u), g.param(self.b));
        let linear = g.affine(pair, u, b);
        g.add(bilinear, linear)
    }
}

/// Cross-entropy over heads plus cross-entropy over relations given the gold
/// head, summed over tokens (or averaged when `mean` is set).
///
/// `arcs` is `[n, n + 1]` from [`ArcScorer::forward`]; `rels` is `[n, R]`
/// from [`LabelScorer::forward`] evaluated at the gold heads.
pub fn dep_loss(g: &mut Graph, arcs: Var, rels: Var, heads: &[usize], rel_ids: &[usize], mean: bool) -> Var {
    let n = heads.len();
    assert_eq!(rel_ids.len(), n);
    let arc_lp = g.log_softmax_rows(arcs);
    let arc_idx: Vec<usize> = heads.iter().enumerate().map(|(i, &h)| i * (n + 1) + h).collect();
    let arc_pick = g.pick(arc_lp, &arc_idx);
    let r = g.cols(rels);
    let rel_lp = g.log_softmax_rows(rels);
    let rel_idx: Vec<usize> = rel_ids.iter().enumerate().map(|(i, &l)| i * r + l).collect();
    let rel_pick = g.pick(rel_lp, &rel_idx);
    let both = g.concat_cols(&[arc_pick, rel_pick]);
    let total = g.sum(both);
    let scale = if mean { -1.0 / n as f64 } else { -1.0 };
    g.scale(total, scale)
}

/// Single-root projective maximum spanning tree over `scores` (any real
/// weights, `-inf` allowed off the chosen tree). Returns 1-based heads and
/// the DP total. Among equal-scoring candidates the lowest split point and
/// the lowest root child win.
pub fn eisner(scores: &ArcScores) -> (Vec<usize>, f64) {
    let n = scores.n();
    assert!(n >= 1, "empty sentence");
    if n == 1 {
        return (vec![0], scores.get(1, 0));
    }
    // tables over token indices 1..=n; entry [i][j] with i <= j
    let w = n + 1;
    let at = |i: usize, j: usize| i * w + j;
    let neg = f64::NEG_INFINITY;
    let mut inc_r = vec![neg; w * w]; // arc i -> j
    let mut inc_l = vec![neg; w * w]; // arc j -> i
    let mut com_r = vec![neg; w * w]; // head i, reaches j
    let mut com_l = vec![neg; w * w]; // head j, reaches i
    let mut bp_inc_r = vec![0usize; w * w];
    let mut bp_inc_l = vec![0usize; w * w];
    let mut bp_com_r = vec![0usize; w * w];
    let mut bp_com_l = vec![0usize; w * w];
    for i in 1..=n {
        com_r[at(i, i)] = 0.0;
        com_l[at(i, i)] = 0.0;
    }
    for len in 1..n {
        for i in 1..=n - len {
            let j = i + len;
            let mut best = neg;
            let mut arg = i;
            for k in i..j {
                let v = com_r[at(i, k)] + com_l[at(k + 1, j)];
                if v > best {
                    best = v;
                    arg = k;
                }
            }
            inc_r[at(i, j)] = best + scores.get(j, i);
            inc_l[at(i, j)] = best + scores.get(i, j);
            bp_inc_r[at(i, j)] = arg;
            bp_inc_l[at(i, j)] = arg;

            let mut best = neg;
            let mut arg = i + 1;
            for k in i + 1..=j {
                let v = inc_r[at(i, k)] + com_r[at(k, j)];
                if v > best {
                    best = v;
                    arg = k;
                }
            }
            com_r[at(i, j)] = best;
            bp_com_r[at(i, j)] = arg;

            let mut best = neg;
            let mut arg = i;
            for k in i..j {
                let v = com_l[at(i, k)] + inc_l[at(k, j)];
                if v > best {
                    best = v;
                    arg = k;
                }
            }
            com_l[at(i, j)] = best;
            bp_com_l[at(i, j)] = arg;
        }
    }
    let mut total = neg;
    let mut root = 1;
    for r in 1..=n {
        let v = scores.get(r, 0) + com_l[at(1, r)] + com_r[at(r, n)];
        if v > total {
            total = v;
            root = r;
        }
    }
    let mut heads = vec![0usize; n + 1];
    heads[root] = 0;

    enum Item {
        ComR(usize, usize),
        ComL(usize, usize),
        IncR(usize, usize),
        IncL(usize, usize),
    }
    let mut stack = vec![Item::ComL(1, root), Item::ComR(root, n)];
    while let Some(item) = stack.pop() {
        match item {
            Item::ComR(i, j) if i < j => {
                let k = bp_com_r[at(i, j)];
                stack.push(Item::IncR(i, k));
                stack.push(Item::ComR(k, j));
            }
            Item::ComL(i, j) if i < j => {
                let k = bp_com_l[at(i, j)];
                stack.push(Item::ComL(i, k));
                stack.push(Item::IncL(k, j));
            }
            Item::IncR(i, j) => {
                heads[j] = i;
                let k = bp_inc_r[at(i, j)];
                stack.push(Item::ComR(i, k));
                stack.push(Item::ComL(k + 1, j));
            }
            Item::IncL(i, j) => {
                heads[i] = j;
                let k = bp_inc_l[at(i, j)];
                stack.push(Item::ComR(i, k));
                stack.push(Item::ComL(k + 1, j));
            }
            _ => {}
        }
    }
    heads.remove(0);
    (heads, total)
}

/// Test-time decoding: Eisner over per-dependent log-probabilities.
pub fn eisner_decode(scores: &ArcScores) -> Vec<usize> {
    eisner(&scores.log_probs()).0
}

/// Per-token argmax relation (lowest id on ties) from `[n, R]` scores.
pub fn assign_labels(label_scores: &[f64], num_rels: usize, heads: &[usize], rel_name: impl Fn(usize) -> String) -> DependencyTree {
    assert_eq!(label_scores.len(), heads.len() * num_rels);
    let labels = label_scores
        .chunks(num_rels)
        .map(|row| {
            let mut best = 0;
            for (r, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = r;
                }
            }
            rel_name(best)
        })
        .collect();
    DependencyTree::new(heads.to_vec(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trees::{enumerate_projective_trees, validate_projective};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_arcs(rng: &mut ChaCha8Rng, n: usize) -> ArcScores {
        ArcScores::from_fn(n, |_, _| rng.gen_range(-3.0..3.0))
    }

    #[test]
    fn single_word_attaches_to_root() {
        let s = ArcScores::from_fn(1, |_, _| -4.0);
        assert_eq!(eisner_decode(&s), vec![0]);
    }

    #[test]
    fn eisner_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..60 {
            let n = rng.gen_range(1..=5);
            let s = random_arcs(&mut rng, n).log_probs();
            let (heads, total) = eisner(&s);
            let best = enumerate_projective_trees(n)
                .unwrap()
                .iter()
                .map(|t| s.tree_score(&t.heads))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((total - best).abs() < 1e-9, "{total} vs {best}");
            assert!((s.tree_score(&heads) - total).abs() < 1e-9);
        }
    }

    #[test]
    fn decoded_trees_are_projective_single_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.gen_range(1..=10);
            let heads = eisner_decode(&random_arcs(&mut rng, n));
            let tree = DependencyTree::unlabeled(heads.clone());
            tree.validate().unwrap();
            assert!(validate_projective(&tree));
            assert_eq!(heads.iter().filter(|&&h| h == 0).count(), 1);
            assert!(heads.iter().enumerate().all(|(i, &h)| h != i + 1));
        }
    }

    #[test]
    fn labels_take_row_argmax() {
        let scores = vec![0.0, 2.0, 2.0, 5.0, 1.0, 1.0];
        let tree = assign_labels(&scores, 3, &[2, 0], |r| ["a", "b", "c"][r].to_string());
        assert_eq!(tree.labels, vec!["b", "a"]);
    }

    #[test]
    fn uniform_arcs_give_log_k_per_token() {
        let n = 3;
        let mut g = Graph::new();
        let mut m = vec![0.0; n * (n + 1)];
        for d in 1..=n {
            m[(d - 1) * (n + 1) + d] = f64::NEG_INFINITY;
        }
        let arcs = g.constant_matrix(n, n + 1, m);
        let rels = g.constant_matrix(n, 1, vec![0.0; n]);
        let loss = dep_loss(&mut g, arcs, rels, &[2, 0, 2], &[0, 0, 0], false);
        assert!((g.scalar(loss) - 3.0 * (n as f64).ln()).abs() < 1e-12);
    }
}
