//! Syntactic tree types shared by both decoders.

mod enumerate;

pub use enumerate::{
    enumerate_bracketings, enumerate_constituent_trees, enumerate_projective_trees,
    ConstituentTrees, MAX_CONSTITUENT_ENUM, MAX_PROJECTIVE_ENUM,
};

use std::fmt;

use crate::error::{Error, Result};

/// Label joining the levels of a collapsed unary chain.
pub const CHAIN_SEPARATOR: char = '+';

/// Id of the empty constituent label in every label inventory.
pub const EMPTY_LABEL: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Token {
    pub form: String,
    pub pos: String,
}

impl Token {
    pub fn new(form: impl Into<String>, pos: impl Into<String>) -> Self {
        Token {
            form: form.into(),
            pos: pos.into(),
        }
    }
}

/// A tokenized sentence. Character sequences come from the word forms.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sentence {
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Sentence { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn forms(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.form.as_str())
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.pos.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Data("empty sentence".into()));
        }
        if let Some(i) = self.tokens.iter().position(|t| t.form.is_empty()) {
            return Err(Error::Data(format!("token {} has no characters", i + 1)));
        }
        Ok(())
    }
}

/// A labeled span over fenceposts `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl Span {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Span {
            start,
            end,
            label: label.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Node {
    Internal { label: String, children: Vec<Node> },
    /// A preterminal with its word.
    Leaf { pos: String, word: String },
}

impl Node {
    pub fn internal(label: impl Into<String>, children: Vec<Node>) -> Self {
        Node::Internal {
            label: label.into(),
            children,
        }
    }

    pub fn leaf(pos: impl Into<String>, word: impl Into<String>) -> Self {
        Node::Leaf {
            pos: pos.into(),
            word: word.into(),
        }
    }

    pub fn label(&self) -> &str {
        match self {
            Node::Internal { label, .. } => label,
            Node::Leaf { pos, .. } => pos,
        }
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a Node>) {
        match self {
            Node::Leaf { .. } => out.push(self),
            Node::Internal { children, .. } => {
                children.iter().for_each(|c| c.collect_leaves(out));
            }
        }
    }

    fn count_internal(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Internal { children, .. } => {
                1 + children.iter().map(Node::count_internal).sum::<usize>()
            }
        }
    }
}

/// A rooted, ordered phrase-structure tree.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConstituentTree {
    pub root: Node,
}

impl ConstituentTree {
    pub fn new(root: Node) -> Self {
        ConstituentTree { root }
    }

    pub fn leaves(&self) -> Vec<&Node> {
        let mut out = Vec::new();
        self.root.collect_leaves(&mut out);
        out
    }

    pub fn len(&self) -> usize {
        self.leaves().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sentence(&self) -> Sentence {
        let tokens = self
            .leaves()
            .into_iter()
            .map(|l| match l {
                Node::Leaf { pos, word } => Token::new(word.clone(), pos.clone()),
                Node::Internal { .. } => unreachable!(),
            })
            .collect();
        Sentence::new(tokens)
    }

    pub fn num_internal(&self) -> usize {
        self.root.count_internal()
    }

    /// Every internal node must have at least one child.
    pub fn validate(&self) -> Result<()> {
        fn check(node: &Node) -> Result<()> {
            if let Node::Internal { label, children } = node {
                if children.is_empty() {
                    return Err(Error::Data(format!("node {label} has no children")));
                }
                children.iter().try_for_each(check)?;
            }
            Ok(())
        }
        check(&self.root)
    }

    /// Decomposes the tree into labeled spans, one per internal node after
    /// unary chains are collapsed into a single `+`-joined label. Spans are
    /// listed in pre-order.
    pub fn to_labeled_spans(&self) -> Vec<Span> {
        fn walk(node: &Node, start: usize, out: &mut Vec<Span>) -> usize {
            match node {
                Node::Leaf { .. } => start + 1,
                Node::Internal { label, children } => {
                    let mut chain = label.clone();
                    let mut kids = children;
                    while let [Node::Internal { label, children }] = kids.as_slice() {
                        chain.push(CHAIN_SEPARATOR);
                        chain.push_str(label);
                        kids = children;
                    }
                    let slot = out.len();
                    out.push(Span::new(start, start, chain));
                    let mut end = start;
                    for child in kids {
                        end = walk(child, end, out);
                    }
                    out[slot].end = end;
                    end
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, 0, &mut out);
        out
    }

    /// All brackets without unary collapsing, each node of a chain reported
    /// separately. Preterminals are excluded.
    pub fn brackets(&self) -> Vec<Span> {
        fn walk(node: &Node, start: usize, out: &mut Vec<Span>) -> usize {
            match node {
                Node::Leaf { .. } => start + 1,
                Node::Internal { label, children } => {
                    let slot = out.len();
                    out.push(Span::new(start, start, label.clone()));
                    let mut end = start;
                    for child in children {
                        end = walk(child, end, out);
                    }
                    out[slot].end = end;
                    end
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, 0, &mut out);
        out
    }
}

impl fmt::Display for ConstituentTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&crate::treebank::write_bracketed(self))
    }
}

/// Head assignment for every token. `heads[i]` is the head of token `i + 1`
/// in 1-based positions, with `0` denoting the artificial root.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DependencyTree {
    pub heads: Vec<usize>,
    pub labels: Vec<String>,
}

impl DependencyTree {
    pub fn new(heads: Vec<usize>, labels: Vec<String>) -> Self {
        assert_eq!(heads.len(), labels.len());
        DependencyTree { heads, labels }
    }

    pub fn unlabeled(heads: Vec<usize>) -> Self {
        let labels = vec!["_".to_string(); heads.len()];
        DependencyTree { heads, labels }
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Checks the single-root, in-range, acyclic tree invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.heads.len();
        if n == 0 {
            return Err(Error::Data("empty dependency tree".into()));
        }
        let roots = self.heads.iter().filter(|&&h| h == 0).count();
        if roots != 1 {
            return Err(Error::Data(format!("{roots} tokens attached to the root")));
        }
        for (i, &h) in self.heads.iter().enumerate() {
            if h > n {
                return Err(Error::Data(format!("token {} has head {h} > {n}", i + 1)));
            }
            if h == i + 1 {
                return Err(Error::Data(format!("token {} heads itself", i + 1)));
            }
        }
        if !self.is_acyclic() {
            return Err(Error::Data("head graph has a cycle".into()));
        }
        Ok(())
    }

    fn is_acyclic(&self) -> bool {
        let n = self.heads.len();
        // 0 = unvisited, 1 = on the current path, 2 = reaches the root
        let mut state = vec![0u8; n + 1];
        state[0] = 2;
        for start in 1..=n {
            let mut path = Vec::new();
            let mut cur = start;
            while state[cur] == 0 {
                state[cur] = 1;
                path.push(cur);
                cur = self.heads[cur - 1];
                if cur > n {
                    return false;
                }
            }
            if state[cur] == 1 {
                return false;
            }
            for p in path {
                state[p] = 2;
            }
        }
        true
    }

    /// True iff no two arcs cross when drawn above the sentence, the root
    /// sitting at position 0.
    pub fn is_projective(&self) -> bool {
        let arcs: Vec<(usize, usize)> = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, &h)| (h.min(i + 1), h.max(i + 1)))
            .collect();
        for (x, &(a, b)) in arcs.iter().enumerate() {
            for &(c, d) in &arcs[x + 1..] {
                if (a < c && c < b && b < d) || (c < a && a < d && d < b) {
                    return false;
                }
            }
        }
        true
    }
}

pub fn validate_projective(tree: &DependencyTree) -> bool {
    tree.is_projective()
}

/// A span of a binary chart tree carrying a label id (`EMPTY_LABEL` for
/// the empty label).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChartSpan {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

/// A binary tree in the decoder's search space: `2n - 1` spans listed in
/// pre-order, every span either a single word or split into two children.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ChartTree {
    pub n: usize,
    pub spans: Vec<ChartSpan>,
}

impl ChartTree {
    /// Sum of `score(start, end, label)` over all spans.
    pub fn score(&self, score: impl Fn(usize, usize, usize) -> f64) -> f64 {
        self.spans.iter().map(|s| score(s.start, s.end, s.label)).sum()
    }

    /// Split points in pre-order; the tie-break order between equal-scoring
    /// trees is the lexicographic order of this sequence.
    pub fn split_sequence(&self) -> Vec<usize> {
        let mut splits = Vec::with_capacity(self.n.saturating_sub(1));
        for (k, s) in self.spans.iter().enumerate() {
            if s.end - s.start > 1 {
                let left = &self.spans[k + 1];
                splits.push(left.end);
            }
        }
        splits
    }

    /// The non-empty spans with their label ids.
    pub fn labeled(&self) -> impl Iterator<Item = &ChartSpan> {
        self.spans.iter().filter(|s| s.label != EMPTY_LABEL)
    }

    /// Rebuilds an n-ary tree: empty-labeled nodes are spliced into their
    /// parent and `+`-joined labels expand into unary chains.
    pub fn to_tree<'a>(&self, label_name: impl Fn(usize) -> &'a str, sentence: &Sentence) -> ConstituentTree {
        assert_eq!(self.n, sentence.len());
        fn build<'a>(
            spans: &[ChartSpan],
            pos: &mut usize,
            label_name: &impl Fn(usize) -> &'a str,
            sentence: &Sentence,
        ) -> Vec<Node> {
            let span = spans[*pos];
            *pos += 1;
            let children = if span.end - span.start == 1 {
                let tok = &sentence.tokens[span.start];
                vec![Node::leaf(tok.pos.clone(), tok.form.clone())]
            } else {
                let mut kids = build(spans, pos, label_name, sentence);
                kids.extend(build(spans, pos, label_name, sentence));
                kids
            };
            if span.label == EMPTY_LABEL {
                return children;
            }
            let name = label_name(span.label);
            let mut node = None;
            for part in name.split(CHAIN_SEPARATOR).rev() {
                let kids = match node.take() {
                    None => children.clone(),
                    Some(inner) => vec![inner],
                };
                node = Some(Node::internal(part, kids));
            }
            vec![node.expect("label is nonempty")]
        }
        let mut pos = 0;
        let mut roots = build(&self.spans, &mut pos, &label_name, sentence);
        assert_eq!(roots.len(), 1, "chart tree root must carry a label");
        ConstituentTree::new(roots.pop().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::read_bracketed;

    fn tree(s: &str) -> ConstituentTree {
        read_bracketed(s).unwrap().remove(0).1
    }

    #[test]
    fn labeled_spans_of_simple_tree() {
        let t = tree("(S (NP (DT The) (NN cat)) (VP (VBD sat)))");
        let mut spans = t.to_labeled_spans();
        spans.sort();
        assert_eq!(
            spans,
            vec![Span::new(0, 2, "NP"), Span::new(0, 3, "S"), Span::new(2, 3, "VP")]
        );
    }

    #[test]
    fn unary_chain_collapses() {
        let t = tree("(S (VP (VB go)))");
        assert_eq!(t.to_labeled_spans(), vec![Span::new(0, 1, "S+VP")]);
        let t = tree("(NP (NN dog))");
        assert_eq!(t.to_labeled_spans(), vec![Span::new(0, 1, "NP")]);
        assert_eq!(t.brackets().len(), 1);
        let t = tree("(S (VP (VB go) (RB now)))");
        assert_eq!(t.brackets().len(), 2);
        assert_eq!(t.to_labeled_spans(), vec![Span::new(0, 2, "S+VP")]);
    }

    #[test]
    fn projectivity() {
        assert!(validate_projective(&DependencyTree::unlabeled(vec![2, 0])));
        assert!(validate_projective(&DependencyTree::unlabeled(vec![0])));
        // 1->3 and 2->4 cross
        assert!(!validate_projective(&DependencyTree::unlabeled(vec![3, 4, 0, 1])));
    }

    #[test]
    fn dependency_validation() {
        assert!(DependencyTree::unlabeled(vec![2, 0]).validate().is_ok());
        assert!(DependencyTree::unlabeled(vec![0, 0]).validate().is_err());
        assert!(DependencyTree::unlabeled(vec![2, 1, 0]).validate().is_err());
        assert!(DependencyTree::unlabeled(vec![1, 0]).validate().is_err());
        assert!(DependencyTree::unlabeled(vec![5, 0]).validate().is_err());
    }

    #[test]
    fn chart_tree_expands_chains_and_drops_empty() {
        let sentence = tree("(S (NP (DT The) (NN cat)) (VP (VBD sat)))").sentence();
        let names = ["<empty>", "S", "NP", "S+VP"];
        let chart = ChartTree {
            n: 3,
            spans: vec![
                ChartSpan { start: 0, end: 3, label: 3 },
                ChartSpan { start: 0, end: 2, label: 0 },
                ChartSpan { start: 0, end: 1, label: 2 },
                ChartSpan { start: 1, end: 2, label: 0 },
                ChartSpan { start: 2, end: 3, label: 0 },
            ],
        };
        let t = chart.to_tree(|l| names[l], &sentence);
        assert_eq!(
            t.to_string(),
            "(S (VP (NP (DT The)) (NN cat) (VBD sat)))"
        );
        assert_eq!(chart.split_sequence(), vec![2, 1]);
    }
}
