//! Labeled bracket scores with evalb conventions and attachment scores.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trees::{ConstituentTree, DependencyTree, Node, Sentence};

/// Scoring conventions. The English profile follows evalb's `COLLINS.prm`:
/// punctuation and trace words are removed before bracket positions are
/// computed,
/// `TOP`-style wrappers are ignored, `ADVP` and `PRT` are equivalent, and
/// function tags are stripped.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// POS tags of tokens left out of UAS/LAS.
    pub punct_tags: BTreeSet<String>,
    /// POS tags of words deleted before bracket scoring.
    pub deleted_word_tags: BTreeSet<String>,
    /// Phrase labels whose brackets are never scored.
    pub deleted_labels: BTreeSet<String>,
    /// Label rewrites applied to both sides before matching.
    pub equivalent: BTreeMap<String, String>,
    /// Whether the sentence-spanning bracket is scored.
    pub include_root: bool,
}

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl EvalConfig {
    pub fn english() -> Self {
        EvalConfig {
            punct_tags: set(&["``", "''", ":", ",", ".", "SYM"]),
            deleted_word_tags: set(&["``", "''", ":", ",", ".", "-NONE-"]),
            deleted_labels: set(&["TOP", "ROOT", "S1", "-NONE-"]),
            equivalent: [("PRT".to_string(), "ADVP".to_string())].into_iter().collect(),
            include_root: true,
        }
    }

    pub fn chinese() -> Self {
        EvalConfig {
            punct_tags: set(&["PU"]),
            deleted_word_tags: set(&["PU", "-NONE-"]),
            deleted_labels: set(&["TOP", "ROOT", "-NONE-"]),
            equivalent: BTreeMap::new(),
            include_root: true,
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "en" | "english" | "ptb" => Ok(EvalConfig::english()),
            "zh" | "chinese" | "ctb" => Ok(EvalConfig::chinese()),
            other => Err(Error::Config(format!("unknown evaluation profile {other}"))),
        }
    }

    fn normalize<'a>(&'a self, label: &'a str) -> &'a str {
        // function tags: NP-SBJ-1 -> NP, NP=2 -> NP; labels such as -NONE- keep their dash
        let cut = if label.starts_with('-') {
            None
        } else {
            label.find(['-', '='])
        };
        let base = cut.map_or(label, |i| &label[..i]);
        self.equivalent.get(base).map_or(base, String::as_str)
    }
}

/// Scored brackets of one tree as `(start, end, label)` with positions
/// counted over the words that survive deletion.
pub fn scored_brackets(tree: &ConstituentTree, cfg: &EvalConfig) -> Vec<(usize, usize, String)> {
    fn walk(node: &Node, cfg: &EvalConfig, pos: &mut usize, out: &mut Vec<(usize, usize, String)>) {
        match node {
            Node::Leaf { pos: tag, .. } => {
                if !cfg.deleted_word_tags.contains(tag) {
                    *pos += 1;
                }
            }
            Node::Internal { label, children } => {
                let start = *pos;
                let slot = out.len();
                for c in children {
                    walk(c, cfg, pos, out);
                }
                let end = *pos;
                let label = cfg.normalize(label);
                if end > start && !cfg.deleted_labels.contains(label) {
                    out.insert(slot, (start, end, label.to_string()));
                }
            }
        }
    }
    let mut out = Vec::new();
    let mut pos = 0;
    walk(&tree.root, cfg, &mut pos, &mut out);
    if !cfg.include_root {
        out.retain(|b| !(b.0 == 0 && b.1 == pos));
    }
    out
}

fn scored_length(tree: &ConstituentTree, cfg: &EvalConfig) -> usize {
    tree.leaves()
        .iter()
        .filter(|l| match l {
            Node::Leaf { pos, .. } => !cfg.deleted_word_tags.contains(pos),
            _ => false,
        })
        .count()
}

/// Multiset intersection size.
fn matched(pred: &[(usize, usize, String)], gold: &[(usize, usize, String)]) -> usize {
    let mut counts: BTreeMap<&(usize, usize, String), usize> = BTreeMap::new();
    for b in gold {
        *counts.entry(b).or_default() += 1;
    }
    let mut m = 0;
    for b in pred {
        if let Some(c) = counts.get_mut(b) {
            if *c > 0 {
                *c -= 1;
                m += 1;
            }
        }
    }
    m
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BracketCounts {
    pub sentences: usize,
    pub matched: usize,
    pub gold: usize,
    pub predicted: usize,
}

impl BracketCounts {
    pub fn recall(&self) -> f64 {
        percent(self.matched, self.gold)
    }

    pub fn precision(&self) -> f64 {
        percent(self.matched, self.predicted)
    }

    pub fn f1(&self) -> f64 {
        let (r, p) = (self.recall(), self.precision());
        if r + p == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn bracket_counts(pred: &[ConstituentTree], gold: &[ConstituentTree], cfg: &EvalConfig) -> Result<BracketCounts> {
    if pred.len() != gold.len() {
        return Err(Error::Eval(format!(
            "{} predicted trees but {} gold trees",
            pred.len(),
            gold.len()
        )));
    }
    let mut c = BracketCounts::default();
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() || scored_length(p, cfg) != scored_length(g, cfg) {
            return Err(Error::Eval(format!(
                "sentence {}: predicted length {} but gold length {}",
                i + 1,
                p.len(),
                g.len()
            )));
        }
        let pb = scored_brackets(p, cfg);
        let gb = scored_brackets(g, cfg);
        c.sentences += 1;
        c.matched += matched(&pb, &gb);
        c.gold += gb.len();
        c.predicted += pb.len();
    }
    Ok(c)
}

/// `(LR, LP, F1)` in percent, micro-averaged.
pub fn bracket_prf(pred: &[ConstituentTree], gold: &[ConstituentTree], cfg: &EvalConfig) -> Result<(f64, f64, f64)> {
    let c = bracket_counts(pred, gold, cfg)?;
    Ok((c.recall(), c.precision(), c.f1()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttachmentCounts {
    pub sentences: usize,
    pub tokens: usize,
    pub heads: usize,
    pub labeled: usize,
}

impl AttachmentCounts {
    pub fn uas(&self) -> f64 {
        percent(self.heads, self.tokens)
    }

    pub fn las(&self) -> f64 {
        percent(self.labeled, self.tokens)
    }
}

/// Attachment counts over tokens whose gold POS (from `sentences`) is not
/// punctuation.
pub fn attachment_counts(
    pred: &[DependencyTree],
    gold: &[DependencyTree],
    sentences: &[Sentence],
    cfg: &EvalConfig,
) -> Result<AttachmentCounts> {
    if pred.len() != gold.len() || gold.len() != sentences.len() {
        return Err(Error::Eval(format!(
            "{} predicted, {} gold trees and {} sentences",
            pred.len(),
            gold.len(),
            sentences.len()
        )));
    }
    let mut c = AttachmentCounts::default();
    for (i, ((p, g), s)) in pred.iter().zip(gold).zip(sentences).enumerate() {
        if p.len() != g.len() || g.len() != s.len() {
            return Err(Error::Eval(format!(
                "sentence {}: lengths {} (predicted), {} (gold), {} (tokens)",
                i + 1,
                p.len(),
                g.len(),
                s.len()
            )));
        }
        c.sentences += 1;
        for k in 0..g.len() {
            if cfg.punct_tags.contains(&s.tokens[k].pos) {
                continue;
            }
            c.tokens += 1;
            if p.heads[k] == g.heads[k] {
                c.heads += 1;
                if p.labels[k] == g.labels[k] {
                    c.labeled += 1;
                }
            }
        }
    }
    Ok(c)
}

/// `(UAS, LAS)` in percent.
pub fn uas_las(
    pred: &[DependencyTree],
    gold: &[DependencyTree],
    sentences: &[Sentence],
    cfg: &EvalConfig,
) -> Result<(f64, f64)> {
    let c = attachment_counts(pred, gold, sentences, cfg)?;
    Ok((c.uas(), c.las()))
}

/// Machine-readable evaluation record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub lr: Option<f64>,
    pub lp: Option<f64>,
    pub f1: Option<f64>,
    pub uas: Option<f64>,
    pub las: Option<f64>,
    pub brackets: Option<BracketCounts>,
    pub attachments: Option<AttachmentCounts>,
}

impl EvalRecord {
    pub fn from_counts(brackets: Option<BracketCounts>, attachments: Option<AttachmentCounts>) -> Self {
        EvalRecord {
            lr: brackets.map(|c| c.recall()),
            lp: brackets.map(|c| c.precision()),
            f1: brackets.map(|c| c.f1()),
            uas: attachments.map(|c| c.uas()),
            las: attachments.map(|c| c.las()),
            brackets,
            attachments,
        }
    }

    /// Selection scalar: mean of F1 and LAS when both exist, otherwise
    /// whichever is present.
    pub fn dev_metric(&self) -> Option<f64> {
        match (self.f1, self.las) {
            (Some(f), Some(l)) => Some((f + l) / 2.0),
            (Some(f), None) => Some(f),
            (None, Some(l)) => Some(l),
            (None, None) => None,
        }
    }

    /// Summary in the style of evalb's report followed by a one-line table.
    pub fn report(&self) -> String {
        let mut out = String::new();
        if let Some(c) = &self.brackets {
            let _ = writeln!(out, "-- Bracketing --");
            let _ = writeln!(out, "Number of sentence        = {:6}", c.sentences);
            let _ = writeln!(out, "Number of matched brackets = {:5}", c.matched);
            let _ = writeln!(out, "Number of gold brackets    = {:5}", c.gold);
            let _ = writeln!(out, "Number of test brackets    = {:5}", c.predicted);
            let _ = writeln!(out, "Bracketing Recall         = {:6.2}", c.recall());
            let _ = writeln!(out, "Bracketing Precision      = {:6.2}", c.precision());
            let _ = writeln!(out, "Bracketing FMeasure       = {:6.2}", c.f1());
        }
        if let Some(c) = &self.attachments {
            let _ = writeln!(out, "-- Attachment (punctuation excluded) --");
            let _ = writeln!(out, "Number of sentence        = {:6}", c.sentences);
            let _ = writeln!(out, "Number of scored tokens   = {:6}", c.tokens);
            let _ = writeln!(out, "Unlabeled attachment      = {:6.2}", c.uas());
            let _ = writeln!(out, "Labeled attachment        = {:6.2}", c.las());
        }
        let cell = |v: Option<f64>| v.map_or("     -".to_string(), |v| format!("{v:6.2}"));
        let _ = writeln!(out, "{:>6} {:>6} {:>6} {:>6} {:>6}", "LR", "LP", "F1", "UAS", "LAS");
        let _ = writeln!(
            out,
            "{} {} {} {} {}",
            cell(self.lr),
            cell(self.lp),
            cell(self.f1),
            cell(self.uas),
            cell(self.las)
        );
        out
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
    fn function_tags_and_equivalence() {
        let cfg = EvalConfig::english();
        assert_eq!(cfg.normalize("NP-SBJ-1"), "NP");
        assert_eq!(cfg.normalize("NP=2"), "NP");
        assert_eq!(cfg.normalize("-NONE-"), "-NONE-");
        assert_eq!(cfg.normalize("PRT"), "ADVP");
    }

    #[test]
    fn hand_counted_half_match() {
        let cfg = EvalConfig::english();
        let pred = tree("(S (NP (A a) (B b)) (C c))");
        let gold = tree("(S (A a) (VP (B b) (C c)))");
        let (r, p, f) = bracket_prf(&[pred], &[gold], &cfg).unwrap();
        assert_eq!((r, p, f), (50.0, 50.0, 50.0));
    }

    #[test]
    fn attachment_arithmetic() {
        let cfg = EvalConfig::english();
        let s = Sentence::new(
            (0..11)
                .map(|i| crate::trees::Token::new(format!("w{i}"), if i == 10 { "." } else { "NN" }))
                .collect(),
        );
        let mut gold_heads: Vec<usize> = (0..11).map(|i| i).collect();
        gold_heads[0] = 0;
        let gold = DependencyTree::new(gold_heads.clone(), vec!["a".into(); 11]);
        let mut pred_heads = gold_heads.clone();
        pred_heads[3] = 9;
        let mut labels = vec!["a".to_string(); 11];
        labels[5] = "b".into();
        labels[10] = "b".into();
        let pred = DependencyTree::new(pred_heads, labels);
        let (uas, las) = uas_las(&[pred], &[gold], &[s], &cfg).unwrap();
        assert_eq!((uas, las), (90.0, 80.0));
    }
}
