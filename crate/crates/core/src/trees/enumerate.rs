//! Exhaustive enumerators backing the decoder equivalence tests.

use super::{ChartSpan, ChartTree, DependencyTree, EMPTY_LABEL};
use crate::error::{Error, Result};

pub const MAX_CONSTITUENT_ENUM: usize = 8;
pub const MAX_PROJECTIVE_ENUM: usize = 7;

/// Every binary bracketing of `n` words, all labels empty, in
/// lexicographic order of their pre-order split sequences.
pub fn enumerate_bracketings(n: usize) -> Result<Vec<ChartTree>> {
    if n > MAX_CONSTITUENT_ENUM {
        return Err(Error::Guard {
            n,
            max: MAX_CONSTITUENT_ENUM,
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    fn build(start: usize, end: usize) -> Vec<Vec<ChartSpan>> {
        let here = ChartSpan {
            start,
            end,
            label: EMPTY_LABEL,
        };
        if end - start == 1 {
            return vec![vec![here]];
        }
        let mut out = Vec::new();
        for split in start + 1..end {
            let lefts = build(start, split);
            let rights = build(split, end);
            for l in &lefts {
                for r in &rights {
                    let mut spans = Vec::with_capacity(l.len() + r.len() + 1);
                    spans.push(here);
                    spans.extend_from_slice(l);
                    spans.extend_from_slice(r);
                    out.push(spans);
                }
            }
        }
        out
    }
    Ok(build(0, n)
        .into_iter()
        .map(|spans| ChartTree { n, spans })
        .collect())
}

/// Lazily yields every labeled binary tree over `n` words with labels drawn
/// from `0..num_labels` (label 0 is the empty label), the root label always
/// non-empty.
pub fn enumerate_constituent_trees(n: usize, num_labels: usize) -> Result<ConstituentTrees> {
    let bracketings = enumerate_bracketings(n)?;
    Ok(ConstituentTrees {
        bracketings,
        num_labels,
        current: 0,
        labels: None,
    })
}

pub struct ConstituentTrees {
    bracketings: Vec<ChartTree>,
    num_labels: usize,
    current: usize,
    labels: Option<Vec<usize>>,
}

impl Iterator for ConstituentTrees {
    type Item = ChartTree;

    fn next(&mut self) -> Option<ChartTree> {
        if self.num_labels < 2 {
            return None;
        }
        loop {
            let tree = self.bracketings.get(self.current)?;
            let width = tree.spans.len();
            let labels = match self.labels.take() {
                None => {
                    let mut l = vec![0; width];
                    l[0] = 1;
                    Some(l)
                }
                Some(mut l) => {
                    // odometer increment, root digit restricted to 1..num_labels
                    let mut pos = width;
                    loop {
                        if pos == 0 {
                            break None;
                        }
                        pos -= 1;
                        l[pos] += 1;
                        if l[pos] < self.num_labels {
                            break Some(l);
                        }
                        l[pos] = if pos == 0 { 1 } else { 0 };
                    }
                }
            };
            match labels {
                Some(l) => {
                    let mut out = tree.clone();
                    for (s, &lab) in out.spans.iter_mut().zip(&l) {
                        s.label = lab;
                    }
                    self.labels = Some(l);
                    return Some(out);
                }
                None => {
                    self.current += 1;
                    self.labels = None;
                }
            }
        }
    }
}

/// Every projective dependency tree over `n` words with exactly one word
/// attached to the root, found by filtering all head assignments.
pub fn enumerate_projective_trees(n: usize) -> Result<Vec<DependencyTree>> {
    if n > MAX_PROJECTIVE_ENUM {
        return Err(Error::Guard {
            n,
            max: MAX_PROJECTIVE_ENUM,
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut heads = vec![0usize; n];
    loop {
        let tree = DependencyTree::unlabeled(heads.clone());
        if tree.validate().is_ok() && tree.is_projective() {
            out.push(tree);
        }
        let mut pos = n;
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            heads[pos] += 1;
            if heads[pos] <= n {
                break;
            }
            heads[pos] = 0;
        }
    }
}
