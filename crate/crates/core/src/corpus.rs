use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::treebank::{read_bracketed, read_conll};
use crate::trees::{ConstituentTree, DependencyTree, Sentence};

/// A sentence with whichever gold annotations are available.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub sentence: Sentence,
    pub constituents: Option<ConstituentTree>,
    pub dependencies: Option<DependencyTree>,
}

impl Example {
    pub fn new(
        sentence: Sentence,
        constituents: Option<ConstituentTree>,
        dependencies: Option<DependencyTree>,
    ) -> Self {
        Example {
            sentence,
            constituents,
            dependencies,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    examples: Vec<Example>,
}

impl Corpus {
    pub fn new(examples: Vec<Example>) -> Self {
        Corpus { examples }
    }

    /// Pairs a constituency and a dependency treebank sentence by sentence.
    /// Either side may be absent; when both are given they must agree on
    /// sentence count and word forms. POS tags come from the constituency
    /// side when present.
    pub fn align(
        constituents: Option<Vec<(Sentence, ConstituentTree)>>,
        dependencies: Option<Vec<(Sentence, DependencyTree)>>,
    ) -> Result<Self> {
        let examples = match (constituents, dependencies) {
            (None, None) => Vec::new(),
            (Some(c), None) => c
                .into_iter()
                .map(|(s, t)| Example::new(s, Some(t), None))
                .collect(),
            (None, Some(d)) => d
                .into_iter()
                .map(|(s, t)| Example::new(s, None, Some(t)))
                .collect(),
            (Some(c), Some(d)) => {
                if c.len() != d.len() {
                    return Err(Error::Data(format!(
                        "{} constituency trees but {} dependency trees",
                        c.len(),
                        d.len()
                    )));
                }
                let mut out = Vec::with_capacity(c.len());
                for (i, ((cs, ct), (ds, dt))) in c.into_iter().zip(d).enumerate() {
                    if !cs.forms().eq(ds.forms()) {
                        return Err(Error::Data(format!(
                            "sentence {}: constituency and dependency tokens differ",
                            i + 1
                        )));
                    }
                    out.push(Example::new(cs, Some(ct), Some(dt)));
                }
                out
            }
        };
        Ok(Corpus { examples })
    }

    pub fn load(constituents: Option<&Path>, dependencies: Option<&Path>) -> Result<Self> {
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::file(p, e));
        let c = constituents
            .map(|p| read(p).and_then(|t| read_bracketed(&t)))
            .transpose()?;
        let d = dependencies
            .map(|p| read(p).and_then(|t| read_conll(&t)))
            .transpose()?;
        Corpus::align(c, d)
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.sentence.len()).sum()
    }

    /// Checks that every sentence is nonempty and, when `need_const` /
    /// `need_dep` are set, carries the corresponding gold tree.
    pub fn check(&self, need_const: bool, need_dep: bool) -> Result<()> {
        for (i, ex) in self.examples.iter().enumerate() {
            ex.sentence
                .validate()
                .map_err(|e| Error::Data(format!("sentence {}: {e}", i + 1)))?;
            if need_const && ex.constituents.is_none() {
                return Err(Error::Data(format!("sentence {} has no constituency tree", i + 1)));
            }
            if need_dep && ex.dependencies.is_none() {
                return Err(Error::Data(format!("sentence {} has no dependency tree", i + 1)));
            }
        }
        Ok(())
    }

    pub fn split_at(&self, n: usize) -> (Corpus, Corpus) {
        let (a, b) = self.examples.split_at(n.min(self.examples.len()));
        (Corpus::new(a.to_vec()), Corpus::new(b.to_vec()))
    }
}

impl FromIterator<Example> for Corpus {
    fn from_iter<I: IntoIterator<Item = Example>>(iter: I) -> Self {
        Corpus::new(iter.into_iter().collect())
    }
}
