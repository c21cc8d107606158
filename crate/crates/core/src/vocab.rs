//! Symbol inventories and pretrained vector loading.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trees::EMPTY_LABEL;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const ROOT: &str = "<root>";
pub const STOP: &str = "<stop>";
pub const EMPTY: &str = "<empty>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const ROOT_ID: usize = 2;
pub const STOP_ID: usize = 3;

const HEADER: &str = "#vocab\tv1";

/// A dense string-to-id map.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Namespace {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl Namespace {
    fn with_reserved(reserved: &[&str]) -> Self {
        let mut ns = Namespace::default();
        for r in reserved {
            ns.insert(r);
        }
        ns
    }

    pub fn insert(&mut self, item: &str) -> usize {
        if let Some(&id) = self.index.get(item) {
            return id;
        }
        let id = self.items.len();
        self.items.push(item.to_string());
        self.index.insert(item.to_string(), id);
        id
    }

    pub fn get(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.items[id]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub words: Namespace,
    pub chars: Namespace,
    pub tags: Namespace,
    pub labels: Namespace,
    pub rels: Namespace,
    /// Training frequency per word id; empty after loading from disk.
    word_counts: Vec<usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let reserved = [PAD, UNK, ROOT, STOP];
        Vocabulary {
            words: Namespace::with_reserved(&reserved),
            chars: Namespace::with_reserved(&reserved),
            tags: Namespace::with_reserved(&reserved),
            labels: Namespace::with_reserved(&[EMPTY]),
            rels: Namespace::default(),
            word_counts: Vec::new(),
        }
    }

    /// Builds all inventories from a corpus. Words seen fewer than
    /// `min_word_freq` times are left out and will map to UNK; characters,
    /// tags, constituent labels and relations are always kept.
    pub fn build(corpus: &Corpus, min_word_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut vocab = Vocabulary::new();
        let mut freq: HashMap<&str, usize> = HashMap::new();
        let mut order: Vec<&str> = Vec::new();
        for ex in corpus.examples() {
            for tok in &ex.sentence.tokens {
                let count = freq.entry(tok.form.as_str()).or_insert_with(|| {
                    order.push(tok.form.as_str());
                    0
                });
                *count += 1;
                for c in tok.form.chars() {
                    vocab.chars.insert(c.encode_utf8(&mut [0; 4]));
                }
                vocab.tags.insert(&tok.pos);
            }
            if let Some(tree) = &ex.constituents {
                for span in tree.to_labeled_spans() {
                    vocab.labels.insert(&span.label);
                }
            }
            if let Some(dep) = &ex.dependencies {
                for rel in &dep.labels {
                    vocab.rels.insert(rel);
                }
            }
        }
        vocab.word_counts = vec![0; vocab.words.len()];
        for w in order {
            let count = freq[w];
            if count >= min_word_freq.max(1) {
                let id = vocab.words.insert(w);
                if id >= vocab.word_counts.len() {
                    vocab.word_counts.push(count);
                }
            }
        }
        Ok(vocab)
    }

    pub fn word_id(&self, word: &str) -> usize {
        self.words.get(word).unwrap_or(UNK_ID)
    }

    pub fn char_id(&self, c: char) -> usize {
        self.chars.get(c.encode_utf8(&mut [0; 4])).unwrap_or(UNK_ID)
    }

    pub fn tag_id(&self, tag: &str) -> usize {
        self.tags.get(tag).unwrap_or(UNK_ID)
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.labels.get(label)
    }

    pub fn label_name(&self, id: usize) -> &str {
        self.labels.name(id)
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn rel_id(&self, rel: &str) -> Option<usize> {
        self.rels.get(rel)
    }

    /// Training count of a word id (0 when unknown or loaded from disk).
    pub fn word_count(&self, id: usize) -> usize {
        self.word_counts.get(id).copied().unwrap_or(0)
    }

    pub fn empty_label(&self) -> usize {
        EMPTY_LABEL
    }

    fn namespaces(&self) -> [(&'static str, &Namespace); 5] {
        [
            ("word", &self.words),
            ("char", &self.chars),
            ("tag", &self.tags),
            ("label", &self.labels),
            ("rel", &self.rels),
        ]
    }

    /// Versioned text form: a header line, then `namespace TAB token TAB id`.
    pub fn to_text(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for (name, ns) in self.namespaces() {
            for (id, item) in ns.items().iter().enumerate() {
                let _ = writeln!(out, "{name}\t{item}\t{id}");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == HEADER => {}
            _ => return Err(Error::Format("vocabulary header missing".into())),
        }
        let mut vocab = Vocabulary {
            words: Namespace::default(),
            chars: Namespace::default(),
            tags: Namespace::default(),
            labels: Namespace::default(),
            rels: Namespace::default(),
            word_counts: Vec::new(),
        };
        for (no, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fail = |m: &str| Error::Format(format!("vocabulary line {}: {m}", no + 1));
            let mut parts = line.split('\t');
            let (Some(ns), Some(item), Some(id), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(fail("expected three tab-separated fields"));
            };
            let id: usize = id.parse().map_err(|_| fail("bad id"))?;
            let target = match ns {
                "word" => &mut vocab.words,
                "char" => &mut vocab.chars,
                "tag" => &mut vocab.tags,
                "label" => &mut vocab.labels,
                "rel" => &mut vocab.rels,
                _ => return Err(fail("unknown namespace")),
            };
            if target.len() != id || target.get(item).is_some() {
                return Err(fail("ids must be dense and unique"));
            }
            target.insert(item);
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Vocabulary::from_text(&text)
    }
}

/// Parses a word-vector text file (`word v1 ... vd` per line, optional
/// `count dim` header) and fills one row per vocabulary word. Words missing
/// from the file fall back to their lowercase form, then to zeros.
pub fn load_pretrained_vectors(text: &str, vocab: &Vocabulary) -> Result<Tensor> {
    let mut table: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut dim: Option<usize> = None;
    for (no, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else {
            continue;
        };
        let values: Vec<&str> = fields.collect();
        if no == 0 && values.len() == 1 && word.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = values.iter().map(|v| v.parse::<f64>()).collect();
        let vec = parsed.map_err(|_| Error::Format(format!("vector line {}: bad number", no + 1)))?;
        match dim {
            None if vec.is_empty() => {
                return Err(Error::Format(format!("vector line {}: no values", no + 1)))
            }
            None => dim = Some(vec.len()),
            Some(d) if d != vec.len() => {
                return Err(Error::Format(format!(
                    "vector line {}: {} values, expected {d}",
                    no + 1,
                    vec.len()
                )))
            }
            _ => {}
        }
        table.entry(word).or_insert(vec);
    }
    let d = dim.ok_or_else(|| Error::Format("vector file is empty".into()))?;
    let mut data = vec![0.0; vocab.words.len() * d];
    for (id, word) in vocab.words.items().iter().enumerate() {
        let row = table
            .get(word.as_str())
            .or_else(|| table.get(word.to_lowercase().as_str()));
        if let Some(row) = row {
            data[id * d..(id + 1) * d].copy_from_slice(row);
        }
    }
    Tensor::matrix(vocab.words.len(), d, data)
}

pub fn load_pretrained_file(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Tensor> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    load_pretrained_vectors(&text, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Example;
    use crate::trees::{Sentence, Token};

    fn corpus(words: &[&str]) -> Corpus {
        let sentence = Sentence::new(words.iter().map(|w| Token::new(*w, "X")).collect());
        Corpus::new(vec![Example::new(sentence, None, None)])
    }

    #[test]
    fn frequency_threshold() {
        let v = Vocabulary::build(&corpus(&["a", "b", "a"]), 2).unwrap();
        assert_ne!(v.word_id("a"), UNK_ID);
        assert_eq!(v.word_id("b"), UNK_ID);
        let v = Vocabulary::build(&corpus(&["a", "b", "a"]), 1).unwrap();
        assert_ne!(v.word_id("b"), UNK_ID);
        assert_eq!(v.word_count(v.word_id("a")), 2);
    }

    #[test]
    fn reserved_ids() {
        let v = Vocabulary::build(&corpus(&["a"]), 1).unwrap();
        assert_eq!(v.label_id(EMPTY), Some(EMPTY_LABEL));
        assert_eq!(v.words.get(PAD), Some(PAD_ID));
        assert_eq!(v.words.get(ROOT), Some(ROOT_ID));
        assert_eq!(v.word_id("never-seen"), UNK_ID);
        assert!(Vocabulary::build(&Corpus::new(vec![]), 1).is_err());
    }

    #[test]
    fn save_load_is_id_stable() {
        let v = Vocabulary::build(&corpus(&["a", "b", "Cé", "a"]), 1).unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        for (name, ns) in v.namespaces() {
            let other = back.namespaces().into_iter().find(|(n, _)| *n == name).unwrap().1;
            assert_eq!(ns.items(), other.items());
            for item in ns.items() {
                assert_eq!(ns.get(item), other.get(item));
            }
        }
        assert!(Vocabulary::from_text("word\ta\t0\n").is_err());
    }

    #[test]
    fn pretrained_fill_and_errors() {
        let v = Vocabulary::build(&corpus(&["cat", "Dog", "emu"]), 1).unwrap();
        let t = load_pretrained_vectors("cat 0.1 0.2\ndog 0.5 0.6\n", &v).unwrap();
        assert_eq!(t.shape(), &[v.words.len(), 2]);
        let row = |w: &str| t.data()[v.word_id(w) * 2..v.word_id(w) * 2 + 2].to_vec();
        assert_eq!(row("cat"), vec![0.1, 0.2]);
        assert_eq!(row("Dog"), vec![0.5, 0.6]);
        assert_eq!(row("emu"), vec![0.0, 0.0]);
        assert!(load_pretrained_vectors("a 1 2\nb 1 2 3\n", &v).is_err());
        let t = load_pretrained_vectors("2 2\ncat 1 2\n", &v).unwrap();
        assert_eq!(t.shape()[1], 2);
    }
}
