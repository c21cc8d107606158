//! Writes the bundled synthetic treebanks.
//!
//! Sentences come from a small grammar whose prepositional attachment is
//! fixed by the preposition ("of" attaches to nouns, the rest to verbs), so
//! a parser has to use the words to get brackets and heads right. The
//! dependency side is derived with head rules, which keeps it projective.
//!
//! Usage: `cargo run --example toy_treebank -- <data dir>`

use std::fs;
use std::path::Path;

use joint_parse::treebank::{write_bracketed_corpus, write_conll};
use joint_parse::trees::{ConstituentTree, DependencyTree, Node};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DT: &[&str] = &["the", "a", "every", "this"];
const NN: &[&str] = &[
    "dog", "cat", "man", "woman", "telescope", "park", "garden", "book", "table", "ball", "house", "river", "child",
    "teacher", "letter",
];
const JJ: &[&str] = &["big", "small", "red", "old", "happy", "quiet"];
const NNP: &[&str] = &["Kim", "Sandy", "Paris", "Alex", "Maria"];
const PRP: &[&str] = &["she", "he", "they"];
const VBD_T: &[&str] = &["saw", "liked", "found", "painted", "read", "chased"];
const VBD_I: &[&str] = &["slept", "laughed", "arrived"];
const VB: &[&str] = &["see", "find", "read", "chase"];
const MD: &[&str] = &["will", "can"];
const IN_V: &[&str] = &["with", "in", "near", "on"];
const RB: &[&str] = &["quickly", "yesterday", "today"];

struct Gen {
    rng: ChaCha8Rng,
}

impl Gen {
    fn pick(&mut self, words: &[&str]) -> String {
        words.choose(&mut self.rng).expect("nonempty").to_string()
    }

    fn leaf(&mut self, tag: &str, words: &[&str]) -> Node {
        let w = self.pick(words);
        Node::leaf(tag, w)
    }

    fn chance(&mut self, p: f64) -> bool {
        self.rng.gen::<f64>() < p
    }

    fn simple_np(&mut self) -> Node {
        if self.chance(0.25) {
            let n = self.leaf("NNP", NNP);
            return Node::internal("NP", vec![n]);
        }
        let mut kids = vec![self.leaf("DT", DT)];
        if self.chance(0.3) {
            kids.push(self.leaf("JJ", JJ));
        }
        kids.push(self.leaf("NN", NN));
        Node::internal("NP", kids)
    }

    fn np(&mut self) -> Node {
        let base = self.simple_np();
        if self.chance(0.25) {
            let of = Node::leaf("IN", "of");
            let obj = self.simple_np();
            Node::internal("NP", vec![base, Node::internal("PP", vec![of, obj])])
        } else {
            base
        }
    }

    fn subject(&mut self) -> Node {
        if self.chance(0.2) {
            let p = self.leaf("PRP", PRP);
            Node::internal("NP", vec![p])
        } else {
            self.np()
        }
    }

    fn verbal_pp(&mut self) -> Node {
        let p = self.leaf("IN", IN_V);
        let obj = self.simple_np();
        Node::internal("PP", vec![p, obj])
    }

    fn advp(&mut self) -> Node {
        let r = self.leaf("RB", RB);
        Node::internal("ADVP", vec![r])
    }

    fn base_vp(&mut self) -> Node {
        let mut kids = vec![self.leaf("VB", VB), self.np()];
        if self.chance(0.3) {
            kids.push(self.verbal_pp());
        }
        Node::internal("VP", kids)
    }

    fn vp(&mut self) -> Node {
        let r: f64 = self.rng.gen();
        if r < 0.5 {
            let mut kids = vec![self.leaf("VBD", VBD_T), self.np()];
            if self.chance(0.4) {
                kids.push(self.verbal_pp());
            }
            Node::internal("VP", kids)
        } else if r < 0.75 {
            let mut kids = vec![self.leaf("VBD", VBD_I)];
            if self.chance(0.5) {
                kids.push(self.verbal_pp());
            }
            if self.chance(0.3) {
                kids.push(self.advp());
            }
            Node::internal("VP", kids)
        } else {
            let md = self.leaf("MD", MD);
            let inner = self.base_vp();
            Node::internal("VP", vec![md, inner])
        }
    }

    fn sentence(&mut self) -> Node {
        if self.chance(0.1) {
            // imperative; without the period this is an S over VP unary chain
            let vp = self.base_vp();
            let mut kids = vec![vp];
            if self.chance(0.5) {
                kids.push(Node::leaf(".", "."));
            }
            return Node::internal("S", kids);
        }
        let mut kids = Vec::new();
        if self.chance(0.15) {
            kids.push(self.advp());
            kids.push(Node::leaf(",", ","));
        }
        kids.push(self.subject());
        kids.push(self.vp());
        if self.chance(0.85) {
            kids.push(Node::leaf(".", "."));
        }
        Node::internal("S", kids)
    }
}

fn head_child(label: &str, kids: &[Node]) -> usize {
    let find = |f: &dyn Fn(&Node) -> bool| kids.iter().position(f);
    let is_tag = |n: &Node, tags: &[&str]| matches!(n, Node::Leaf { pos, .. } if tags.contains(&pos.as_str()));
    let is_phrase = |n: &Node, l: &str| matches!(n, Node::Internal { label, .. } if label == l);
    let found = match label {
        "S" => find(&|n| is_phrase(n, "VP")),
        "VP" => find(&|n| is_tag(n, &["VBD", "VB"])).or_else(|| find(&|n| is_phrase(n, "VP"))),
        "NP" => find(&|n| is_phrase(n, "NP")).or_else(|| {
            kids.iter()
                .rposition(|n| is_tag(n, &["NN", "NNP", "PRP"]))
        }),
        "PP" => find(&|n| is_tag(n, &["IN"])),
        "ADVP" => find(&|n| is_tag(n, &["RB"])),
        _ => None,
    };
    found.unwrap_or(0)
}

fn relation(parent: &str, child: &Node) -> &'static str {
    match child {
        Node::Leaf { pos, .. } => match pos.as_str() {
            "DT" => "det",
            "JJ" => "amod",
            "MD" => "aux",
            "RB" => "advmod",
            "," | "." => "punct",
            _ => "dep",
        },
        Node::Internal { label, .. } => match (parent, label.as_str()) {
            ("S", "NP") => "nsubj",
            ("VP", "NP") => "dobj",
            ("PP", "NP") => "pobj",
            (_, "PP") => "prep",
            (_, "ADVP") => "advmod",
            _ => "dep",
        },
    }
}

/// Returns the head word position (0-based) of `node`, filling `heads` and
/// `rels` for every dependent inside it.
fn attach(node: &Node, next: &mut usize, heads: &mut [usize], rels: &mut [String]) -> usize {
    match node {
        Node::Leaf { .. } => {
            let i = *next;
            *next += 1;
            i
        }
        Node::Internal { label, children } => {
            let hk = head_child(label, children);
            let child_heads: Vec<usize> = children.iter().map(|c| attach(c, next, heads, rels)).collect();
            let h = child_heads[hk];
            for (k, c) in children.iter().enumerate() {
                if k != hk {
                    heads[child_heads[k]] = h + 1;
                    rels[child_heads[k]] = relation(label, c).to_string();
                }
            }
            h
        }
    }
}

fn dependencies(tree: &ConstituentTree) -> DependencyTree {
    let n = tree.len();
    let mut heads = vec![0; n];
    let mut rels = vec![String::new(); n];
    let mut next = 0;
    let root = attach(&tree.root, &mut next, &mut heads, &mut rels);
    heads[root] = 0;
    rels[root] = "root".into();
    DependencyTree::new(heads, rels)
}

fn write(dir: &Path, name: &str, count: usize, seed: u64) -> std::io::Result<()> {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let trees: Vec<ConstituentTree> = (0..count).map(|_| ConstituentTree::new(g.sentence())).collect();
    let deps: Vec<DependencyTree> = trees.iter().map(dependencies).collect();
    let sentences: Vec<_> = trees.iter().map(ConstituentTree::sentence).collect();
    for d in &deps {
        assert!(d.validate().is_ok() && d.is_projective());
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{name}.mrg")), write_bracketed_corpus(&trees))?;
    fs::write(dir.join(format!("{name}.conll")), write_conll(sentences.iter().zip(&deps)))?;
    Ok(())
}

fn main() -> std::io::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "data".into());
    let out = Path::new(&out);
    write(&out.join("toy"), "train", 32, 1)?;
    write(&out.join("mini"), "train", 500, 2)?;
    write(&out.join("mini"), "dev", 100, 3)?;
    Ok(())
}
