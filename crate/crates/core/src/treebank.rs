//! Readers and writers for bracketed constituency trees and CoNLL-style
//! dependency files.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::trees::{ConstituentTree, DependencyTree, Node, Sentence, Token};

#[derive(Debug, PartialEq)]
enum Tok<'a> {
    Open,
    Close,
    Atom(&'a str),
}

struct Lexer<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn location(&self, offset: usize) -> (usize, usize) {
        let before = &self.text[..offset];
        let line = before.matches('\n').count() + 1;
        let col = before.rfind('\n').map_or(offset, |nl| offset - nl - 1) + 1;
        (line, col)
    }

    fn error(&self, offset: usize, message: impl Into<String>) -> Error {
        let (line, column) = self.location(offset);
        Error::Parse {
            line,
            column,
            message: message.into(),
        }
    }

    /// Next token and its byte offset.
    fn next(&mut self) -> Option<(usize, Tok<'a>)> {
        let rest = &self.text[self.pos..];
        let skipped = rest.len() - rest.trim_start().len();
        self.pos += skipped;
        let start = self.pos;
        let c = self.text[start..].chars().next()?;
        match c {
            '(' => {
                self.pos += 1;
                Some((start, Tok::Open))
            }
            ')' => {
                self.pos += 1;
                Some((start, Tok::Close))
            }
            _ => {
                let end = self.text[start..]
                    .find(|c: char| c.is_whitespace() || c == '(' || c == ')')
                    .map_or(self.text.len(), |e| start + e);
                self.pos = end;
                Some((start, Tok::Atom(&self.text[start..end])))
            }
        }
    }

    fn peek(&mut self) -> Option<(usize, Tok<'a>)> {
        let saved = self.pos;
        let t = self.next();
        self.pos = saved;
        t
    }
}

enum Parsed {
    Node(Node),
    Word(String),
}

/// Parses the body of a bracket whose `(` was at `open`.
fn parse_bracket(lex: &mut Lexer, open: usize) -> Result<Option<Node>> {
    let label = match lex.peek() {
        Some((_, Tok::Atom(a))) => {
            lex.next();
            Some(a.to_string())
        }
        _ => None,
    };
    let mut children = Vec::new();
    loop {
        match lex.next() {
            None => {
                return Err(lex.error(
                    lex.text.len(),
                    format!("unexpected end of input, bracket opened at byte {open} is unclosed"),
                ))
            }
            Some((_, Tok::Close)) => break,
            Some((at, Tok::Open)) => match parse_bracket(lex, at)? {
                Some(node) => children.push(Parsed::Node(node)),
                None => return Err(lex.error(at, "empty tree")),
            },
            Some((_, Tok::Atom(w))) => children.push(Parsed::Word(w.to_string())),
        }
    }
    match (label, children.len()) {
        (None, 0) => Ok(None),
        // unlabeled wrapper around a single tree
        (None, 1) => match children.pop().unwrap() {
            Parsed::Node(n) => Ok(Some(n)),
            Parsed::Word(_) => Err(lex.error(open, "word without a preterminal label")),
        },
        (None, _) => Err(lex.error(open, "unlabeled bracket with several children")),
        (Some(label), 0) => Err(lex.error(open, format!("bracket {label} has no children"))),
        (Some(label), 1) if matches!(children[0], Parsed::Word(_)) => {
            let Some(Parsed::Word(w)) = children.pop() else {
                unreachable!()
            };
            Ok(Some(Node::leaf(label, w)))
        }
        (Some(label), _) => {
            let mut kids = Vec::with_capacity(children.len());
            for c in children {
                match c {
                    Parsed::Node(n) => kids.push(n),
                    Parsed::Word(w) => {
                        return Err(lex.error(
                            open,
                            format!("word {w:?} under {label} is mixed with subtrees"),
                        ))
                    }
                }
            }
            Ok(Some(Node::internal(label, kids)))
        }
    }
}

/// Reads whitespace-separated bracketed trees. An unlabeled outer wrapper
/// around a single tree is stripped. Tokens take their POS from the
/// preterminal above them.
pub fn read_bracketed(text: &str) -> Result<Vec<(Sentence, ConstituentTree)>> {
    let mut lex = Lexer { text, pos: 0 };
    let mut out = Vec::new();
    while let Some((at, tok)) = lex.next() {
        match tok {
            Tok::Open => match parse_bracket(&mut lex, at)? {
                Some(root) => {
                    let tree = ConstituentTree::new(root);
                    out.push((tree.sentence(), tree));
                }
                None => return Err(lex.error(at, "empty tree")),
            },
            Tok::Close => return Err(lex.error(at, "unbalanced ')'")),
            Tok::Atom(a) => return Err(lex.error(at, format!("text {a:?} outside of a tree"))),
        }
    }
    Ok(out)
}

/// Single-line bracketed rendering, e.g. `(S (NP (DT The) (NN cat)) (VP (VBD sat)))`.
pub fn write_bracketed(tree: &ConstituentTree) -> String {
    fn render(node: &Node, out: &mut String) {
        match node {
            Node::Leaf { pos, word } => {
                let _ = write!(out, "({pos} {word})");
            }
            Node::Internal { label, children } => {
                out.push('(');
                out.push_str(label);
                for c in children {
                    out.push(' ');
                    render(c, out);
                }
                out.push(')');
            }
        }
    }
    let mut out = String::new();
    render(&tree.root, &mut out);
    out
}

/// One tree per line.
pub fn write_bracketed_corpus<'a>(trees: impl IntoIterator<Item = &'a ConstituentTree>) -> String {
    let mut out = String::new();
    for t in trees {
        out.push_str(&write_bracketed(t));
        out.push('\n');
    }
    out
}

/// Column layout of a CoNLL line, chosen by column count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layout {
    /// id form pos head rel
    Minimal,
    /// id form lemma pos head rel [extra...]
    MinimalLemma,
    /// id form lemma cpos pos feats head rel ...
    ConllX,
}

impl Layout {
    fn detect(columns: usize) -> Option<Layout> {
        match columns {
            5 => Some(Layout::Minimal),
            6..=9 => Some(Layout::MinimalLemma),
            c if c >= 10 => Some(Layout::ConllX),
            _ => None,
        }
    }

    /// (pos, head, rel) column indices.
    fn columns(self, cols: &[&str]) -> (usize, usize, usize) {
        match self {
            Layout::Minimal => (2, 3, 4),
            Layout::MinimalLemma => (3, 4, 5),
            Layout::ConllX => {
                // fine-grained tag when present, else the coarse one
                let pos = if cols[4] == "_" { 3 } else { 4 };
                (pos, 6, 7)
            }
        }
    }
}

/// Reads blank-line separated CoNLL blocks. Lines are tab-separated; lines
/// without tabs are split on whitespace. Comment lines and multiword or
/// empty-node rows are skipped.
pub fn read_conll(text: &str) -> Result<Vec<(Sentence, DependencyTree)>> {
    let mut out = Vec::new();
    let mut block: Vec<(usize, Vec<&str>)> = Vec::new();
    let lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    for (line_no, line) in lines.chain(std::iter::once((0, ""))) {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            if !block.is_empty() {
                out.push(conll_block(&block, out.len() + 1)?);
                block.clear();
            }
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = if trimmed.contains('\t') {
            trimmed.split('\t').map(str::trim).collect()
        } else {
            trimmed.split_whitespace().collect()
        };
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        block.push((line_no, cols));
    }
    Ok(out)
}

fn conll_block(block: &[(usize, Vec<&str>)], sentence_no: usize) -> Result<(Sentence, DependencyTree)> {
    let n = block.len();
    let mut tokens = Vec::with_capacity(n);
    let mut heads = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (k, (line, cols)) in block.iter().enumerate() {
        let fail = |msg: String| Error::Format(format!("sentence {sentence_no}, line {line}: {msg}"));
        let layout = Layout::detect(cols.len())
            .ok_or_else(|| fail(format!("expected at least 5 columns, found {}", cols.len())))?;
        let (pos_col, head_col, rel_col) = layout.columns(cols);
        let id: usize = cols[0]
            .parse()
            .map_err(|_| fail(format!("bad token index {:?}", cols[0])))?;
        if id != k + 1 {
            return Err(fail(format!("token index {id}, expected {}", k + 1)));
        }
        let head: usize = cols[head_col]
            .parse()
            .map_err(|_| fail(format!("bad head index {:?}", cols[head_col])))?;
        if head > n {
            return Err(fail(format!("head index {head} out of range 0..={n}")));
        }
        tokens.push(Token::new(cols[1], cols[pos_col]));
        heads.push(head);
        labels.push(cols[rel_col].to_string());
    }
    Ok((Sentence::new(tokens), DependencyTree::new(heads, labels)))
}

/// Writes 10-column CoNLL-X blocks.
pub fn write_conll<'a>(items: impl IntoIterator<Item = (&'a Sentence, &'a DependencyTree)>) -> String {
    let mut out = String::new();
    for (sentence, tree) in items {
        for (i, tok) in sentence.tokens.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{}\t_\t{}\t{}\t_\t{}\t{}\t_\t_",
                i + 1,
                tok.form,
                tok.pos,
                tok.pos,
                tree.heads[i],
                tree.labels[i]
            );
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reads_simple_tree() {
        let parsed = read_bracketed("(S (NP (DT The) (NN cat)) (VP (VBD sat)))").unwrap();
        assert_eq!(parsed.len(), 1);
        let (sentence, tree) = &parsed[0];
        assert_eq!(sentence.len(), 3);
        assert_eq!(tree.root.label(), "S");
        assert_eq!(sentence.tokens[2], Token::new("sat", "VBD"));
    }

    #[test]
    fn strips_outer_wrapper() {
        let parsed = read_bracketed("((S (NP (PRP I))))").unwrap();
        assert_eq!(parsed[0].1.root.label(), "S");
        assert_eq!(parsed[0].0.len(), 1);
    }

    #[test]
    fn reports_truncation_position() {
        let err = read_bracketed("(S (NP (DT The)").unwrap_err();
        match err {
            Error::Parse { line, column, .. } => assert_eq!((line, column), (1, 16)),
            e => panic!("unexpected {e}"),
        }
        let err = read_bracketed("(S (NP (DT The)))\n  )").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, column: 3, .. }), "{err}");
        assert!(read_bracketed("()").is_err());
        assert!(read_bracketed("(S ())").is_err());
    }

    #[test]
    fn several_trees_and_unary_chain() {
        let text = "(S (VP (VB go)))\n\n(NP (DT a) (NN b))\n";
        let parsed = read_bracketed(text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(write_bracketed(&parsed[0].1), "(S (VP (VB go)))");
    }

    #[test]
    fn conll_minimal_block() {
        let parsed = read_conll("1\tThe\tDT\t2\tdet\n2\tcat\tNN\t0\troot\n").unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].1.heads, vec![2, 0]);
        assert_eq!(parsed[0].1.labels, vec!["det", "root"]);
        assert_eq!(parsed[0].0.tokens[0].pos, "DT");
        // whitespace-separated variant
        let parsed = read_conll("1 The DT 2 det\n2 cat NN 0 root\n").unwrap();
        assert_eq!(parsed[0].1.heads, vec![2, 0]);
    }

    #[test]
    fn conll_empty_and_out_of_range() {
        assert!(read_conll("").unwrap().is_empty());
        let err = read_conll("1\tThe\tDT\t5\tdet\n2\tcat\tNN\t0\troot\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sentence 1") && msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn conll_x_layout_and_multiple_roots_allowed() {
        let text = "# c\n1\tA\ta\tDT\tDT\t_\t0\troot\t_\t_\n2\tB\tb\tNN\tNNS\t_\t0\troot\t_\t_\n\n";
        let parsed = read_conll(text).unwrap();
        assert_eq!(parsed[0].1.heads, vec![0, 0]);
        assert_eq!(parsed[0].0.tokens[1].pos, "NNS");
    }

    fn arb_node(depth: u32) -> BoxedStrategy<Node> {
        let leaf = ("[A-Z]{1,3}", "[a-z0-9.,]{1,5}").prop_map(|(p, w)| Node::leaf(p, w));
        if depth == 0 {
            return leaf.boxed();
        }
        prop_oneof![
            2 => leaf,
            3 => ("[A-Z]{1,4}", prop::collection::vec(arb_node(depth - 1), 1..4))
                .prop_map(|(l, c)| Node::internal(l, c)),
        ]
        .boxed()
    }

    proptest! {
        #[test]
        fn bracketed_round_trip(root in arb_node(4)) {
            let tree = ConstituentTree::new(root);
            let text = write_bracketed(&tree);
            let back = read_bracketed(&text).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].1, &tree);
        }

        #[test]
        fn conll_round_trip(heads in prop::collection::vec(0usize..6, 1..6)) {
            let n = heads.len();
            let heads: Vec<usize> = heads.into_iter().map(|h| h % (n + 1)).collect();
            let sentence = Sentence::new((0..n).map(|i| Token::new(format!("w{i}"), "NN")).collect());
            let labels = (0..n).map(|i| format!("r{}", i % 3)).collect();
            let tree = DependencyTree::new(heads, labels);
            let text = write_conll([(&sentence, &tree)]);
            let back = read_conll(&text).unwrap();
            prop_assert_eq!(&back[0].0, &sentence);
            prop_assert_eq!(&back[0].1, &tree);
        }
    }
}
