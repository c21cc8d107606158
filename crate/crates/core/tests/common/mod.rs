#![allow(dead_code)]

use joint_parse::config::{CharEncoder, Composition, ModelConfig};
use joint_parse::corpus::{Corpus, Example};
use joint_parse::model::JointModel;
use joint_parse::treebank::read_bracketed;
use joint_parse::trees::DependencyTree;
use joint_parse::vocab::Vocabulary;

pub fn example(tree: &str, heads: &[usize], rels: &[&str]) -> Example {
    let (sentence, tree) = read_bracketed(tree).unwrap().remove(0);
    let deps = DependencyTree::new(heads.to_vec(), rels.iter().map(|r| r.to_string()).collect());
    Example::new(sentence, Some(tree), Some(deps))
}

pub fn three_words() -> Example {
    example(
        "(S (NP (DT the) (NN dog)) (VP (VBD barked)))",
        &[2, 3, 0],
        &["det", "nsubj", "root"],
    )
}

pub fn small_corpus() -> Corpus {
    Corpus::new(vec![
        three_words(),
        example(
            "(S (NP (NNP Kim)) (VP (VBD saw) (NP (DT a) (NN cat))) (. .))",
            &[2, 0, 4, 2, 2],
            &["nsubj", "root", "det", "dobj", "punct"],
        ),
        example(
            "(S (NP (PRP she)) (VP (VBD slept)))",
            &[2, 0],
            &["nsubj", "root"],
        ),
    ])
}

pub fn tiny_config(kind: CharEncoder, composition: Composition) -> ModelConfig {
    ModelConfig {
        use_pos: true,
        char_encoder: kind,
        composition,
        d_word: 4,
        d_pos: 4,
        d_char_emb: 4,
        d_char_out: 4,
        char_cnn_widths: vec![2, 3],
        d_model: 8,
        max_len: 32,
        total_layers: 2,
        shared_layers: 1,
        heads: 2,
        d_ff: 8,
        span_hidden: 6,
        d_arc: 6,
        d_label: 4,
        ..ModelConfig::default()
    }
}

pub fn tiny_model(seed: u64) -> JointModel {
    let corpus = small_corpus();
    let vocab = Vocabulary::build(&corpus, 1).unwrap();
    let kind = if seed % 2 == 0 { CharEncoder::Lstm } else { CharEncoder::Cnn };
    let comp = if seed % 4 < 2 { Composition::Sum } else { Composition::Concat };
    JointModel::new(&tiny_config(kind, comp), vocab, None, seed).unwrap()
}
