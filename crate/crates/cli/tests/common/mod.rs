#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn test_data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub struct GoldenCase {
    pub name: String,
    pub gold: String,
    pub pred: String,
    pub counts: (usize, usize, usize),
    pub prf: [String; 3],
}

pub fn golden_cases() -> Vec<GoldenCase> {
    let text = fs::read_to_string(test_data("evalb_golden.txt")).unwrap();
    let mut out = Vec::new();
    let mut name = String::new();
    let mut gold = String::new();
    let mut pred = String::new();
    let mut counts = (0, 0, 0);
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# ") {
            name = rest.to_string();
        } else if let Some(rest) = line.strip_prefix("gold ") {
            gold = rest.to_string();
        } else if let Some(rest) = line.strip_prefix("pred ") {
            pred = rest.to_string();
        } else if let Some(rest) = line.strip_prefix("counts ") {
            let v: Vec<usize> = rest.split_whitespace().map(|x| x.parse().unwrap()).collect();
            counts = (v[0], v[1], v[2]);
        } else if let Some(rest) = line.strip_prefix("prf ") {
            let v: Vec<String> = rest.split_whitespace().map(String::from).collect();
            out.push(GoldenCase {
                name: name.clone(),
                gold: gold.clone(),
                pred: pred.clone(),
                counts,
                prf: [v[0].clone(), v[1].clone(), v[2].clone()],
            });
        }
    }
    out
}

/// A config training a very small model on the toy treebank for `epochs`.
pub fn tiny_config(dir: &Path, epochs: usize) -> PathBuf {
    let toy = data_dir().join("toy");
    let text = format!(
        "train_const = {:?}\ntrain_dep = {:?}\ndev_const = {:?}\ndev_dep = {:?}\n\
         output_dir = \"run\"\nd_model = 16\nd_word = 8\nd_pos = 8\nd_char_emb = 4\nd_char_out = 8\n\
         d_ff = 16\nspan_hidden = 8\nd_arc = 8\nd_label = 4\ntotal_layers = 2\nshared_layers = 2\n\
         heads = 2\nmax_epochs = {epochs}\nbatch_tokens = 100\n",
        toy.join("train.mrg"),
        toy.join("train.conll"),
        toy.join("train.mrg"),
        toy.join("train.conll"),
    );
    let path = dir.join("tiny.toml");
    fs::write(&path, text).unwrap();
    path
}
