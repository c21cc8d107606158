//! Subcommands of the `joint-parse` binary, kept in a library so tests can
//! drive them without spawning processes.

pub mod oracle;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use joint_parse::config::RunConfig;
use joint_parse::corpus::Corpus;
use joint_parse::metrics::{attachment_counts, bracket_counts, EvalConfig, EvalRecord};
use joint_parse::model::JointModel;
use joint_parse::trainer::{parse_all, train};
use joint_parse::treebank::{read_bracketed, read_conll, write_bracketed_corpus, write_conll};
use joint_parse::trees::{Sentence, Token, MAX_CONSTITUENT_ENUM, MAX_PROJECTIVE_ENUM};
use joint_parse::vocab::{load_pretrained_file, Vocabulary};
use joint_parse::{Error, Result};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::oracle::SuiteResult;

/// Exit status for an error: 2 for anything the caller can fix (usage,
/// configuration, input files), 1 for internal failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Input(_)
        | Error::Parse { .. }
        | Error::Format(_)
        | Error::Data(_)
        | Error::Eval(_)
        | Error::Guard { .. }
        | Error::File { .. } => 2,
        _ => 1,
    }
}

const PATH_KEYS: &[&str] = &[
    "train_const",
    "train_dep",
    "dev_const",
    "dev_dep",
    "pretrained_vectors",
    "output_dir",
];

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::file(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::file(path, e))
}

fn resolve(base: &Path, p: &str) -> String {
    let path = Path::new(p);
    if path.is_absolute() {
        p.to_string()
    } else {
        base.join(path).to_string_lossy().into_owned()
    }
}

/// Reads a config file and applies `overrides`. Relative paths written in
/// the file are taken relative to the file; relative paths given as
/// overrides are taken relative to the working directory. The result holds
/// absolute paths, so its echo can be rerun from anywhere.
pub fn load_run_config(config: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = read_file(config)?;
    let cwd = std::env::current_dir()?;
    let overrides: Vec<(String, String)> = overrides
        .iter()
        .map(|(k, v)| {
            if PATH_KEYS.contains(&k.as_str()) {
                let v = v.trim_matches('"');
                (k.clone(), toml_string(&resolve(&cwd, v)))
            } else {
                (k.clone(), v.clone())
            }
        })
        .collect();
    let mut run = RunConfig::parse(&text, &[])?;
    let base = std::path::absolute(config.parent().unwrap_or(Path::new("."))).map_err(|e| Error::file(config, e))?;
    let file_paths: Vec<(String, String)> = [
        ("train_const", &run.train.train_const),
        ("train_dep", &run.train.train_dep),
        ("dev_const", &run.train.dev_const),
        ("dev_dep", &run.train.dev_dep),
        ("pretrained_vectors", &run.train.pretrained_vectors),
    ]
    .into_iter()
    .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), toml_string(&resolve(&base, v)))))
    .chain(std::iter::once((
        "output_dir".to_string(),
        toml_string(&resolve(&base, &run.train.output_dir)),
    )))
    .collect();
    let mut all = file_paths;
    all.extend(overrides);
    run = RunConfig::parse(&text, &all)?;
    Ok(run)
}

fn toml_string(s: &str) -> String {
    let mut out = String::from('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Dev metrics recorded in a manifest; decoders a mode does not train are
/// left out.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uas: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub las: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_metric: Option<f64>,
}

impl From<&EvalRecord> for ManifestMetrics {
    fn from(r: &EvalRecord) -> Self {
        ManifestMetrics {
            lr: r.lr,
            lp: r.lp,
            f1: r.f1,
            uas: r.uas,
            las: r.las,
            dev_metric: r.dev_metric(),
        }
    }
}

/// Everything needed to reproduce and identify a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// The merged configuration as flat TOML.
    pub config: String,
    pub seed: u64,
    pub vocab_sha256: String,
    pub checkpoint: String,
    pub num_params: usize,
    pub steps: u64,
    pub best_epoch: usize,
    pub dropped_nonprojective: usize,
    pub metrics: ManifestMetrics,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_file(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Paths a training run writes inside its output directory.
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub manifest: PathBuf,
    pub config: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths {
            checkpoint: dir.join("model.ckpt"),
            log: dir.join("train.log"),
            manifest: dir.join("manifest.json"),
            config: dir.join("config.toml"),
        }
    }
}

/// Trains a model as configured and writes checkpoint, log, merged config
/// and manifest into the output directory.
pub fn cmd_train(config: &Path, overrides: &[(String, String)]) -> Result<RunManifest> {
    let mut run = load_run_config(config, overrides)?;
    let cfg = run.train.clone();
    let eval = EvalConfig::profile(&cfg.eval_profile)?;
    let (uses_c, uses_d) = (cfg.mode.uses_const(), cfg.mode.uses_dep());
    let train_corpus = Corpus::load(path_if(&cfg.train_const, uses_c), path_if(&cfg.train_dep, uses_d))?;
    let dev = Corpus::load(path_if(&cfg.dev_const, uses_c), path_if(&cfg.dev_dep, uses_d))?;
    info!("{} training sentences, {} dev sentences", train_corpus.len(), dev.len());
    let vocab = Vocabulary::build(&train_corpus, cfg.min_word_freq)?;
    let pretrained = match &cfg.pretrained_vectors {
        Some(p) => {
            let t = load_pretrained_file(p, &vocab)?;
            run.model.d_pretrained = t.shape()[1];
            run.model.validate()?;
            Some(t)
        }
        None => None,
    };
    let out_dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out_dir).map_err(|e| Error::file(&out_dir, e))?;
    let paths = RunPaths::new(&out_dir);
    let config_text = run.to_toml();
    write_file(&paths.config, &config_text)?;

    let mut model = JointModel::new(&run.model, vocab, pretrained, cfg.seed)?;
    info!("model has {} trainable parameters", model.num_params());
    let log_file = fs::File::create(&paths.log).map_err(|e| Error::file(&paths.log, e))?;
    let mut log = BufWriter::new(log_file);
    let outcome = train(
        &mut model,
        &train_corpus,
        &dev,
        &cfg,
        &eval,
        Some(&paths.checkpoint),
        Some(&mut log as &mut dyn Write),
    )?;
    log.flush()?;

    let vocab_sha256 = hex::encode(Sha256::digest(model.vocab().to_text().as_bytes()));
    let manifest = RunManifest {
        config: config_text,
        seed: cfg.seed,
        vocab_sha256,
        checkpoint: paths.checkpoint.to_string_lossy().into_owned(),
        num_params: model.num_params(),
        steps: outcome.steps,
        best_epoch: outcome.best_epoch,
        dropped_nonprojective: outcome.dropped_nonprojective,
        metrics: outcome.best_dev.as_ref().map(ManifestMetrics::from).unwrap_or_default(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&paths.manifest, &(json + "\n"))?;
    Ok(manifest)
}

fn path_if(p: &Option<String>, on: bool) -> Option<&Path> {
    if on {
        p.as_deref().map(Path::new)
    } else {
        None
    }
}

/// PTB-style escaping so parentheses in words survive bracketed output.
fn escape_form(word: &str) -> String {
    match word {
        "(" => "-LRB-".into(),
        ")" => "-RRB-".into(),
        _ => word.replace('(', "-LRB-").replace(')', "-RRB-"),
    }
}

/// One sentence per nonblank line, tokens separated by whitespace. A line
/// whose every token has the form `word/TAG` (split at the last slash) is
/// tagged; other lines get the placeholder tag `_`, which is an error when
/// the model reads POS tags.
pub fn read_raw_input(text: &str, need_pos: bool) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        let tagged: Option<Vec<(&str, &str)>> = words
            .iter()
            .map(|w| w.rsplit_once('/').filter(|(a, b)| !a.is_empty() && !b.is_empty()))
            .collect();
        let tokens = match tagged {
            Some(pairs) => pairs
                .into_iter()
                .map(|(w, t)| Token::new(escape_form(w), t))
                .collect(),
            None if need_pos => {
                let bad = words
                    .iter()
                    .find(|w| w.rsplit_once('/').is_none_or(|(a, b)| a.is_empty() || b.is_empty()))
                    .expect("some token is untagged");
                return Err(Error::Input(format!(
                    "line {}: token {bad:?} has no POS tag but the model requires word/TAG input",
                    k + 1
                )));
            }
            None => words.iter().map(|w| Token::new(escape_form(w), "_")).collect(),
        };
        out.push(Sentence::new(tokens));
    }
    Ok(out)
}

/// Parses raw text with a trained model, writing bracketed trees and CoNLL
/// rows in input order. Returns the number of sentences.
pub fn cmd_parse(checkpoint: &Path, input: &Path, trees_out: &Path, conll_out: &Path, threads: usize) -> Result<usize> {
    let text = read_file(input)?;
    let model = JointModel::load(checkpoint)?;
    let sentences = read_raw_input(&text, model.config().use_pos)?;
    let parsed = parse_all(&model, &sentences, threads.max(1))?;
    let trees: Vec<_> = parsed.iter().map(|p| p.0.clone()).collect();
    write_file(trees_out, &write_bracketed_corpus(&trees))?;
    write_file(conll_out, &write_conll(sentences.iter().zip(parsed.iter().map(|p| &p.1))))?;
    info!("parsed {} sentences", sentences.len());
    Ok(sentences.len())
}

/// Files to score; either pair may be left out.
#[derive(Clone, Debug, Default)]
pub struct EvalInputs {
    pub gold_trees: Option<PathBuf>,
    pub pred_trees: Option<PathBuf>,
    pub gold_conll: Option<PathBuf>,
    pub pred_conll: Option<PathBuf>,
}

fn pair<'a>(gold: &'a Option<PathBuf>, pred: &'a Option<PathBuf>, what: &str) -> Result<Option<(&'a Path, &'a Path)>> {
    match (gold, pred) {
        (Some(g), Some(p)) => Ok(Some((g, p))),
        (None, None) => Ok(None),
        _ => Err(Error::Input(format!("{what} evaluation needs both gold and predicted files"))),
    }
}

/// Scores predicted trees against gold under `profile`.
pub fn cmd_eval(inputs: &EvalInputs, profile: &str) -> Result<EvalRecord> {
    let cfg = EvalConfig::profile(profile)?;
    let brackets = pair(&inputs.gold_trees, &inputs.pred_trees, "constituency")?;
    let deps = pair(&inputs.gold_conll, &inputs.pred_conll, "dependency")?;
    if brackets.is_none() && deps.is_none() {
        return Err(Error::Input("nothing to evaluate: give gold and predicted trees or CoNLL files".into()));
    }
    let brackets = match brackets {
        Some((g, p)) => {
            let gold: Vec<_> = read_bracketed(&read_file(g)?)?.into_iter().map(|x| x.1).collect();
            let pred: Vec<_> = read_bracketed(&read_file(p)?)?.into_iter().map(|x| x.1).collect();
            if gold.len() != pred.len() {
                return Err(Error::Eval(format!(
                    "{} has {} trees but {} has {}",
                    g.display(),
                    gold.len(),
                    p.display(),
                    pred.len()
                )));
            }
            Some(bracket_counts(&pred, &gold, &cfg)?)
        }
        None => None,
    };
    let attachments = match deps {
        Some((g, p)) => {
            let gold = read_conll(&read_file(g)?)?;
            let pred = read_conll(&read_file(p)?)?;
            if gold.len() != pred.len() {
                return Err(Error::Eval(format!(
                    "{} has {} sentences but {} has {}",
                    g.display(),
                    gold.len(),
                    p.display(),
                    pred.len()
                )));
            }
            for (i, ((gs, _), (ps, _))) in gold.iter().zip(&pred).enumerate() {
                if !gs.forms().eq(ps.forms()) {
                    return Err(Error::Eval(format!("sentence {}: predicted tokens differ from gold", i + 1)));
                }
            }
            let sentences: Vec<Sentence> = gold.iter().map(|x| x.0.clone()).collect();
            let gold_trees: Vec<_> = gold.into_iter().map(|x| x.1).collect();
            let pred_trees: Vec<_> = pred.into_iter().map(|x| x.1).collect();
            Some(attachment_counts(&pred_trees, &gold_trees, &sentences, &cfg)?)
        }
        None => None,
    };
    Ok(EvalRecord::from_counts(brackets, attachments))
}

/// Writes an evaluation record as JSON.
pub fn write_eval_json(record: &EvalRecord, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(record).map_err(|e| Error::Format(e.to_string()))?;
    write_file(path, &(json + "\n"))
}

/// Runs every brute-force suite against the real decoders.
pub fn cmd_oracle_check(seeds: u64, max_n: usize, grad_seeds: u64) -> Result<Vec<SuiteResult>> {
    let max = MAX_CONSTITUENT_ENUM.min(MAX_PROJECTIVE_ENUM);
    if max_n == 0 || max_n > max {
        return Err(Error::Guard { n: max_n, max });
    }
    use joint_parse::constituent::{cky_decode, loss_augmented_decode};
    use joint_parse::dependency::eisner_decode;
    Ok(vec![
        oracle::cky_suite(seeds, max_n, &[2, 4], cky_decode),
        oracle::loss_augmented_suite(seeds, max_n, &[2, 4], loss_augmented_decode),
        oracle::eisner_suite(seeds, max_n, eisner_decode),
        oracle::primitive_gradient_suite(grad_seeds),
        oracle::model_gradient_suite(grad_seeds, 8),
    ])
}
