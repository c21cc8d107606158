//! Optimization of `J1 + lambda * J2`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::thread;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, TrainConfig};
use crate::corpus::{Corpus, Example};
use crate::error::{Error, Result};
use crate::metrics::{attachment_counts, bracket_counts, EvalConfig, EvalRecord};
use crate::model::{Instance, JointModel, SentenceGrad};
use crate::tensor::{read_checkpoint_file, write_checkpoint_file, Gradients, ParamId, ParamStore, Tensor};
use crate::trees::{ConstituentTree, DependencyTree, Sentence};
use crate::vocab::UNK_ID;

/// Learning rate at 1-based `step`: linear warmup, then inverse square
/// root decay.
pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
    let step = step.max(1) as f64;
    let warm = cfg.warmup_steps as f64;
    if cfg.warmup_steps == 0 {
        cfg.learning_rate
    } else if step <= warm {
        cfg.learning_rate * step / warm
    } else {
        cfg.learning_rate * (warm / step).sqrt()
    }
}

/// Step counter, selection bookkeeping and Adam moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: usize,
    m: BTreeMap<ParamId, Vec<f64>>,
    v: BTreeMap<ParamId, Vec<f64>>,
}

impl TrainState {
    pub fn new() -> Self {
        TrainState::default()
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(&id)?.as_slice(), self.v.get(&id)?.as_slice()))
    }

    /// One Adam update with bias correction. Parameters without a gradient
    /// entry (and frozen ones) are left untouched, moments included.
    pub fn adam_update(&mut self, store: &mut ParamStore, grads: &Gradients, cfg: &TrainConfig) {
        self.step += 1;
        let lr = learning_rate(cfg, self.step);
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (id, g) in grads.iter() {
            if store.is_frozen(id) {
                continue;
            }
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }

    fn to_named(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("state.step".to_string(), Tensor::scalar(self.step as f64)),
            ("state.epoch".to_string(), Tensor::scalar(self.epoch as f64)),
            ("state.best_epoch".to_string(), Tensor::scalar(self.best_epoch as f64)),
            (
                "state.best_metric".to_string(),
                match self.best_metric {
                    Some(b) => Tensor::new(vec![1], vec![b]).expect("one value"),
                    None => Tensor::new(vec![0], vec![]).expect("empty"),
                },
            ),
        ];
        for (prefix, table) in [("adam.m", &self.m), ("adam.v", &self.v)] {
            for (id, values) in table {
                let shape = store.get(*id).shape().to_vec();
                let t = Tensor::new(shape, values.clone()).expect("moment matches parameter");
                out.push((format!("{prefix}.{}", store.name(*id)), t));
            }
        }
        out
    }

    pub fn save(&self, path: &Path, store: &ParamStore) -> Result<()> {
        write_checkpoint_file(path, &self.to_named(store))
    }

    pub fn load(path: &Path, store: &ParamStore) -> Result<Self> {
        let named = read_checkpoint_file(path)?;
        let mut state = TrainState::new();
        let scalar = |t: &Tensor| t.data().first().copied().unwrap_or(0.0);
        for (name, t) in named {
            match name.as_str() {
                "state.step" => state.step = scalar(&t) as u64,
                "state.epoch" => state.epoch = scalar(&t) as usize,
                "state.best_epoch" => state.best_epoch = scalar(&t) as usize,
                "state.best_metric" => state.best_metric = t.data().first().copied(),
                other => {
                    let (table, pname) = if let Some(p) = other.strip_prefix("adam.m.") {
                        (&mut state.m, p)
                    } else if let Some(p) = other.strip_prefix("adam.v.") {
                        (&mut state.v, p)
                    } else {
                        return Err(Error::Checkpoint(format!("unexpected entry {other} in training state")));
                    };
                    let id = store
                        .id(pname)
                        .ok_or_else(|| Error::Checkpoint(format!("moment for unknown parameter {pname}")))?;
                    if store.get(id).shape() != t.shape() {
                        return Err(Error::Checkpoint(format!("moment shape mismatch for {pname}")));
                    }
                    table.insert(id, t.into_data());
                }
            }
        }
        Ok(state)
    }
}

/// Summed losses of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub j1: f64,
    pub j2: f64,
    pub total: f64,
}

/// Per-sentence gradients for `batch`, each with its own dropout stream,
/// in batch order regardless of how the work is split across threads.
pub fn batch_gradients(
    model: &JointModel,
    batch: &[Instance],
    mode: Mode,
    lambda: f64,
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<SentenceGrad>> {
    let run = |inst: &Instance, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.sentence_grad(inst, mode, lambda, true, &mut rng)
    };
    if threads <= 1 || batch.len() <= 1 {
        return batch.iter().zip(seeds).map(|(i, &s)| run(i, s)).collect();
    }
    let chunk = batch.len().div_ceil(threads);
    let parts: Vec<Result<Vec<SentenceGrad>>> = thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .zip(seeds.chunks(chunk))
            .map(|(b, s)| scope.spawn(move || b.iter().zip(s).map(|(i, &seed)| run(i, seed)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(batch.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// One optimizer update on `J1 + lambda * J2` summed over the batch.
pub fn joint_step<R: Rng>(
    model: &mut JointModel,
    batch: &[Instance],
    cfg: &TrainConfig,
    state: &mut TrainState,
    rng: &mut R,
) -> Result<StepLosses> {
    let lambda = cfg.effective_lambda();
    for (i, inst) in batch.iter().enumerate() {
        if cfg.mode.uses_const() && inst.spans.is_none() {
            return Err(Error::Data(format!("batch sentence {} has no constituency tree", i + 1)));
        }
        if cfg.mode.uses_dep() && inst.heads.is_none() {
            return Err(Error::Data(format!("batch sentence {} has no dependency tree", i + 1)));
        }
    }
    let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
    let mut losses = StepLosses::default();
    let mut grads = Gradients::new();
    let mut add = |s: &SentenceGrad| {
        losses.j1 += s.j1;
        losses.j2 += s.j2;
        grads.merge(&s.grads);
    };
    if cfg.deterministic || cfg.threads <= 1 {
        for s in &batch_gradients(model, batch, cfg.mode, lambda, &seeds, cfg.threads)? {
            add(s);
        }
    } else {
        // merge in completion order; floating-point sums may then vary run to run
        let model = &*model;
        let (tx, rx) = std::sync::mpsc::channel();
        let chunk = batch.len().div_ceil(cfg.threads);
        thread::scope(|scope| -> Result<()> {
            for (b, s) in batch.chunks(chunk).zip(seeds.chunks(chunk)) {
                let tx = tx.clone();
                scope.spawn(move || {
                    for (inst, &seed) in b.iter().zip(s) {
                        let mut r = ChaCha8Rng::seed_from_u64(seed);
                        let _ = tx.send(model.sentence_grad(inst, cfg.mode, lambda, true, &mut r));
                    }
                });
            }
            drop(tx);
            for s in rx {
                add(&s?);
            }
            Ok(())
        })?;
    }
    losses.total = losses.j1 + lambda * losses.j2;
    let next = state.step + 1;
    if !losses.total.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite loss {} at step {} (learning rate {:e})",
            losses.total,
            next,
            learning_rate(cfg, next)
        )));
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite gradient norm at step {} (learning rate {:e})",
            next,
            learning_rate(cfg, next)
        )));
    }
    if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        grads.scale(cfg.clip_norm / norm);
    }
    state.adam_update(model.store_mut(), &grads, cfg);
    Ok(losses)
}

/// Greedy token-budget batches over `order`; a sentence longer than the
/// budget gets a batch of its own.
pub fn make_batches(lengths: &[usize], order: &[usize], budget: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut tokens = 0;
    for &i in order {
        if !cur.is_empty() && tokens + lengths[i] > budget {
            out.push(std::mem::take(&mut cur));
            tokens = 0;
        }
        cur.push(i);
        tokens += lengths[i];
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Replaces each training-singleton word by UNK with probability `p`.
fn replace_singletons<R: Rng>(inst: &Instance, model: &JointModel, p: f64, rng: &mut R) -> Instance {
    let mut out = inst.clone();
    if p > 0.0 {
        let n = out.ids.words.len();
        for w in &mut out.ids.words[1..n - 1] {
            if model.vocab().word_count(*w) == 1 && rng.gen::<f64>() < p {
                *w = UNK_ID;
            }
        }
    }
    out
}

/// Decodes every sentence, fanning out over `threads` workers.
pub fn parse_all(
    model: &JointModel,
    sentences: &[Sentence],
    threads: usize,
) -> Result<Vec<(ConstituentTree, DependencyTree)>> {
    if threads <= 1 || sentences.len() <= 1 {
        return sentences.iter().map(|s| model.parse(s)).collect();
    }
    let chunk = sentences.len().div_ceil(threads);
    let parts: Vec<Result<Vec<_>>> = thread::scope(|scope| {
        let handles: Vec<_> = sentences
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(|s| model.parse(s)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("parse worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(sentences.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Scores `model` on `corpus` for the decoders `mode` trains.
pub fn evaluate(model: &JointModel, corpus: &Corpus, mode: Mode, eval: &EvalConfig, threads: usize) -> Result<EvalRecord> {
    let sentences: Vec<Sentence> = corpus.examples().iter().map(|e| e.sentence.clone()).collect();
    let parsed = parse_all(model, &sentences, threads)?;
    let brackets = if mode.uses_const() && corpus.examples().iter().all(|e| e.constituents.is_some()) {
        let gold: Vec<ConstituentTree> = corpus.examples().iter().filter_map(|e| e.constituents.clone()).collect();
        let pred: Vec<ConstituentTree> = parsed.iter().map(|p| p.0.clone()).collect();
        Some(bracket_counts(&pred, &gold, eval)?)
    } else {
        None
    };
    let attachments = if mode.uses_dep() && corpus.examples().iter().all(|e| e.dependencies.is_some()) {
        let gold: Vec<DependencyTree> = corpus.examples().iter().filter_map(|e| e.dependencies.clone()).collect();
        let pred: Vec<DependencyTree> = parsed.iter().map(|p| p.1.clone()).collect();
        Some(attachment_counts(&pred, &gold, &sentences, eval)?)
    } else {
        None
    };
    Ok(EvalRecord::from_counts(brackets, attachments))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        epoch: usize,
        sentences: usize,
        j1: f64,
        j2: f64,
        total: f64,
        lr: f64,
    },
    Epoch {
        epoch: usize,
        step: u64,
        j1: f64,
        j2: f64,
        total: f64,
        dev: EvalRecord,
        metric: Option<f64>,
        best: bool,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<LogRecord>,
    pub best_metric: Option<f64>,
    pub best_epoch: usize,
    pub best_dev: Option<EvalRecord>,
    pub steps: u64,
    pub dropped_nonprojective: usize,
}

/// Drops training sentences whose gold dependency tree is not projective
/// when the dependency decoder is trained; returns the kept examples and
/// the number dropped.
pub fn filter_nonprojective(corpus: &Corpus, mode: Mode) -> (Vec<Example>, usize) {
    let mut dropped = 0;
    let kept = corpus
        .examples()
        .iter()
        .filter(|e| {
            let keep = !mode.uses_dep() || e.dependencies.as_ref().is_none_or(|d| d.is_projective());
            if !keep {
                dropped += 1;
            }
            keep
        })
        .cloned()
        .collect();
    (kept, dropped)
}

/// Trains `model` in place and leaves it holding the parameters of the best
/// dev epoch. `checkpoint`, when given, receives the best model and the
/// training state next to it; `log` receives one JSON object per line.
pub fn train(
    model: &mut JointModel,
    train_corpus: &Corpus,
    dev: &Corpus,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    checkpoint: Option<&Path>,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate_settings()?;
    train_corpus.check(cfg.mode.uses_const(), cfg.mode.uses_dep())?;
    let (kept, dropped) = filter_nonprojective(train_corpus, cfg.mode);
    if dropped > 0 {
        warn!("dropped {dropped} training sentences with non-projective dependency trees");
    }
    if kept.is_empty() {
        return Err(Error::Data("no training sentences left".into()));
    }
    let instances = kept
        .iter()
        .enumerate()
        .map(|(i, e)| {
            model
                .prepare(e, cfg.mode)
                .map_err(|err| Error::Data(format!("training sentence {}: {err}", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let lengths: Vec<usize> = instances.iter().map(Instance::n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = TrainState::new();
    let mut outcome = TrainOutcome {
        dropped_nonprojective: dropped,
        ..TrainOutcome::default()
    };
    let mut best_params: Option<Vec<(String, Tensor)>> = None;
    let mut stale = 0;
    let emit = |rec: &LogRecord, log: &mut Option<&mut dyn Write>| -> Result<()> {
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    };
    for epoch in 1..=cfg.max_epochs {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..instances.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut sums = StepLosses::default();
        for batch in make_batches(&lengths, &order, cfg.batch_tokens) {
            let insts: Vec<Instance> = batch
                .iter()
                .map(|&i| replace_singletons(&instances[i], model, cfg.unk_singleton_prob, &mut rng))
                .collect();
            let l = joint_step(model, &insts, cfg, &mut state, &mut rng)?;
            sums.j1 += l.j1;
            sums.j2 += l.j2;
            sums.total += l.total;
            let rec = LogRecord::Step {
                step: state.step,
                epoch,
                sentences: insts.len(),
                j1: l.j1,
                j2: l.j2,
                total: l.total,
                lr: learning_rate(cfg, state.step),
            };
            emit(&rec, &mut log)?;
        }
        let record = if dev.is_empty() {
            EvalRecord::default()
        } else {
            evaluate(model, dev, cfg.mode, eval, cfg.threads)?
        };
        let metric = record.dev_metric();
        let improved = match (metric, state.best_metric) {
            (Some(m), Some(b)) => m > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            state.best_metric = metric;
            state.best_epoch = epoch;
            outcome.best_dev = Some(record.clone());
            best_params = Some(model.store().named_tensors());
            stale = 0;
            if let Some(path) = checkpoint {
                model.save(path)?;
            }
        } else {
            stale += 1;
        }
        info!(
            "epoch {epoch}: J1 {:.3} J2 {:.3} dev {}",
            sums.j1,
            sums.j2,
            metric.map_or("-".to_string(), |m| format!("{m:.2}"))
        );
        let rec = LogRecord::Epoch {
            epoch,
            step: state.step,
            j1: sums.j1,
            j2: sums.j2,
            total: sums.total,
            dev: record,
            metric,
            best: improved,
        };
        emit(&rec, &mut log)?;
        outcome.epochs.push(rec);
        if let Some(path) = checkpoint {
            state.save(&crate::model::sibling(path, "state"), model.store())?;
        }
        if let (Some(target), Some(m)) = (cfg.target_metric, metric) {
            if m >= target {
                info!("dev metric {m:.2} reached target {target}");
                break;
            }
        }
        if cfg.patience > 0 && stale >= cfg.patience {
            info!("no dev improvement for {stale} epochs, stopping");
            break;
        }
    }
    if let Some(best) = best_params {
        model.store_mut().load_named(&best)?;
    } else if let Some(path) = checkpoint {
        model.save(path)?;
    }
    outcome.best_metric = state.best_metric;
    outcome.best_epoch = state.best_epoch;
    outcome.steps = state.step;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            warmup_steps: 4,
            ..TrainConfig::default()
        };
        assert_eq!(learning_rate(&cfg, 1), 0.25);
        assert_eq!(learning_rate(&cfg, 4), 1.0);
        assert_eq!(learning_rate(&cfg, 16), 0.5);
    }

    #[test]
    fn batches_respect_budget() {
        let lengths = [3, 4, 10, 2, 2];
        let b = make_batches(&lengths, &[0, 1, 2, 3, 4], 7);
        assert_eq!(b, vec![vec![0, 1], vec![2], vec![3, 4]]);
    }
}
