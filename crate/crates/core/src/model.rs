//! The joint parser: shared encoder, span decoder and biaffine decoder.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Mode, ModelConfig};
use crate::constituent::{cky_decode, hinge_loss, GoldSpans, SpanScorer, SpanScores};
use crate::corpus::Example;
use crate::dependency::{arc_scores_from, assign_labels, dep_loss, eisner_decode, ArcScorer, LabelScorer};
use crate::encoder::{Encoder, Paths, TokenIds, VocabSizes};
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint_file, write_checkpoint_file, Gradients, Graph, ParamStore, Tensor, Var};
use crate::trees::{ConstituentTree, DependencyTree, Sentence};
use crate::vocab::Vocabulary;

/// A training sentence mapped to vocabulary ids.
#[derive(Clone, Debug)]
pub struct Instance {
    pub ids: TokenIds,
    pub spans: Option<GoldSpans>,
    pub heads: Option<Vec<usize>>,
    pub rels: Option<Vec<usize>>,
}

impl Instance {
    pub fn n(&self) -> usize {
        self.ids.n()
    }
}

/// Loss terms for one sentence; absent when the mode skips that decoder.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub j1: Option<Var>,
    pub j2: Option<Var>,
}

/// Scalar losses and parameter gradients of `J1 + lambda * J2` for one
/// sentence.
#[derive(Clone, Debug)]
pub struct SentenceGrad {
    pub j1: f64,
    pub j2: f64,
    pub grads: Gradients,
}

#[derive(Clone, Debug)]
pub struct JointModel {
    config: ModelConfig,
    vocab: Vocabulary,
    store: ParamStore,
    encoder: Encoder,
    spans: SpanScorer,
    arcs: ArcScorer,
    labels: LabelScorer,
}

impl JointModel {
    pub fn new(config: &ModelConfig, vocab: Vocabulary, pretrained: Option<Tensor>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config, VocabSizes::of(&vocab), pretrained, &mut rng)?;
        let spans = SpanScorer::new(
            &mut store,
            "const.span",
            config.d_model,
            config.span_hidden,
            vocab.num_labels().max(2),
            &mut rng,
        );
        let arcs = ArcScorer::new(&mut store, "dep.arc", config.d_model, config.d_arc, &mut rng);
        let labels = LabelScorer::new(
            &mut store,
            "dep.rel",
            config.d_model,
            config.d_label,
            vocab.rels.len().max(1),
            &mut rng,
        );
        Ok(JointModel {
            config: config.clone(),
            vocab,
            store,
            encoder,
            spans,
            arcs,
            labels,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    /// Whether a parameter belongs to one decoder only: its private encoder
    /// layers or its scorer. `None` for shared parameters.
    pub fn owner(name: &str) -> Option<Mode> {
        if name.starts_with("const.") || name.starts_with("encoder.const.") {
            Some(Mode::Const)
        } else if name.starts_with("dep.") || name.starts_with("encoder.dep.") {
            Some(Mode::Dep)
        } else {
            None
        }
    }

    /// Maps gold annotations to ids. Gold trees are only required by the
    /// decoders `mode` trains.
    pub fn prepare(&self, example: &Example, mode: Mode) -> Result<Instance> {
        let ids = TokenIds::new(&example.sentence, &self.vocab);
        let spans = match (&example.constituents, mode.uses_const()) {
            (Some(t), true) => Some(GoldSpans::from_tree(t, &self.vocab)?),
            (None, true) => return Err(Error::Data("missing constituency tree".into())),
            _ => None,
        };
        let (heads, rels) = match (&example.dependencies, mode.uses_dep()) {
            (Some(d), true) => {
                let rels = d
                    .labels
                    .iter()
                    .map(|r| {
                        self.vocab
                            .rel_id(r)
                            .ok_or_else(|| Error::Data(format!("relation {r} not in vocabulary")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                (Some(d.heads.clone()), Some(rels))
            }
            (None, true) => return Err(Error::Data("missing dependency tree".into())),
            _ => (None, None),
        };
        Ok(Instance { ids, spans, heads, rels })
    }

    /// Builds the loss graph for one sentence.
    pub fn losses<R: Rng>(&self, g: &mut Graph, inst: &Instance, mode: Mode, rng: &mut R) -> Result<LossVars> {
        let n = inst.n();
        let paths = Paths {
            constituent: mode.uses_const(),
            dependency: mode.uses_dep(),
        };
        let enc = self.encoder.encode(g, &inst.ids, paths, rng)?;
        let j1 = match (enc.constituent, &inst.spans) {
            (Some(h), Some(gold)) => {
                let scores = self.spans.forward(g, h, n);
                Some(hinge_loss(g, scores, gold, self.spans.num_labels()).loss)
            }
            (Some(_), None) => return Err(Error::Data("instance has no gold spans".into())),
            _ => None,
        };
        let j2 = match (enc.dependency, &inst.heads, &inst.rels) {
            (Some(h), Some(heads), Some(rels)) => {
                let arcs = self.arcs.forward(g, h, n);
                let labels = self.labels.forward(g, h, heads);
                Some(dep_loss(g, arcs, labels, heads, rels, self.config.dep_loss_mean))
            }
            (Some(_), _, _) => return Err(Error::Data("instance has no gold dependencies".into())),
            _ => None,
        };
        Ok(LossVars { j1, j2 })
    }

    /// `J1 + lambda * J2` (only the terms `mode` uses) and its gradients.
    /// Dropout is active when `train` is set.
    pub fn sentence_grad<R: Rng>(
        &self,
        inst: &Instance,
        mode: Mode,
        lambda: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<SentenceGrad> {
        let mut g = Graph::with_params(&self.store);
        g.set_train(train);
        let l = self.losses(&mut g, inst, mode, rng)?;
        let j1 = l.j1.map_or(0.0, |v| g.scalar(v));
        let j2 = l.j2.map_or(0.0, |v| g.scalar(v));
        let total = match (l.j1, l.j2) {
            (Some(a), Some(b)) => {
                let b = g.scale(b, lambda);
                Some(g.add(a, b))
            }
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(g.scale(b, lambda)),
            (None, None) => None,
        };
        if let Some(t) = total {
            g.backward(t)?;
        }
        Ok(SentenceGrad {
            j1,
            j2,
            grads: g.into_param_grads(),
        })
    }

    /// Scalar `J1 + lambda * J2` without dropout, for finite differences.
    pub fn eval_loss(&self, inst: &Instance, mode: Mode, lambda: f64) -> Result<f64> {
        self.eval_loss_with(&self.store, inst, mode, lambda)
    }

    /// `eval_loss` reading parameters from `store`, which must share this
    /// model's layout (typically a perturbed clone of `store()`).
    pub fn eval_loss_with(&self, store: &ParamStore, inst: &Instance, mode: Mode, lambda: f64) -> Result<f64> {
        let mut g = Graph::with_params(store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = self.losses(&mut g, inst, mode, &mut rng)?;
        Ok(l.j1.map_or(0.0, |v| g.scalar(v)) + lambda * l.j2.map_or(0.0, |v| g.scalar(v)))
    }

    /// Parses one sentence with a single encoder pass feeding both decoders.
    pub fn parse(&self, sentence: &Sentence) -> Result<(ConstituentTree, DependencyTree)> {
        sentence.validate()?;
        let n = sentence.len();
        let ids = TokenIds::new(sentence, &self.vocab);
        let mut g = Graph::with_params(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = self.encoder.encode(&mut g, &ids, Paths::BOTH, &mut rng)?;
        let (hc, hd) = (enc.constituent.expect("requested"), enc.dependency.expect("requested"));

        let span_var = self.spans.forward(&mut g, hc, n);
        let scores = SpanScores::from_matrix(n, self.spans.num_labels(), g.value(span_var));
        let (chart, _) = cky_decode(&scores);
        let tree = chart.to_tree(|l| self.label_name(l), sentence);

        let arc_var = self.arcs.forward(&mut g, hd, n);
        let heads = eisner_decode(&arc_scores_from(n, g.value(arc_var)));
        let rel_var = self.labels.forward(&mut g, hd, &heads);
        let dep = assign_labels(g.value(rel_var), self.labels.num_rels(), &heads, |r| {
            if r < self.vocab.rels.len() {
                self.vocab.rels.name(r).to_string()
            } else {
                "_".to_string()
            }
        });
        Ok((tree, dep))
    }

    fn label_name(&self, id: usize) -> &str {
        if id < self.vocab.num_labels() {
            self.vocab.label_name(id)
        } else {
            "X"
        }
    }

    /// Writes parameters to `path` plus the vocabulary and configuration
    /// next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint_file(path, &self.store.named_tensors())?;
        self.vocab.save(sibling(path, "vocab"))?;
        let cfg = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let cfg_path = sibling(path, "model.toml");
        fs::write(&cfg_path, cfg).map_err(|e| Error::file(&cfg_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg_path = sibling(path, "model.toml");
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::file(&cfg_path, e))?;
        let config: ModelConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let vocab = Vocabulary::load(sibling(path, "vocab"))?;
        let mut model = JointModel::new(&config, vocab, None, 0)?;
        let named = read_checkpoint_file(path)?;
        model.store.load_named(&named)?;
        Ok(model)
    }
}

/// `dir/name.ckpt` -> `dir/name.<ext>`.
pub fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Corpus;
    use crate::treebank::{read_bracketed, read_conll};

    pub(crate) fn tiny_corpus() -> Corpus {
        let c = read_bracketed("(S (NP (DT The) (NN cat)) (VP (VBZ sleeps)))\n(S (NP (NNP Kim)) (VP (VBZ runs)))").unwrap();
        let d = read_conll(
            "1\tThe\tDT\t2\tdet\n2\tcat\tNN\t3\tnsubj\n3\tsleeps\tVBZ\t0\troot\n\n1\tKim\tNNP\t2\tnsubj\n2\truns\tVBZ\t0\troot\n",
        )
        .unwrap();
        Corpus::align(Some(c), Some(d)).unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_word: 8,
            d_pos: 8,
            d_char_emb: 4,
            d_char_out: 8,
            d_model: 16,
            heads: 2,
            d_ff: 16,
            total_layers: 2,
            shared_layers: 1,
            span_hidden: 8,
            d_arc: 8,
            d_label: 4,
            max_len: 32,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn parse_produces_aligned_trees() {
        let corpus = tiny_corpus();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let model = JointModel::new(&small_config(), vocab, None, 7).unwrap();
        for ex in corpus.examples() {
            let (tree, dep) = model.parse(&ex.sentence).unwrap();
            assert_eq!(tree.sentence(), ex.sentence);
            dep.validate().unwrap();
            assert!(dep.is_projective());
            let inst = model.prepare(ex, Mode::Joint).unwrap();
            let g = model.sentence_grad(&inst, Mode::Joint, 1.0, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert!(g.j1 >= 0.0 && g.j2 > 0.0);
        }
    }

    #[test]
    fn parameter_count_tracks_sources_and_sharing() {
        let corpus = tiny_corpus();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let base = small_config();
        let with_pos = ModelConfig { use_pos: true, ..base.clone() };
        let a = JointModel::new(&base, vocab.clone(), None, 1).unwrap().num_params();
        let b = JointModel::new(&with_pos, vocab.clone(), None, 1).unwrap().num_params();
        assert!(b > a);
        let mut last = usize::MAX;
        for k in 0..=2 {
            let cfg = ModelConfig { shared_layers: k, ..base.clone() };
            let p = JointModel::new(&cfg, vocab.clone(), None, 1).unwrap().num_params();
            assert!(p < last);
            last = p;
        }
    }
}
