//! Token representation and the partitioned self-attention stack.
//!
//! Every row of the encoder input is `[content ; position]`. Attention
//! logits mix both halves, but each half keeps its own projections,
//! feed-forward path and layer norms, so the split survives every layer.

use rand::Rng;

use crate::config::{CharEncoder, Composition, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::trees::Sentence;
use crate::vocab::{Vocabulary, ROOT_ID, STOP_ID};

/// Vocabulary ids for a sentence wrapped in start and stop markers, so
/// every field has `n + 2` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenIds {
    pub words: Vec<usize>,
    pub tags: Vec<usize>,
    pub chars: Vec<Vec<usize>>,
}

impl TokenIds {
    pub fn new(sentence: &Sentence, vocab: &Vocabulary) -> Self {
        let n = sentence.len();
        let mut words = Vec::with_capacity(n + 2);
        let mut tags = Vec::with_capacity(n + 2);
        let mut chars = Vec::with_capacity(n + 2);
        words.push(ROOT_ID);
        tags.push(ROOT_ID);
        chars.push(vec![ROOT_ID]);
        for t in &sentence.tokens {
            words.push(vocab.word_id(&t.form));
            tags.push(vocab.tag_id(&t.pos));
            chars.push(t.form.chars().map(|c| vocab.char_id(c)).collect());
        }
        words.push(STOP_ID);
        tags.push(STOP_ID);
        chars.push(vec![STOP_ID]);
        TokenIds { words, tags, chars }
    }

    /// Sentence length without the boundary markers.
    pub fn n(&self) -> usize {
        self.words.len() - 2
    }
}

/// Vocabulary sizes needed to allocate embedding tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocabSizes {
    pub words: usize,
    pub tags: usize,
    pub chars: usize,
}

impl VocabSizes {
    pub fn of(vocab: &Vocabulary) -> Self {
        VocabSizes {
            words: vocab.words.len(),
            tags: vocab.tags.len(),
            chars: vocab.chars.len(),
        }
    }
}

#[derive(Clone, Debug)]
struct LstmDirection {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
enum CharNet {
    Lstm {
        fwd: LstmDirection,
        bwd: LstmDirection,
        hidden: usize,
    },
    Cnn {
        filters: Vec<(usize, ParamId, ParamId)>,
    },
}

/// Character-level word encoder, recurrent or convolutional.
#[derive(Clone, Debug)]
pub struct CharEncoderNet {
    table: ParamId,
    net: CharNet,
    d_out: usize,
}

impl CharEncoderNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        kind: CharEncoder,
        num_chars: usize,
        d_emb: usize,
        d_out: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        let table = store.add(format!("{prefix}.embed"), Tensor::uniform(vec![num_chars, d_emb], 0.1, rng));
        let net = match kind {
            CharEncoder::Lstm => {
                let hidden = d_out / 2;
                let mut dir = |name: &str| {
                    let mut b = Tensor::zeros(vec![1, 4 * hidden]);
                    // forget gate starts open
                    b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
                    LstmDirection {
                        w: store.add(format!("{prefix}.{name}.w"), Tensor::glorot(vec![d_emb, 4 * hidden], rng)),
                        u: store.add(format!("{prefix}.{name}.u"), Tensor::glorot(vec![hidden, 4 * hidden], rng)),
                        b: store.add(format!("{prefix}.{name}.b"), b),
                    }
                };
                let fwd = dir("fwd");
                let bwd = dir("bwd");
                CharNet::Lstm { fwd, bwd, hidden }
            }
            CharEncoder::Cnn => {
                let k = widths.len();
                let filters = widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let f = d_out / k + usize::from(i < d_out % k);
                        let wid = store.add(format!("{prefix}.conv{w}.w"), Tensor::glorot(vec![w * d_emb, f], rng));
                        let bid = store.add(format!("{prefix}.conv{w}.b"), Tensor::zeros(vec![1, f]));
                        (w, wid, bid)
                    })
                    .collect();
                CharNet::Cnn { filters }
            }
        };
        CharEncoderNet { table, net, d_out }
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    /// `[tokens, d_out]` for tokens given as character id sequences.
    pub fn forward(&self, g: &mut Graph, chars: &[Vec<usize>]) -> Var {
        assert!(chars.iter().all(|c| !c.is_empty()), "every token needs a character");
        let flat: Vec<usize> = chars.iter().flatten().copied().collect();
        let mut offsets = Vec::with_capacity(chars.len());
        let mut acc = 0;
        for c in chars {
            offsets.push(acc);
            acc += c.len();
        }
        let table = g.param(self.table);
        let emb = g.embed(table, &flat);
        match &self.net {
            CharNet::Lstm { fwd, bwd, hidden } => {
                let f = run_lstm(g, emb, chars, &offsets, fwd, *hidden, false);
                let b = run_lstm(g, emb, chars, &offsets, bwd, *hidden, true);
                g.concat_cols(&[f, b])
            }
            CharNet::Cnn { filters } => {
                let outs: Vec<Var> = filters
                    .iter()
                    .map(|&(w, wid, bid)| convolve(g, emb, chars, &offsets, w, wid, bid))
                    .collect();
                let y = g.concat_cols(&outs);
                g.relu(y)
            }
        }
    }
}

fn run_lstm(
    g: &mut Graph,
    emb: Var,
    chars: &[Vec<usize>],
    offsets: &[usize],
    dir: &LstmDirection,
    hidden: usize,
    reverse: bool,
) -> Var {
    let t = chars.len();
    let steps = chars.iter().map(Vec::len).max().unwrap_or(0);
    let (w, u, b) = (g.param(dir.w), g.param(dir.u), g.param(dir.b));
    let mut h = g.constant(Tensor::zeros(vec![t, hidden]));
    let mut c = g.constant(Tensor::zeros(vec![t, hidden]));
    for step in 0..steps {
        let index: Vec<Option<usize>> = chars
            .iter()
            .zip(offsets)
            .map(|(cs, &off)| {
                (step < cs.len()).then(|| off + if reverse { cs.len() - 1 - step } else { step })
            })
            .collect();
        let x = g.gather_rows(emb, &index);
        let xw = g.matmul(x, w);
        let hu = g.matmul(h, u);
        let z = g.add(xw, hu);
        let z = g.add_broadcast(z, b);
        let zi = g.slice_cols(z, 0, hidden);
        let i = g.sigmoid(zi);
        let zf = g.slice_cols(z, hidden, hidden);
        let f = g.sigmoid(zf);
        let zg = g.slice_cols(z, 2 * hidden, hidden);
        let cand = g.tanh(zg);
        let zo = g.slice_cols(z, 3 * hidden, hidden);
        let o = g.sigmoid(zo);
        let fc = g.mul(f, c);
        let ig = g.mul(i, cand);
        let c_new = g.add(fc, ig);
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc);
        if index.iter().all(Option::is_some) {
            h = h_new;
            c = c_new;
        } else {
            // finished tokens keep their last state
            let mut keep = Vec::with_capacity(t * hidden);
            let mut take = Vec::with_capacity(t * hidden);
            for ix in &index {
                let on = if ix.is_some() { 1.0 } else { 0.0 };
                keep.extend(std::iter::repeat(1.0 - on).take(hidden));
                take.extend(std::iter::repeat(on).take(hidden));
            }
            let keep = g.constant_matrix(t, hidden, keep);
            let take = g.constant_matrix(t, hidden, take);
            let (a, bb) = (g.mul(take, h_new), g.mul(keep, h));
            h = g.add(a, bb);
            let (a, bb) = (g.mul(take, c_new), g.mul(keep, c));
            c = g.add(a, bb);
        }
    }
    h
}

/// Full-padding convolution of width `w` then a max over positions, so a
/// token shorter than the filter still yields windows.
fn convolve(
    g: &mut Graph,
    emb: Var,
    chars: &[Vec<usize>],
    offsets: &[usize],
    w: usize,
    wid: ParamId,
    bid: ParamId,
) -> Var {
    let mut columns: Vec<Vec<Option<usize>>> = vec![Vec::new(); w];
    let mut segments = Vec::with_capacity(chars.len());
    let mut rows = 0;
    for (cs, &off) in chars.iter().zip(offsets) {
        let len = cs.len() as isize;
        let windows = cs.len() + w - 1;
        segments.push((rows, windows));
        rows += windows;
        for start in -(w as isize - 1)..len {
            for (o, col) in columns.iter_mut().enumerate() {
                let p = start + o as isize;
                col.push((0..len).contains(&p).then(|| off + p as usize));
            }
        }
    }
    let parts: Vec<Var> = columns.iter().map(|ix| g.gather_rows(emb, ix)).collect();
    let windows = g.concat_cols(&parts);
    let (wv, bv) = (g.param(wid), g.param(bid));
    let y = g.affine(windows, wv, bv);
    g.segment_max(y, &segments)
}

#[derive(Clone, Debug)]
struct Half {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln1: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

impl Half {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, rng: &mut R) -> Self {
        let mut m = |name: &str, r: usize, c: usize| store.add(format!("{prefix}.{name}"), Tensor::glorot(vec![r, c], rng));
        let wq = m("wq", d, d);
        let wk = m("wk", d, d);
        let wv = m("wv", d, d);
        let wo = m("wo", d, d);
        let ff1w = m("ff1.w", d, d_ff);
        let ff2w = m("ff2.w", d_ff, d);
        let mut z = |name: &str, c: usize, v: f64| store.add(format!("{prefix}.{name}"), Tensor::filled(vec![1, c], v));
        Half {
            wq,
            wk,
            wv,
            wo,
            ln1: (z("ln1.gain", d, 1.0), z("ln1.bias", d, 0.0)),
            ff1: (ff1w, z("ff1.b", d_ff, 0.0)),
            ff2: (ff2w, z("ff2.b", d, 0.0)),
            ln2: (z("ln2.gain", d, 1.0), z("ln2.bias", d, 0.0)),
        }
    }
}

/// Dropout rates used inside a layer.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LayerDropout {
    pub attention: f64,
    pub relu: f64,
    pub residual: f64,
}

/// One partitioned self-attention layer plus its feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    content: Half,
    position: Half,
    heads: usize,
    d_half: usize,
    dropout: LayerDropout,
}

impl AttentionLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        dropout: LayerDropout,
        rng: &mut R,
    ) -> Self {
        let d_half = d_model / 2;
        AttentionLayer {
            content: Half::new(store, &format!("{prefix}.content"), d_half, d_ff / 2, rng),
            position: Half::new(store, &format!("{prefix}.position"), d_half, d_ff / 2, rng),
            heads,
            d_half,
            dropout,
        }
    }

    pub fn forward<R: Rng>(&self, g: &mut Graph, x: Var, rng: &mut R) -> Var {
        self.forward_with_weights(g, x, rng).0
    }

    /// Also returns the `[N, N]` attention probabilities of each head.
    pub fn forward_with_weights<R: Rng>(&self, g: &mut Graph, x: Var, rng: &mut R) -> (Var, Vec<Var>) {
        let (_, d) = g.shape(x);
        assert_eq!(d, 2 * self.d_half, "layer width mismatch");
        let xc = g.slice_cols(x, 0, self.d_half);
        let xp = g.slice_cols(x, self.d_half, self.d_half);
        let proj = |g: &mut Graph, x: Var, w: ParamId| {
            let w = g.param(w);
            g.matmul(x, w)
        };
        let (qc, kc, vc) = (proj(g, xc, self.content.wq), proj(g, xc, self.content.wk), proj(g, xc, self.content.wv));
        let (qp, kp, vp) = (
            proj(g, xp, self.position.wq),
            proj(g, xp, self.position.wk),
            proj(g, xp, self.position.wv),
        );
        let dk = self.d_half / self.heads;
        let scale = 1.0 / ((2 * dk) as f64).sqrt();
        let mut weights = Vec::with_capacity(self.heads);
        let mut out_c = Vec::with_capacity(self.heads);
        let mut out_p = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let s = h * dk;
            let (qch, kch) = (g.slice_cols(qc, s, dk), g.slice_cols(kc, s, dk));
            let (qph, kph) = (g.slice_cols(qp, s, dk), g.slice_cols(kp, s, dk));
            let kct = g.transpose(kch);
            let kpt = g.transpose(kph);
            let lc = g.matmul(qch, kct);
            let lp = g.matmul(qph, kpt);
            let logits = g.add(lc, lp);
            let logits = g.scale(logits, scale);
            let a = g.softmax_rows(logits);
            weights.push(a);
            let a = g.dropout(a, self.dropout.attention, rng);
            let vch = g.slice_cols(vc, s, dk);
            let vph = g.slice_cols(vp, s, dk);
            out_c.push(g.matmul(a, vch));
            out_p.push(g.matmul(a, vph));
        }
        let oc = g.concat_cols(&out_c);
        let op = g.concat_cols(&out_p);
        let yc = self.finish(g, &self.content, xc, oc, rng);
        let yp = self.finish(g, &self.position, xp, op, rng);
        (g.concat_cols(&[yc, yp]), weights)
    }

    fn finish<R: Rng>(&self, g: &mut Graph, half: &Half, x: Var, attended: Var, rng: &mut R) -> Var {
        let wo = g.param(half.wo);
        let o = g.matmul(attended, wo);
        let o = g.dropout(o, self.dropout.residual, rng);
        let r = g.add(x, o);
        let (gain, bias) = (g.param(half.ln1.0), g.param(half.ln1.1));
        let x = g.layer_norm(r, gain, bias);
        let (w1, b1) = (g.param(half.ff1.0), g.param(half.ff1.1));
        let h = g.affine(x, w1, b1);
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout.relu, rng);
        let (w2, b2) = (g.param(half.ff2.0), g.param(half.ff2.1));
        let h = g.affine(h, w2, b2);
        let h = g.dropout(h, self.dropout.residual, rng);
        let r = g.add(x, h);
        let (gain, bias) = (g.param(half.ln2.0), g.param(half.ln2.1));
        g.layer_norm(r, gain, bias)
    }
}

#[derive(Clone, Debug)]
struct WordEmbedding {
    trainable: Option<ParamId>,
    frozen: Option<ParamId>,
}

/// Which decoder paths to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Paths {
    pub constituent: bool,
    pub dependency: bool,
}

impl Paths {
    pub const BOTH: Paths = Paths {
        constituent: true,
        dependency: true,
    };
}

/// Encoder outputs `[n + 2, d_model]` for each requested path.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub constituent: Option<Var>,
    pub dependency: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: ModelConfig,
    word: Option<WordEmbedding>,
    pos: Option<ParamId>,
    chars: Option<CharEncoderNet>,
    projection: Option<(ParamId, ParamId)>,
    position: ParamId,
    shared: Vec<AttentionLayer>,
    const_layers: Vec<AttentionLayer>,
    dep_layers: Vec<AttentionLayer>,
}

impl Encoder {
    /// `pretrained` must be `[sizes.words, cfg.d_pretrained]` when
    /// `cfg.d_pretrained > 0`; it is stored frozen.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        sizes: VocabSizes,
        pretrained: Option<Tensor>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let dc = cfg.d_content();
        let word = if cfg.use_word {
            let d_train = cfg.d_word - cfg.d_pretrained;
            let trainable = (d_train > 0)
                .then(|| store.add("embed.word", Tensor::uniform(vec![sizes.words, d_train], 0.1, rng)));
            let frozen = if cfg.d_pretrained > 0 {
                let t = pretrained.unwrap_or_else(|| Tensor::zeros(vec![sizes.words, cfg.d_pretrained]));
                if t.shape() != [sizes.words, cfg.d_pretrained] {
                    return Err(Error::Config(format!(
                        "pretrained table has shape {:?}, expected [{}, {}]",
                        t.shape(),
                        sizes.words,
                        cfg.d_pretrained
                    )));
                }
                Some(store.add_frozen("embed.word_pretrained", t))
            } else {
                None
            };
            Some(WordEmbedding { trainable, frozen })
        } else {
            None
        };
        let pos = cfg
            .use_pos
            .then(|| store.add("embed.pos", Tensor::uniform(vec![sizes.tags, cfg.d_pos], 0.1, rng)));
        let chars = cfg.use_char.then(|| {
            CharEncoderNet::new(
                store,
                "embed.char",
                cfg.char_encoder,
                sizes.chars,
                cfg.d_char_emb,
                cfg.d_char_out,
                &cfg.char_cnn_widths,
                rng,
            )
        });
        let projection = (cfg.composition == Composition::Concat).then(|| {
            let width = usize::from(cfg.use_word) * cfg.d_word
                + usize::from(cfg.use_pos) * cfg.d_pos
                + usize::from(cfg.use_char) * cfg.d_char_out;
            (
                store.add("embed.project.w", Tensor::glorot(vec![width, dc], rng)),
                store.add("embed.project.b", Tensor::zeros(vec![1, dc])),
            )
        });
        let position = store.add("embed.position", Tensor::uniform(vec![cfg.max_len, dc], 0.1, rng));
        let drop = LayerDropout {
            attention: cfg.dropout_attention,
            relu: cfg.dropout_relu,
            residual: cfg.dropout_residual,
        };
        let mut stack = |prefix: &str, count: usize| -> Vec<AttentionLayer> {
            (0..count)
                .map(|i| AttentionLayer::new(store, &format!("{prefix}.{i}"), cfg.d_model, cfg.heads, cfg.d_ff, drop, rng))
                .collect()
        };
        let private = cfg.total_layers - cfg.shared_layers;
        let shared = stack("encoder.shared", cfg.shared_layers);
        let const_layers = stack("encoder.const", private);
        let dep_layers = stack("encoder.dep", private);
        Ok(Encoder {
            cfg: cfg.clone(),
            word,
            pos,
            chars,
            projection,
            position,
            shared,
            const_layers,
            dep_layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Content vectors `[n + 2, d_model / 2]` before positions are added.
    pub fn token_representation<R: Rng>(&self, g: &mut Graph, ids: &TokenIds, rng: &mut R) -> Var {
        let mut parts = Vec::new();
        if let Some(word) = &self.word {
            let mut pieces = Vec::new();
            if let Some(t) = word.trainable {
                let table = g.param(t);
                pieces.push(g.embed(table, &ids.words));
            }
            if let Some(f) = word.frozen {
                let table = g.param(f);
                pieces.push(g.embed(table, &ids.words));
            }
            parts.push(if pieces.len() == 1 { pieces[0] } else { g.concat_cols(&pieces) });
        }
        if let Some(pos) = self.pos {
            let table = g.param(pos);
            parts.push(g.embed(table, &ids.tags));
        }
        if let Some(chars) = &self.chars {
            parts.push(chars.forward(g, &ids.chars));
        }
        let content = match self.projection {
            None => parts.into_iter().reduce(|a, b| g.add(a, b)).expect("a source is enabled"),
            Some((w, b)) => {
                let x = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts) };
                let (w, b) = (g.param(w), g.param(b));
                g.affine(x, w, b)
            }
        };
        g.dropout(content, self.cfg.dropout_embedding, rng)
    }

    /// `[content ; position]` rows ready for the attention stack.
    pub fn input_rows<R: Rng>(&self, g: &mut Graph, ids: &TokenIds, rng: &mut R) -> Result<Var> {
        let rows = ids.words.len();
        if rows > self.cfg.max_len {
            return Err(Error::Input(format!(
                "sentence of {} tokens exceeds max_len {} (including boundary markers)",
                rows - 2,
                self.cfg.max_len
            )));
        }
        let content = self.token_representation(g, ids, rng);
        let table = g.param(self.position);
        let position = g.slice_rows(table, 0, rows);
        Ok(g.concat_cols(&[content, position]))
    }

    pub fn encode<R: Rng>(&self, g: &mut Graph, ids: &TokenIds, paths: Paths, rng: &mut R) -> Result<Encoded> {
        let mut x = self.input_rows(g, ids, rng)?;
        for layer in &self.shared {
            x = layer.forward(g, x, rng);
        }
        let mut run = |layers: &[AttentionLayer], g: &mut Graph| {
            let mut y = x;
            for layer in layers {
                y = layer.forward(g, y, rng);
            }
            y
        };
        let constituent = paths.constituent.then(|| run(&self.const_layers, g));
        let dependency = paths.dependency.then(|| run(&self.dep_layers, g));
        Ok(Encoded {
            constituent,
            dependency,
        })
    }

    /// Number of attention layers each decoder path traverses.
    pub fn path_depth(&self) -> (usize, usize) {
        (
            self.shared.len() + self.const_layers.len(),
            self.shared.len() + self.dep_layers.len(),
        )
    }

    pub fn layers(&self) -> impl Iterator<Item = &AttentionLayer> {
        self.shared.iter().chain(&self.const_layers).chain(&self.dep_layers)
    }
}
