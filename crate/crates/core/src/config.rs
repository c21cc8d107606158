//! Model and training hyperparameters.
//!
//! A run is configured from one flat TOML file; each key belongs to either
//! [`ModelConfig`] or [`TrainConfig`]. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CharEncoder {
    #[serde(alias = "lstm-style")]
    Lstm,
    #[serde(alias = "cnn-style")]
    Cnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    Sum,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Joint,
    #[serde(alias = "constituent-only")]
    Const,
    #[serde(alias = "dependency-only")]
    Dep,
}

impl Mode {
    pub fn uses_const(self) -> bool {
        self != Mode::Dep
    }

    pub fn uses_dep(self) -> bool {
        self != Mode::Const
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub use_word: bool,
    pub use_pos: bool,
    pub use_char: bool,
    pub char_encoder: CharEncoder,
    pub composition: Composition,
    pub d_word: usize,
    /// Width of the frozen pretrained block inside the word embedding
    /// (0 when no vectors are loaded).
    pub d_pretrained: usize,
    pub d_pos: usize,
    pub d_char_emb: usize,
    pub d_char_out: usize,
    pub char_cnn_widths: Vec<usize>,
    pub d_model: usize,
    pub max_len: usize,
    pub total_layers: usize,
    pub shared_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout_embedding: f64,
    pub dropout_attention: f64,
    pub dropout_relu: f64,
    pub dropout_residual: f64,
    pub span_hidden: usize,
    pub d_arc: usize,
    pub d_label: usize,
    /// Average the dependency loss over tokens instead of summing.
    pub dep_loss_mean: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            use_word: true,
            use_pos: false,
            use_char: true,
            char_encoder: CharEncoder::Lstm,
            composition: Composition::Sum,
            d_word: 64,
            d_pretrained: 0,
            d_pos: 64,
            d_char_emb: 32,
            d_char_out: 64,
            char_cnn_widths: vec![2, 3, 4],
            d_model: 128,
            max_len: 512,
            total_layers: 8,
            shared_layers: 8,
            heads: 4,
            d_ff: 256,
            dropout_embedding: 0.2,
            dropout_attention: 0.2,
            dropout_relu: 0.1,
            dropout_residual: 0.2,
            span_hidden: 128,
            d_arc: 128,
            d_label: 64,
            dep_loss_mean: false,
        }
    }
}

impl ModelConfig {
    pub fn d_content(&self) -> usize {
        self.d_model / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.use_word || self.use_pos || self.use_char) {
            return bad("at least one of use_word, use_pos, use_char must be enabled".into());
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad(format!("d_model {} must be even to split into content and position", self.d_model));
        }
        if self.d_model % 4 != 0 {
            return bad(format!(
                "d_model {} must be divisible by 4 for forward/backward span features",
                self.d_model
            ));
        }
        if self.heads == 0 || self.d_content() % self.heads != 0 {
            return bad(format!("d_model/2 = {} is not divisible by {} heads", self.d_content(), self.heads));
        }
        if self.d_ff % 2 != 0 || self.d_ff == 0 {
            return bad(format!("d_ff {} must be even and positive", self.d_ff));
        }
        if self.total_layers == 0 {
            return bad("total_layers must be positive".into());
        }
        if self.shared_layers > self.total_layers {
            return bad(format!(
                "shared_layers {} exceeds total_layers {}",
                self.shared_layers, self.total_layers
            ));
        }
        if self.use_word && self.d_pretrained > self.d_word {
            return bad(format!(
                "pretrained width {} exceeds d_word {}",
                self.d_pretrained, self.d_word
            ));
        }
        if self.use_char {
            if self.char_encoder == CharEncoder::Lstm && self.d_char_out % 2 != 0 {
                return bad(format!("d_char_out {} must be even for the bidirectional encoder", self.d_char_out));
            }
            if self.char_encoder == CharEncoder::Cnn
                && (self.char_cnn_widths.is_empty()
                    || self.char_cnn_widths.contains(&0)
                    || self.d_char_out < self.char_cnn_widths.len())
            {
                return bad("char_cnn_widths must be nonempty positive widths, at most d_char_out of them".into());
            }
        }
        if self.composition == Composition::Sum {
            let dc = self.d_content();
            let mut dims = Vec::new();
            if self.use_word {
                dims.push(("d_word", self.d_word));
            }
            if self.use_pos {
                dims.push(("d_pos", self.d_pos));
            }
            if self.use_char {
                dims.push(("d_char_out", self.d_char_out));
            }
            if let Some((name, d)) = dims.iter().find(|(_, d)| *d != dc) {
                return bad(format!("sum composition needs {name} = d_model/2 = {dc}, got {d}"));
            }
        }
        for (name, p) in [
            ("dropout_embedding", self.dropout_embedding),
            ("dropout_attention", self.dropout_attention),
            ("dropout_relu", self.dropout_relu),
            ("dropout_residual", self.dropout_residual),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        if self.max_len < 3 || self.span_hidden == 0 || self.d_arc == 0 || self.d_label == 0 {
            return bad("max_len, span_hidden, d_arc and d_label must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda: f64,
    pub train_const: Option<String>,
    pub train_dep: Option<String>,
    pub dev_const: Option<String>,
    pub dev_dep: Option<String>,
    pub pretrained_vectors: Option<String>,
    /// Directory for the best checkpoint, vocabulary, log and manifest.
    pub output_dir: String,
    pub batch_tokens: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub patience: usize,
    pub seed: u64,
    pub min_word_freq: usize,
    /// Probability of replacing a singleton training word by the unknown
    /// word id.
    pub unk_singleton_prob: f64,
    pub shuffle: bool,
    /// Worker threads for per-sentence gradients within a batch.
    pub threads: usize,
    /// Reduce per-sentence gradients in batch order. Without it, threaded
    /// runs merge them as workers finish.
    pub deterministic: bool,
    /// Stop once the dev metric reaches this value (no early stop when
    /// unset).
    pub target_metric: Option<f64>,
    pub eval_profile: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Joint,
            lambda: 1.0,
            train_const: None,
            train_dep: None,
            dev_const: None,
            dev_dep: None,
            pretrained_vectors: None,
            output_dir: "run".into(),
            batch_tokens: 400,
            max_epochs: 50,
            learning_rate: 8e-4,
            warmup_steps: 160,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            clip_norm: 5.0,
            patience: 10,
            seed: 1,
            min_word_freq: 1,
            unk_singleton_prob: 0.3,
            shuffle: true,
            threads: 1,
            deterministic: true,
            target_metric: None,
            eval_profile: "en".into(),
        }
    }
}

impl TrainConfig {
    /// The loss weight actually applied to the dependency term.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            Mode::Joint => self.lambda,
            Mode::Dep => 1.0,
            Mode::Const => 0.0,
        }
    }

    /// Checks hyperparameters only, not data paths.
    pub fn validate_settings(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        if self.batch_tokens == 0 || self.max_epochs == 0 {
            return bad("batch_tokens and max_epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.unk_singleton_prob) {
            return bad(format!("unk_singleton_prob {} outside [0, 1]", self.unk_singleton_prob));
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_settings()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.mode.uses_const() && self.train_const.is_none() {
            return bad("train_const is required unless mode = dep".into());
        }
        if self.mode.uses_dep() && self.train_dep.is_none() {
            return bad("train_dep is required unless mode = const".into());
        }
        Ok(())
    }
}

/// Both halves of a run configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn keys_of<T: Serialize>(value: &T) -> Vec<String> {
    match toml::Table::try_from(value) {
        Ok(t) => t.keys().cloned().collect(),
        Err(_) => Vec::new(),
    }
}

/// Optional keys serialize to nothing, so they are listed here.
const OPTIONAL_TRAIN_KEYS: &[&str] = &[
    "train_const",
    "train_dep",
    "dev_const",
    "dev_dep",
    "pretrained_vectors",
    "target_metric",
];

impl RunConfig {
    /// Parses a flat TOML document, applying `overrides` (TOML `key = value`
    /// fragments) on top.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            let parsed: toml::Table = format!("{key} = {value}")
                .parse()
                .or_else(|_| format!("{key} = {}", toml::Value::String(value.clone())).parse())
                .map_err(|e: toml::de::Error| Error::Config(format!("override {key}: {e}")))?;
            table.extend(parsed);
        }
        let model_keys = keys_of(&ModelConfig::default());
        let mut train_keys = keys_of(&TrainConfig::default());
        train_keys.extend(OPTIONAL_TRAIN_KEYS.iter().map(|s| s.to_string()));
        let mut model = toml::Table::new();
        let mut train = toml::Table::new();
        for (k, v) in table {
            if model_keys.contains(&k) {
                model.insert(k, v);
            } else if train_keys.contains(&k) {
                train.insert(k, v);
            } else {
                return Err(Error::Config(format!("unknown configuration key {k}")));
            }
        }
        let model: ModelConfig = model.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let train: TrainConfig = train.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let run = RunConfig { model, train };
        run.validate()?;
        Ok(run)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Flat TOML echo of every setting.
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(&self.model).expect("model config serializes");
        table.extend(toml::Table::try_from(&self.train).expect("train config serializes"));
        toml::to_string(&table).expect("table serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        "train_const = \"a.mrg\"\ntrain_dep = \"a.conll\"\n".into()
    }

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        let run = RunConfig::parse(&minimal(), &[]).unwrap();
        assert_eq!(run.train.lambda, 1.0);
        assert_eq!(run.model.total_layers, 8);
    }

    #[test]
    fn overrides_take_precedence() {
        let text = format!("{}shared_layers = 2\n", minimal());
        let over = vec![
            ("shared_layers".to_string(), "5".to_string()),
            ("mode".to_string(), "const".to_string()),
            ("char_encoder".to_string(), "cnn-style".to_string()),
        ];
        let run = RunConfig::parse(&text, &over).unwrap();
        assert_eq!(run.model.shared_layers, 5);
        assert_eq!(run.train.mode, Mode::Const);
        assert_eq!(run.model.char_encoder, CharEncoder::Cnn);
        assert_eq!(run.train.effective_lambda(), 0.0);
    }

    #[test]
    fn rejects_bad_values() {
        let k = format!("{}shared_layers = 9\n", minimal());
        assert!(matches!(RunConfig::parse(&k, &[]), Err(Error::Config(_))));
        let odd = format!("{}d_model = 130\n", minimal());
        assert!(RunConfig::parse(&odd, &[]).is_err());
        let unknown = format!("{}colour = 1\n", minimal());
        assert!(RunConfig::parse(&unknown, &[]).is_err());
        let sum = format!("{}d_word = 32\n", minimal());
        assert!(RunConfig::parse(&sum, &[]).is_err());
        let concat = format!("{}d_word = 32\ncomposition = \"concat\"\n", minimal());
        RunConfig::parse(&concat, &[]).unwrap();
    }

    #[test]
    fn echo_round_trips() {
        let run = RunConfig::parse(&minimal(), &[("target_metric".into(), "99.5".into())]).unwrap();
        let again = RunConfig::parse(&run.to_toml(), &[]).unwrap();
        assert_eq!(run, again);
    }
}
