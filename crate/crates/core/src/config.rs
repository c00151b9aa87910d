//! Plain-text `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys are an error. [`RunConfig::to_text`] writes every key,
//! so its output parses back to the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::Vocabs;
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// `(key, default, description)` for every accepted key, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("encoder", "transformer", "encoder body: transformer, lstm or gru"),
    ("hidden_size", "768", "hidden width D_E"),
    ("stacks", "12", "transformer stacks"),
    ("heads", "12", "attention heads"),
    ("ffn_dim", "3072", "inner feed-forward width"),
    (
        "dropout",
        "0.1",
        "dropout on attention, feed-forward and encoder output",
    ),
    ("max_seq_len", "50", "N, including [CLS] and [SEP]"),
    ("init_std", "0.02", "std of the normal weight initializer"),
    ("tie_positions", "false", "share one slot classifier across positions"),
    (
        "detach_links",
        "false",
        "stop gradients through the intent/slot probability links",
    ),
    (
        "bidirectional",
        "true",
        "feed P_I to the slot head and P_S to the intent head",
    ),
    (
        "standard_pre_norm",
        "false",
        "two residual+norm sublayers per transformer stack",
    ),
    (
        "embedding_file",
        "",
        "text word vectors loaded into the token table (empty or none: learned from scratch)",
    ),
    ("lr", "5e-5", "Adam learning rate"),
    ("epochs", "10", "training epochs"),
    ("batch_size", "32", "examples per update"),
    ("seed", "0", "seed for initialization, shuffling and dropout"),
    ("adam_beta1", "0.9", "Adam first-moment decay"),
    ("adam_beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam denominator epsilon"),
    ("loss_include_pad", "false", "also train slot positions past [SEP]"),
    ("strict_spans", "false", "ignore I- tags that do not continue a span"),
    ("gradcheck_vocab", "10", "token vocabulary size for gradcheck"),
    ("gradcheck_intents", "3", "intent count for gradcheck"),
    ("gradcheck_slot_labels", "5", "slot label count for gradcheck"),
    ("gradcheck_init_std", "0.3", "weight std for gradcheck"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderKind,
    pub hidden_size: usize,
    pub stacks: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub init_std: f64,
    pub tie_positions: bool,
    pub detach_links: bool,
    pub bidirectional: bool,
    pub standard_pre_norm: bool,
    pub embedding_file: Option<PathBuf>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss_include_pad: bool,
    pub strict_spans: bool,
    pub gradcheck_vocab: usize,
    pub gradcheck_intents: usize,
    pub gradcheck_slot_labels: usize,
    pub gradcheck_init_std: f64,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn detail(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            encoder: EncoderKind::Transformer,
            hidden_size: 0,
            stacks: 0,
            heads: 0,
            ffn_dim: 0,
            dropout: 0.0,
            max_seq_len: 0,
            init_std: 0.0,
            tie_positions: false,
            detach_links: false,
            bidirectional: false,
            standard_pre_norm: false,
            embedding_file: None,
            lr: 0.0,
            epochs: 0,
            batch_size: 0,
            seed: 0,
            adam_beta1: 0.0,
            adam_beta2: 0.0,
            adam_eps: 0.0,
            loss_include_pad: false,
            strict_spans: false,
            gradcheck_vocab: 0,
            gradcheck_intents: 0,
            gradcheck_slot_labels: 0,
            gradcheck_init_std: 0.0,
        };
        for (k, v, _) in KEYS {
            cfg.set(k, v).expect("default values parse");
        }
        cfg
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "encoder" => self.encoder = v.parse()?,
            "hidden_size" => self.hidden_size = parse_value(key, v)?,
            "stacks" => self.stacks = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "ffn_dim" => self.ffn_dim = parse_value(key, v)?,
            "dropout" => self.dropout = parse_value(key, v)?,
            "max_seq_len" => self.max_seq_len = parse_value(key, v)?,
            "init_std" => self.init_std = parse_value(key, v)?,
            "tie_positions" => self.tie_positions = parse_value(key, v)?,
            "detach_links" => self.detach_links = parse_value(key, v)?,
            "bidirectional" => self.bidirectional = parse_value(key, v)?,
            "standard_pre_norm" => self.standard_pre_norm = parse_value(key, v)?,
            "embedding_file" => self.embedding_file = (!v.is_empty() && v != "none").then(|| PathBuf::from(v)),
            "lr" => self.lr = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, v)?,
            "adam_eps" => self.adam_eps = parse_value(key, v)?,
            "loss_include_pad" => self.loss_include_pad = parse_value(key, v)?,
            "strict_spans" => self.strict_spans = parse_value(key, v)?,
            "gradcheck_vocab" => self.gradcheck_vocab = parse_value(key, v)?,
            "gradcheck_intents" => self.gradcheck_intents = parse_value(key, v)?,
            "gradcheck_slot_labels" => self.gradcheck_slot_labels = parse_value(key, v)?,
            "gradcheck_init_std" => self.gradcheck_init_std = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, detail(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), detail(&e))))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "encoder" => self.encoder.to_string(),
            "hidden_size" => self.hidden_size.to_string(),
            "stacks" => self.stacks.to_string(),
            "heads" => self.heads.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "dropout" => self.dropout.to_string(),
            "max_seq_len" => self.max_seq_len.to_string(),
            "init_std" => self.init_std.to_string(),
            "tie_positions" => self.tie_positions.to_string(),
            "detach_links" => self.detach_links.to_string(),
            "bidirectional" => self.bidirectional.to_string(),
            "standard_pre_norm" => self.standard_pre_norm.to_string(),
            "embedding_file" => self
                .embedding_file
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "lr" => self.lr.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "loss_include_pad" => self.loss_include_pad.to_string(),
            "strict_spans" => self.strict_spans.to_string(),
            "gradcheck_vocab" => self.gradcheck_vocab.to_string(),
            "gradcheck_intents" => self.gradcheck_intents.to_string(),
            "gradcheck_slot_labels" => self.gradcheck_slot_labels.to_string(),
            "gradcheck_init_std" => self.gradcheck_init_std.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        if self.max_seq_len < 3 {
            return Err(Error::Config(format!("max_seq_len {} < 3", self.max_seq_len)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.init_std > 0.0) || !(self.gradcheck_init_std > 0.0) {
            return Err(Error::Config("init_std must be > 0".into()));
        }
        for (k, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{k} {b} outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            kind: self.encoder,
            hidden: self.hidden_size,
            stacks: self.stacks,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
            seq_len: self.max_seq_len,
            standard_pre_norm: self.standard_pre_norm,
        }
    }

    pub fn model_config(&self, vocabs: &Vocabs) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder_config(),
            vocab_size: vocabs.tokens.len(),
            num_intents: vocabs.intents.len(),
            num_slots: vocabs.slots.len(),
            tie_positions: self.tie_positions,
            detach_links: self.detach_links,
            bidirectional: self.bidirectional,
            init_std: self.init_std,
        }
    }

    /// The model checked by `gradcheck`: these dims, the gradcheck label
    /// counts and init std, dropout off.
    pub fn gradcheck_model_config(&self) -> ModelConfig {
        let mut encoder = self.encoder_config();
        encoder.dropout = 0.0;
        ModelConfig {
            encoder,
            vocab_size: self.gradcheck_vocab,
            num_intents: self.gradcheck_intents,
            num_slots: self.gradcheck_slot_labels,
            tie_positions: self.tie_positions,
            detach_links: self.detach_links,
            bidirectional: self.bidirectional,
            init_std: self.gradcheck_init_std,
        }
    }
}
