//! Token ids → hidden sequence `(h_1, ..., h_N)` of width `D_E`.
//!
//! Three interchangeable bodies share one embedding table: a transformer
//! stack, a unidirectional LSTM, and a unidirectional GRU.

mod embedding;
mod recurrent;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use embedding::{embed, load_pretrained_embeddings};
pub use recurrent::{recurrent_encode, RecurrentParams};
pub use transformer::{pad_attention_mask, transformer_layer, TransformerLayerParams};

use crate::error::{Error, Result};
use crate::model::{Init, LayoutBuilder};
use crate::numcore::{Mode, ParamId, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    Transformer,
    Lstm,
    Gru,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Transformer => "transformer",
            EncoderKind::Lstm => "lstm",
            EncoderKind::Gru => "gru",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(EncoderKind::Transformer),
            "lstm" => Ok(EncoderKind::Lstm),
            "gru" => Ok(EncoderKind::Gru),
            other => Err(Error::Config(format!("unknown encoder kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// `D_E`
    pub hidden: usize,
    pub stacks: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// `N`, special tokens included.
    pub seq_len: usize,
    /// Two residual+norm sublayers per stack instead of one.
    pub standard_pre_norm: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("hidden_size", self.hidden),
            ("stacks", self.stacks),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.seq_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.kind == EncoderKind::Transformer && !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum EncoderBody {
    Transformer(Vec<TransformerLayerParams>),
    Recurrent(RecurrentParams),
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embedding: ParamId,
    /// Learned positional table, transformer only.
    pub position: Option<ParamId>,
    pub body: EncoderBody,
}

impl EncoderParams {
    pub(crate) fn layout(cfg: &EncoderConfig, vocab_size: usize, b: &mut LayoutBuilder) -> Self {
        let d = cfg.hidden;
        let embedding = b.add("encoder.embedding", vec![vocab_size, d], Init::Normal);
        match cfg.kind {
            EncoderKind::Transformer => {
                let position = b.add("encoder.position", vec![cfg.seq_len, d], Init::Normal);
                let layers = (0..cfg.stacks)
                    .map(|i| TransformerLayerParams::layout(cfg, &format!("encoder.layer{i}"), b))
                    .collect();
                EncoderParams {
                    embedding,
                    position: Some(position),
                    body: EncoderBody::Transformer(layers),
                }
            }
            EncoderKind::Lstm | EncoderKind::Gru => EncoderParams {
                embedding,
                position: None,
                body: EncoderBody::Recurrent(RecurrentParams::layout(cfg.kind, d, d, b)),
            },
        }
    }
}

/// Run the configured encoder over one padded id sequence, returning `[N, D_E]`.
/// A final dropout is applied to the output in train mode.
pub fn encode<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    token_ids: &[usize],
    cfg: &EncoderConfig,
    params: &EncoderParams,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if token_ids.len() != cfg.seq_len {
        return Err(Error::Shape(format!(
            "encoder expects {} ids, got {}",
            cfg.seq_len,
            token_ids.len()
        )));
    }
    let table = tape.param(params.embedding);
    let positions = params.position.map(|p| tape.param(p));
    let x = embed(tape, token_ids, table, positions)?;
    let hidden = match (&params.body, cfg.kind) {
        (EncoderBody::Transformer(layers), EncoderKind::Transformer) => {
            let mask = pad_attention_mask(tape, token_ids);
            let mut h = x;
            for layer in layers {
                h = transformer_layer(tape, h, layer, cfg, mask, mode, rng)?;
            }
            h
        }
        (EncoderBody::Recurrent(p), kind @ (EncoderKind::Lstm | EncoderKind::Gru)) => {
            recurrent_encode(tape, x, kind, p)?
        }
        _ => return Err(Error::Config("encoder parameters do not match encoder kind".into())),
    };
    tape.dropout(hidden, cfg.dropout, mode, rng)
}
