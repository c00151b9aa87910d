//! Encoder + heads, parameter layout and initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::{encode, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::heads::{self, HeadConfig, HeadOutputs, HeadParams, Links};
use crate::numcore::{Mode, ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

/// Records parameter shapes in a fixed order; ids are positions in that order.
#[derive(Default)]
pub(crate) struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    pub(crate) fn add(&mut self, name: impl Into<String>, dims: Vec<usize>, init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            dims,
            init,
        });
        ParamId(self.specs.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    pub num_intents: usize,
    pub num_slots: usize,
    pub tie_positions: bool,
    pub detach_links: bool,
    pub bidirectional: bool,
    pub init_std: f64,
}

impl ModelConfig {
    /// Verification-scale model: N=8, D_E=16, 2 heads, 2 stacks, FFN 32,
    /// 3 intents, 5 slot labels, dropout off.
    pub fn tiny(kind: crate::encoder::EncoderKind, vocab_size: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                kind,
                hidden: 16,
                stacks: 2,
                heads: 2,
                ffn_dim: 32,
                dropout: 0.0,
                seq_len: 8,
                standard_pre_norm: false,
            },
            vocab_size,
            num_intents: 3,
            num_slots: 5,
            tie_positions: false,
            detach_links: false,
            bidirectional: true,
            init_std: 0.02,
        }
    }

    pub fn heads(&self) -> HeadConfig {
        HeadConfig {
            hidden: self.encoder.hidden,
            num_intents: self.num_intents,
            num_slots: self.num_slots,
            seq_len: self.encoder.seq_len,
            tie_positions: self.tie_positions,
            detach_links: self.detach_links,
            bidirectional: self.bidirectional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.heads().validate()?;
        if self.vocab_size < crate::corpus::VocabKind::Token.reserved().len() {
            return Err(Error::Config(format!("vocab_size {} too small", self.vocab_size)));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config(format!("init_std {} must be > 0", self.init_std)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct JointModel {
    cfg: ModelConfig,
    specs: Vec<ParamSpec>,
    pub encoder: EncoderParams,
    pub heads: HeadParams,
}

/// Everything a forward pass records, as tape handles.
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    pub hidden: Var,
    pub heads: HeadOutputs,
}

/// Values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub p_intent: Tensor<T>,
    pub slot_probs: Tensor<T>,
    pub probe_probs: Tensor<T>,
    pub intent_probs: Tensor<T>,
    pub slot_pred: Vec<usize>,
    pub intent_pred: usize,
}

impl<T: Real> ForwardOutput<T> {
    pub fn from_tape(tape: &Tape<'_, T>, out: &HeadOutputs) -> Self {
        ForwardOutput {
            p_intent: tape.tensor(out.p_intent),
            slot_probs: tape.tensor(out.slot_probs),
            probe_probs: tape.tensor(out.probe_probs),
            intent_probs: tape.tensor(out.intent_probs),
            slot_pred: out.slot_pred.clone(),
            intent_pred: out.intent_pred,
        }
    }
}

impl JointModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = LayoutBuilder::default();
        let encoder = EncoderParams::layout(&cfg.encoder, cfg.vocab_size, &mut b);
        let heads = HeadParams::layout(&cfg.heads(), &mut b);
        Ok(JointModel {
            cfg,
            specs: b.specs,
            encoder,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Normal(0, init_std) weights, zero biases, unit norm gains.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, self.cfg.init_std).expect("positive std");
        let mut store = ParamStore::new();
        for spec in &self.specs {
            let n: usize = spec.dims.iter().product();
            let data: Vec<T> = match spec.init {
                Init::Normal => (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect(),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            let t = Tensor::new(spec.dims.clone(), data).expect("layout dims");
            store.add(spec.name.clone(), t).expect("unique layout names");
        }
        store
    }

    /// Check that `store` has exactly this model's parameter names and shapes, in order.
    pub fn check_params<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        if store.len() != self.specs.len() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} parameter arrays, found {}",
                self.specs.len(),
                store.len()
            )));
        }
        for ((name, t), spec) in store.iter().zip(&self.specs) {
            if name != spec.name || t.dims() != spec.dims.as_slice() {
                return Err(Error::DimensionMismatch(format!(
                    "parameter {name} {:?}, model expects {} {:?}",
                    t.dims(),
                    spec.name,
                    spec.dims
                )));
            }
        }
        Ok(())
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        token_ids: &[usize],
        mode: Mode,
        rng: &mut R,
        links: Links<'_, T>,
    ) -> Result<ModelOutputs> {
        if let Some(&bad) = token_ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let hidden = encode(tape, token_ids, &self.cfg.encoder, &self.encoder, mode, rng)?;
        let heads = heads::forward(tape, hidden, &self.heads, &self.cfg.heads(), links)?;
        Ok(ModelOutputs { hidden, heads })
    }

    /// Eval-mode forward returning values only.
    pub fn predict<T: Real>(&self, params: &ParamStore<T>, token_ids: &[usize]) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new(params);
        // Eval mode never draws from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, token_ids, Mode::Eval, &mut rng, Links::Live)?;
        Ok(ForwardOutput::from_tape(&tape, &out.heads))
    }
}
