//! Bi-directional intent/slot heads.
//!
//! *intent2slot*: an initial intent distribution `P_I = softmax(h_1·W_Iᵀ + b_I)`
//! is repeated over the `N−1` non-`[CLS]` positions and concatenated onto each
//! hidden state before a per-position slot classifier
//! `S[n] = (H[n] ⊕ P_I)·V_S[n]ᵀ + m_S[n]`.
//!
//! *slot2intent*: per-position slot distributions
//! `P_S[n] = softmax(H[n]·W_S[n]ᵀ + b_S[n])` are flattened and concatenated
//! onto `h_1` for the final intent classifier
//! `softmax((h_1 ⊕ flatten(P_S))·V_Iᵀ + m_I)`.
//!
//! The two probability links (`P_I` into the slot path and `flatten(P_S)` into
//! the intent path) carry gradients unless `detach_links` is set. With
//! `bidirectional` off both links are replaced by zeros, so each classifier
//! reads hidden states only.

use crate::error::{Error, Result};
use crate::model::{Init, LayoutBuilder};
use crate::numcore::{argmax, ParamId, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// `D_E`
    pub hidden: usize,
    /// `D_IP`
    pub num_intents: usize,
    /// `D_SP`
    pub num_slots: usize,
    /// `N`
    pub seq_len: usize,
    pub tie_positions: bool,
    pub detach_links: bool,
    pub bidirectional: bool,
}

impl HeadConfig {
    pub fn positions(&self) -> usize {
        self.seq_len - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::Config(format!("sequence length {} < 2", self.seq_len)));
        }
        if self.hidden == 0 || self.num_intents == 0 || self.num_slots == 0 {
            return Err(Error::Config("head sizes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w_intent: ParamId,
    pub b_intent: ParamId,
    pub v_slot: ParamId,
    pub m_slot: ParamId,
    pub w_slot: ParamId,
    pub b_slot: ParamId,
    pub v_intent: ParamId,
    pub m_intent: ParamId,
}

impl HeadParams {
    pub(crate) fn layout(cfg: &HeadConfig, b: &mut LayoutBuilder) -> Self {
        let (d, ip, sp, p) = (cfg.hidden, cfg.num_intents, cfg.num_slots, cfg.positions());
        let per_pos = |dims: Vec<usize>| -> Vec<usize> {
            if cfg.tie_positions {
                dims
            } else {
                std::iter::once(p).chain(dims).collect()
            }
        };
        HeadParams {
            w_intent: b.add("W_I", vec![ip, d], Init::Normal),
            b_intent: b.add("b_I", vec![ip], Init::Zeros),
            v_slot: b.add("V_S", per_pos(vec![sp, d + ip]), Init::Normal),
            m_slot: b.add("m_S", per_pos(vec![sp]), Init::Zeros),
            w_slot: b.add("W_S", per_pos(vec![sp, d]), Init::Normal),
            b_slot: b.add("b_S", per_pos(vec![sp]), Init::Zeros),
            v_intent: b.add("V_I", vec![ip, d + sp * p], Init::Normal),
            m_intent: b.add("m_I", vec![ip], Init::Zeros),
        }
    }
}

/// Fixed link values substituted for the computed ones. Used to evaluate the
/// function that a detached forward differentiates.
#[derive(Clone, Copy, Debug)]
pub enum Links<'a, T> {
    Live,
    Frozen { intent: &'a [T], slots: &'a [T] },
}

#[derive(Clone, Debug)]
pub struct HeadOutputs {
    /// `P_I`, `[D_IP]`
    pub p_intent: Var,
    /// Softmax of `S`, `[N−1, D_SP]`
    pub slot_probs: Var,
    /// `P_S`, `[N−1, D_SP]`
    pub probe_probs: Var,
    /// Final intent distribution, `[D_IP]`
    pub intent_probs: Var,
    pub slot_pred: Vec<usize>,
    pub intent_pred: usize,
}

fn position_dense<T: Real>(tape: &mut Tape<'_, T>, x: Var, w: ParamId, b: ParamId, tied: bool) -> Result<Var> {
    let w = tape.param(w);
    let b = tape.param(b);
    if tied {
        tape.affine(x, w, Some(b))
    } else {
        tape.position_affine(x, w, b)
    }
}

/// `P_I = softmax(h_1·W_Iᵀ + b_I)`
pub fn intent_probe<T: Real>(tape: &mut Tape<'_, T>, h1: Var, p: &HeadParams) -> Result<Var> {
    let w = tape.param(p.w_intent);
    let b = tape.param(p.b_intent);
    let z = tape.affine(h1, w, Some(b))?;
    tape.softmax(z)
}

/// `P_I` repeated over the `N−1` labelled positions.
pub fn broadcast_intent<T: Real>(tape: &mut Tape<'_, T>, p_intent: Var, n: usize) -> Result<Var> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("cannot broadcast over N={n} < 2")));
    }
    tape.repeat_rows(p_intent, n - 1)
}

/// `S[n] = (H[n] ⊕ P̂_I[n])·V_S[n]ᵀ + m_S[n]`
pub fn intent2slot_logits<T: Real>(
    tape: &mut Tape<'_, T>,
    h: Var,
    p_intent_hat: Var,
    p: &HeadParams,
    tied: bool,
) -> Result<Var> {
    let joined = tape.concat_last(h, p_intent_hat)?;
    position_dense(tape, joined, p.v_slot, p.m_slot, tied)
}

/// Row-wise softmax of `S` and the per-row argmax.
pub fn predict_slots<T: Real>(tape: &mut Tape<'_, T>, s: Var) -> Result<(Var, Vec<usize>)> {
    let probs = tape.softmax(s)?;
    let k = *tape.dims(probs).last().expect("rank 2");
    let preds = tape.value(probs).chunks(k).map(argmax).collect();
    Ok((probs, preds))
}

/// `P_S[n] = softmax(H[n]·W_S[n]ᵀ + b_S[n])`
pub fn slot_probe<T: Real>(tape: &mut Tape<'_, T>, h: Var, p: &HeadParams, tied: bool) -> Result<Var> {
    let z = position_dense(tape, h, p.w_slot, p.b_slot, tied)?;
    tape.softmax(z)
}

/// Intent distribution from `h_1 ⊕ P̂_S`, where `p_slots_flat` is the
/// flattened `[D_SP·(N−1)]` slot-probability vector.
pub fn slot2intent_predict<T: Real>(
    tape: &mut Tape<'_, T>,
    h1: Var,
    p_slots_flat: Var,
    p: &HeadParams,
) -> Result<(Var, usize)> {
    let joined = tape.concat_last(h1, p_slots_flat)?;
    let v = tape.param(p.v_intent);
    let m = tape.param(p.m_intent);
    let z = tape.affine(joined, v, Some(m))?;
    let probs = tape.softmax(z)?;
    let pred = argmax(tape.value(probs));
    Ok((probs, pred))
}

fn link<T: Real>(tape: &mut Tape<'_, T>, computed: Var, frozen: Option<&[T]>, cfg: &HeadConfig) -> Result<Var> {
    let dims = tape.dims(computed).to_vec();
    if !cfg.bidirectional {
        return Ok(tape.constant(Tensor::zeros(&dims)));
    }
    if let Some(values) = frozen {
        return Ok(tape.constant(Tensor::new(dims, values.to_vec())?));
    }
    Ok(if cfg.detach_links {
        tape.detach(computed)
    } else {
        computed
    })
}

/// Both heads over an encoder output `[N, D_E]`.
pub fn forward<T: Real>(
    tape: &mut Tape<'_, T>,
    hidden: Var,
    p: &HeadParams,
    cfg: &HeadConfig,
    links: Links<'_, T>,
) -> Result<HeadOutputs> {
    let hd = tape.dims(hidden).to_vec();
    if hd != [cfg.seq_len, cfg.hidden] {
        return Err(Error::Shape(format!(
            "heads expect hidden [{}, {}], got {hd:?}",
            cfg.seq_len, cfg.hidden
        )));
    }
    let (frozen_intent, frozen_slots) = match links {
        Links::Live => (None, None),
        Links::Frozen { intent, slots } => (Some(intent), Some(slots)),
    };
    let first = tape.slice_rows(hidden, 0, 1)?;
    let h1 = tape.reshape(first, vec![cfg.hidden])?;
    let h = tape.slice_rows(hidden, 1, cfg.positions())?;

    let p_intent = intent_probe(tape, h1, p)?;
    let intent_link = link(tape, p_intent, frozen_intent, cfg)?;
    let p_intent_hat = broadcast_intent(tape, intent_link, cfg.seq_len)?;
    let s = intent2slot_logits(tape, h, p_intent_hat, p, cfg.tie_positions)?;
    let (slot_probs, slot_pred) = predict_slots(tape, s)?;

    let probe_probs = slot_probe(tape, h, p, cfg.tie_positions)?;
    let flat = tape.flatten(probe_probs)?;
    let slot_link = link(tape, flat, frozen_slots, cfg)?;
    let (intent_probs, intent_pred) = slot2intent_predict(tape, h1, slot_link, p)?;

    Ok(HeadOutputs {
        p_intent,
        slot_probs,
        probe_probs,
        intent_probs,
        slot_pred,
        intent_pred,
    })
}
