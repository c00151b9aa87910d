use rand::Rng;

use super::EncoderConfig;
use crate::corpus::PAD_ID;
use crate::error::Result;
use crate::model::{Init, LayoutBuilder};
use crate::numcore::{Mode, ParamId, Real, Tape, Tensor, Var};

const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct TransformerLayerParams {
    pub query: (ParamId, ParamId),
    /// Weight only: a key bias shifts every score of a query equally, which
    /// the softmax cancels.
    pub key: ParamId,
    pub value: (ParamId, ParamId),
    pub attn_out: (ParamId, ParamId),
    pub ffn_in: (ParamId, ParamId),
    pub ffn_out: (ParamId, ParamId),
    /// Gain and bias of the normalization closing the stack.
    pub norm: (ParamId, ParamId),
    /// Extra normalization after the attention sublayer (standard wiring only).
    pub attn_norm: Option<(ParamId, ParamId)>,
}

fn dense(b: &mut LayoutBuilder, name: &str, out: usize, inp: usize) -> (ParamId, ParamId) {
    (
        b.add(format!("{name}.weight"), vec![out, inp], Init::Normal),
        b.add(format!("{name}.bias"), vec![out], Init::Zeros),
    )
}

fn norm(b: &mut LayoutBuilder, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        b.add(format!("{name}.gain"), vec![d], Init::Ones),
        b.add(format!("{name}.bias"), vec![d], Init::Zeros),
    )
}

impl TransformerLayerParams {
    pub(crate) fn layout(cfg: &EncoderConfig, prefix: &str, b: &mut LayoutBuilder) -> Self {
        let d = cfg.hidden;
        let query = dense(b, &format!("{prefix}.attn.query"), d, d);
        let key = b.add(format!("{prefix}.attn.key.weight"), vec![d, d], Init::Normal);
        let value = dense(b, &format!("{prefix}.attn.value"), d, d);
        let attn_out = dense(b, &format!("{prefix}.attn.output"), d, d);
        let attn_norm = cfg
            .standard_pre_norm
            .then(|| norm(b, &format!("{prefix}.attn.norm"), d));
        let ffn_in = dense(b, &format!("{prefix}.ffn.inner"), cfg.ffn_dim, d);
        let ffn_out = dense(b, &format!("{prefix}.ffn.outer"), d, cfg.ffn_dim);
        let norm = norm(b, &format!("{prefix}.norm"), d);
        TransformerLayerParams {
            query,
            key,
            value,
            attn_out,
            ffn_in,
            ffn_out,
            norm,
            attn_norm,
        }
    }
}

/// Additive `[N, N]` score mask hiding `[PAD]` keys from every query.
pub fn pad_attention_mask<T: Real>(tape: &mut Tape<'_, T>, token_ids: &[usize]) -> Var {
    let n = token_ids.len();
    let mut m = vec![T::zero(); n * n];
    for i in 0..n {
        for (j, &id) in token_ids.iter().enumerate() {
            if id == PAD_ID {
                m[i * n + j] = T::lit(MASKED_SCORE);
            }
        }
    }
    tape.constant(Tensor::new(vec![n, n], m).expect("square mask"))
}

fn linear<T: Real>(tape: &mut Tape<'_, T>, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
    let w = tape.param(p.0);
    let b = tape.param(p.1);
    tape.affine(x, w, Some(b))
}

fn normalize<T: Real>(tape: &mut Tape<'_, T>, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
    let g = tape.param(p.0);
    let b = tape.param(p.1);
    tape.layer_norm(x, g, b)
}

fn multi_head_attention<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    x: Var,
    p: &TransformerLayerParams,
    cfg: &EncoderConfig,
    mask: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let dh = cfg.hidden / cfg.heads;
    let q = linear(tape, x, p.query)?;
    let wk = tape.param(p.key);
    let k = tape.affine(x, wk, None)?;
    let v = linear(tape, x, p.value)?;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut context: Option<Var> = None;
    for h in 0..cfg.heads {
        let qh = tape.slice_last(q, h * dh, dh)?;
        let kh = tape.slice_last(k, h * dh, dh)?;
        let vh = tape.slice_last(v, h * dh, dh)?;
        let scores = tape.matmul(qh, kh, true)?;
        let scores = tape.scale(scores, scale);
        let scores = tape.add(scores, mask)?;
        let weights = tape.softmax(scores)?;
        let weights = tape.dropout(weights, cfg.dropout, mode, rng)?;
        let ctx = tape.matmul(weights, vh, false)?;
        context = Some(match context {
            Some(prev) => tape.concat_last(prev, ctx)?,
            None => ctx,
        });
    }
    linear(tape, context.expect("heads >= 1"), p.attn_out)
}

fn feed_forward<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    x: Var,
    p: &TransformerLayerParams,
    cfg: &EncoderConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let inner = linear(tape, x, p.ffn_in)?;
    let inner = tape.gelu(inner);
    let out = linear(tape, inner, p.ffn_out)?;
    tape.dropout(out, cfg.dropout, mode, rng)
}

/// One encoder stack.
///
/// Default wiring: `a = attention(x)`, `out = norm(a + ffn(a))`, one
/// normalization per stack. With `standard_pre_norm`:
/// `y = norm1(x + attention(x))`, `out = norm2(y + ffn(y))`.
pub fn transformer_layer<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    x: Var,
    p: &TransformerLayerParams,
    cfg: &EncoderConfig,
    mask: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let attn = multi_head_attention(tape, x, p, cfg, mask, mode, rng)?;
    let base = match p.attn_norm {
        Some(n) => {
            let res = tape.add(x, attn)?;
            normalize(tape, res, n)?
        }
        None => attn,
    };
    let ffn = feed_forward(tape, base, p, cfg, mode, rng)?;
    let sum = tape.add(base, ffn)?;
    normalize(tape, sum, p.norm)
}
