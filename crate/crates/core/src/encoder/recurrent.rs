use super::EncoderKind;
use crate::error::{Error, Result};
use crate::model::{Init, LayoutBuilder};
use crate::numcore::{ParamId, Real, Tape, Tensor, Var};

/// Stacked gate weights, gates ordered (i, f, g, o) for LSTM and (r, z, n) for GRU.
#[derive(Clone, Debug)]
pub struct RecurrentParams {
    pub w_input: ParamId,
    pub b_input: ParamId,
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub hidden: usize,
}

fn gate_count(kind: EncoderKind) -> usize {
    match kind {
        EncoderKind::Lstm => 4,
        _ => 3,
    }
}

impl RecurrentParams {
    pub(crate) fn layout(kind: EncoderKind, input: usize, hidden: usize, b: &mut LayoutBuilder) -> Self {
        let g = gate_count(kind) * hidden;
        let name = kind.as_str();
        RecurrentParams {
            w_input: b.add(format!("encoder.{name}.w_input"), vec![g, input], Init::Normal),
            b_input: b.add(format!("encoder.{name}.b_input"), vec![g], Init::Zeros),
            w_hidden: b.add(format!("encoder.{name}.w_hidden"), vec![g, hidden], Init::Normal),
            b_hidden: b.add(format!("encoder.{name}.b_hidden"), vec![g], Init::Zeros),
            hidden,
        }
    }
}

/// Unidirectional single-layer recurrence from zero initial state; row `t`
/// of the `[N, D]` output is the hidden state after reading position `t`.
pub fn recurrent_encode<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    kind: EncoderKind,
    p: &RecurrentParams,
) -> Result<Var> {
    if tape.dims(x).len() != 2 {
        return Err(Error::Shape(format!(
            "recurrent input {:?} is not rank 2",
            tape.dims(x)
        )));
    }
    let n = tape.dims(x)[0];
    let d = p.hidden;
    let wi = tape.param(p.w_input);
    let bi = tape.param(p.b_input);
    let wh = tape.param(p.w_hidden);
    let bh = tape.param(p.b_hidden);
    let projected = tape.affine(x, wi, Some(bi))?;
    let mut h = tape.constant(Tensor::zeros(&[1, d]));
    let mut c = tape.constant(Tensor::zeros(&[1, d]));
    let mut outputs = Vec::with_capacity(n);
    for t in 0..n {
        let xt = tape.slice_rows(projected, t, 1)?;
        let ht = tape.affine(h, wh, Some(bh))?;
        match kind {
            EncoderKind::Lstm => {
                let gates = tape.add(xt, ht)?;
                let pre_i = tape.slice_last(gates, 0, d)?;
                let pre_f = tape.slice_last(gates, d, d)?;
                let pre_g = tape.slice_last(gates, 2 * d, d)?;
                let pre_o = tape.slice_last(gates, 3 * d, d)?;
                let i = tape.sigmoid(pre_i);
                let f = tape.sigmoid(pre_f);
                let g = tape.tanh(pre_g);
                let o = tape.sigmoid(pre_o);
                let keep = tape.mul(f, c)?;
                let write = tape.mul(i, g)?;
                c = tape.add(keep, write)?;
                let tc = tape.tanh(c);
                h = tape.mul(o, tc)?;
            }
            EncoderKind::Gru => {
                let xr = tape.slice_last(xt, 0, d)?;
                let xz = tape.slice_last(xt, d, d)?;
                let xn = tape.slice_last(xt, 2 * d, d)?;
                let hr = tape.slice_last(ht, 0, d)?;
                let hz = tape.slice_last(ht, d, d)?;
                let hn = tape.slice_last(ht, 2 * d, d)?;
                let pre_r = tape.add(xr, hr)?;
                let r = tape.sigmoid(pre_r);
                let pre_z = tape.add(xz, hz)?;
                let z = tape.sigmoid(pre_z);
                let gated = tape.mul(r, hn)?;
                let pre_n = tape.add(xn, gated)?;
                let cand = tape.tanh(pre_n);
                // h' = (1 − z)·n + z·h = n + z·(h − n)
                let diff = tape.sub(h, cand)?;
                let step = tape.mul(z, diff)?;
                h = tape.add(cand, step)?;
            }
            EncoderKind::Transformer => return Err(Error::Config("transformer is not a recurrent kind".into())),
        }
        outputs.push(h);
    }
    tape.stack_rows(&outputs)
}
