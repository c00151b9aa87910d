//! Recorded forward computation over dense arrays with reverse-mode gradients.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Parameters enter the tape by reference (no copy); every other node owns its
//! value. [`Tape::backward`] walks the nodes in exact reverse recording order
//! and returns a [`Gradients`] table, leaving the tape untouched, so it can be
//! called again on the same or a different loss.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Floor applied to probabilities inside the negative log-likelihood.
pub const PROB_FLOOR: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Input,
    Param(usize),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    PositionAffine {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<T>,
    },
    RepeatRows(Var),
    ConcatLast(Var, Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    StackRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Nll {
        probs: Var,
        gold: Vec<usize>,
        weight: Vec<T>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    dims: Vec<usize>,
    // Empty for parameter nodes; their value lives in the store.
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

/// `[rows, width]` view of a dims list, treating all but the last axis as rows.
fn rows_width(dims: &[usize]) -> (usize, usize) {
    match dims.split_last() {
        Some((&w, lead)) => (numel(lead), w),
        None => (1, 1),
    }
}

fn gelu_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        match self.nodes[v.0].op {
            Op::Param(i) => self.params.get(ParamId(i)).data(),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.dims(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, dims: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == numel(&dims));
        self.nodes.push(Node {
            dims,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let dims = t.dims().to_vec();
        self.push(dims, t.into_data(), Op::Constant, false)
    }

    /// Leaf that receives a gradient when `requires_grad` is set.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let dims = t.dims().to_vec();
        self.push(dims, t.into_data(), Op::Input, requires_grad)
    }

    /// Parameter leaf. Registering the same parameter twice returns the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let dims = self.params.get(id).dims().to_vec();
        let v = self.push(dims, Vec::new(), Op::Param(id.0), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.tensor(x);
        self.constant(t)
    }

    /// `y = x·Wᵀ + b` over the trailing axis of `x`, broadcast over leading axes.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        if wd.len() != 2 || xd.is_empty() || *xd.last().unwrap() != wd[1] {
            return shape_err(format!("affine: x {xd:?} vs W {wd:?}"));
        }
        let (out, inp) = (wd[0], wd[1]);
        if let Some(b) = b {
            if self.dims(b) != [out] {
                return shape_err(format!("affine: bias {:?} vs out {out}", self.dims(b)));
            }
        }
        let (rows, _) = rows_width(&xd);
        let xv = self.value(x);
        let wv = self.value(w);
        let mut y = vec![T::zero(); rows * out];
        for r in 0..rows {
            let xr = &xv[r * inp..(r + 1) * inp];
            for o in 0..out {
                let wr = &wv[o * inp..(o + 1) * inp];
                y[r * out + o] = xr.iter().zip(wr).map(|(&a, &c)| a * c).sum();
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..rows {
                for o in 0..out {
                    y[r * out + o] += bv[o];
                }
            }
        }
        let mut dims = xd;
        *dims.last_mut().unwrap() = out;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(dims, y, Op::Affine { x, w, b }, rg))
    }

    /// Per-row affine map with untied weights: `y[r] = x[r]·W[r]ᵀ + b[r]`.
    pub fn position_affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        let bd = self.dims(b).to_vec();
        if xd.len() != 2 || wd.len() != 3 || wd[0] != xd[0] || wd[2] != xd[1] || bd != [wd[0], wd[1]] {
            return shape_err(format!("position_affine: x {xd:?}, W {wd:?}, b {bd:?}"));
        }
        let (rows, out, inp) = (wd[0], wd[1], wd[2]);
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut y = vec![T::zero(); rows * out];
        for r in 0..rows {
            let xr = &xv[r * inp..(r + 1) * inp];
            for o in 0..out {
                let base = (r * out + o) * inp;
                let wr = &wv[base..base + inp];
                y[r * out + o] = xr.iter().zip(wr).map(|(&a, &c)| a * c).sum::<T>() + bv[r * out + o];
            }
        }
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(vec![rows, out], y, Op::PositionAffine { x, w, b }, rg))
    }

    /// `a·b` for rank-2 operands, or `a·bᵀ` when `transpose_b`.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let ad = self.dims(a).to_vec();
        let bd = self.dims(b).to_vec();
        if ad.len() != 2 || bd.len() != 2 {
            return shape_err(format!("matmul: {ad:?} x {bd:?}"));
        }
        let (m, k) = (ad[0], ad[1]);
        let (kb, n) = if transpose_b { (bd[1], bd[0]) } else { (bd[0], bd[1]) };
        if k != kb {
            return shape_err(format!("matmul: {ad:?} x {bd:?} (transpose_b={transpose_b})"));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut y = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    let bval = if transpose_b { bv[j * k + p] } else { bv[p * n + j] };
                    acc += av[i * k + p] * bval;
                }
                y[i * n + j] = acc;
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], y, Op::MatMul { a, b, transpose_b }, rg))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_dims(a, b, what)?;
        let y = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| f(p, q))
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(self.dims(a).to_vec(), y, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |p, q| p - q, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.any_grad(&[x]);
        self.push(self.dims(x).to_vec(), y, Op::Scale(x, c), rg)
    }

    fn map_op(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let y = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.any_grad(&[x]);
        self.push(self.dims(x).to_vec(), y, op, rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_op(
            x,
            |v| {
                let f = v.as_f64();
                T::lit(f * gelu_cdf(f))
            },
            Op::Gelu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_op(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_op(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// Softmax over the trailing axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let xv = self.value(x);
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let (rows, k) = rows_width(&dims);
        let mut y = vec![T::zero(); rows * k];
        for r in 0..rows {
            let row = &xv[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let out = &mut y[r * k..(r + 1) * k];
            let mut total = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in out.iter_mut() {
                *o = *o / total;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(dims, y, Op::Softmax(x), rg))
    }

    /// Layer normalization over the trailing axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let (rows, d) = rows_width(&dims);
        if self.dims(gain) != [d] || self.dims(bias) != [d] {
            return shape_err(format!("layer_norm: x {dims:?}, gain {:?}", self.dims(gain)));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let dt = T::lit(d as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut y = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                y[r * d + i] = (row[i] - mean) * rs * gv[i] + bv[i];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(dims, y, Op::LayerNorm { x, gain, bias, rstd }, rg))
    }

    /// Stack `times` copies of a vector into a `[times, K]` matrix.
    pub fn repeat_rows(&mut self, v: Var, times: usize) -> Result<Var> {
        if times < 1 {
            return Err(Error::InvalidArgument("repeat_rows needs times >= 1".into()));
        }
        let vd = self.dims(v).to_vec();
        if vd.len() != 1 {
            return shape_err(format!("repeat_rows expects a vector, got {vd:?}"));
        }
        let y = self.value(v).repeat(times);
        let rg = self.any_grad(&[v]);
        Ok(self.push(vec![times, vd[0]], y, Op::RepeatRows(v), rg))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let ad = self.dims(a).to_vec();
        let bd = self.dims(b).to_vec();
        if ad.is_empty() || bd.is_empty() || ad[..ad.len() - 1] != bd[..bd.len() - 1] {
            return shape_err(format!("concat_last: {ad:?} vs {bd:?}"));
        }
        let (rows, wa) = rows_width(&ad);
        let (_, wb) = rows_width(&bd);
        let av = self.value(a);
        let bv = self.value(b);
        let mut y = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            y.extend_from_slice(&av[r * wa..(r + 1) * wa]);
            y.extend_from_slice(&bv[r * wb..(r + 1) * wb]);
        }
        let mut dims = ad;
        *dims.last_mut().unwrap() = wa + wb;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(dims, y, Op::ConcatLast(a, b), rg))
    }

    /// Columns `start..start+len` of the trailing axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let (rows, w) = rows_width(&xd);
        if xd.is_empty() || len == 0 || start + len > w {
            return shape_err(format!("slice_last {start}+{len} of {xd:?}"));
        }
        let xv = self.value(x);
        let mut y = Vec::with_capacity(rows * len);
        for r in 0..rows {
            y.extend_from_slice(&xv[r * w + start..r * w + start + len]);
        }
        let mut dims = xd;
        *dims.last_mut().unwrap() = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(dims, y, Op::SliceLast { x, start }, rg))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if xd.is_empty() || len == 0 || start + len > xd[0] {
            return shape_err(format!("slice_rows {start}+{len} of {xd:?}"));
        }
        let w = numel(&xd[1..]);
        let y = self.value(x)[start * w..(start + len) * w].to_vec();
        let mut dims = xd;
        dims[0] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(dims, y, Op::SliceRows { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, dims: Vec<usize>) -> Result<Var> {
        if numel(&dims) != numel(self.dims(x)) {
            return shape_err(format!("reshape {:?} -> {dims:?}", self.dims(x)));
        }
        let y = self.value(x).to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(dims, y, Op::Reshape(x), rg))
    }

    /// Row-major flattening of a rank-2 array.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if xd.len() != 2 {
            return shape_err(format!("flatten expects rank 2, got {xd:?}"));
        }
        self.reshape(x, vec![xd[0] * xd[1]])
    }

    /// Stack equally sized arrays as the rows of a `[n, K]` matrix.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("stack_rows of nothing".into());
        };
        let k = numel(self.dims(first));
        let mut y = Vec::with_capacity(xs.len() * k);
        for &x in xs {
            if numel(self.dims(x)) != k {
                return shape_err(format!("stack_rows: {:?} vs width {k}", self.dims(x)));
            }
            y.extend_from_slice(self.value(x));
        }
        let rg = self.any_grad(xs);
        Ok(self.push(vec![xs.len(), k], y, Op::StackRows(xs.to_vec()), rg))
    }

    /// Row lookup `y[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let td = self.dims(table).to_vec();
        if td.len() != 2 || ids.is_empty() {
            return shape_err(format!("gather_rows from {td:?}"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= td[0]) {
            return Err(Error::InvalidArgument(format!(
                "id {bad} out of range for {} rows",
                td[0]
            )));
        }
        let d = td[1];
        let tv = self.value(table);
        let mut y = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            y.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            y,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Weighted negative log-likelihood summed over rows:
    /// `Σ_r weight[r]·(−ln max(probs[r][gold[r]], 1e-12))`.
    pub fn nll(&mut self, probs: Var, gold: &[usize], weight: &[T]) -> Result<Var> {
        let (rows, k) = rows_width(self.dims(probs));
        if gold.len() != rows || weight.len() != rows {
            return shape_err(format!(
                "nll: {rows} rows, {} gold, {} weights",
                gold.len(),
                weight.len()
            ));
        }
        if let Some(&bad) = gold.iter().find(|&&g| g >= k) {
            return Err(Error::InvalidArgument(format!(
                "gold class {bad} out of range for {k} classes"
            )));
        }
        let pv = self.value(probs);
        let floor = T::lit(PROB_FLOOR);
        let mut total = T::zero();
        for r in 0..rows {
            if weight[r] != T::zero() {
                total += weight[r] * -(pv[r * k + gold[r]].max(floor)).ln();
            }
        }
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            Vec::new(),
            vec![total],
            Op::Nll {
                probs,
                gold: gold.to_vec(),
                weight: weight.to_vec(),
            },
            rg,
        ))
    }

    /// `−ln probs[gold]` for a single distribution.
    pub fn cross_entropy(&mut self, probs: Var, gold: usize) -> Result<Var> {
        self.nll(probs, &[gold], &[T::one()])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    /// Inverted dropout: identity in eval mode, otherwise zero each element
    /// with probability `p` and scale survivors by `1/(1−p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0,1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let dims = self.dims(x).to_vec();
        let mask: Vec<T> = (0..numel(&dims))
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = self.constant(Tensor::new(dims, mask)?);
        self.mul(x, m)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if numel(self.dims(loss)) != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); numel(&self.nodes[v.0].dims)]);
            f(slot);
        };
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (x, w) = (*x, *w);
                let wd = self.dims(w);
                let (out, inp) = (wd[0], wd[1]);
                let rows = g.len() / out;
                let xv = self.value(x);
                let wv = self.value(w);
                acc(x, &mut |dx| {
                    for r in 0..rows {
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go == T::zero() {
                                continue;
                            }
                            for k in 0..inp {
                                dx[r * inp + k] += go * wv[o * inp + k];
                            }
                        }
                    }
                });
                acc(w, &mut |dw| {
                    for r in 0..rows {
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go == T::zero() {
                                continue;
                            }
                            for k in 0..inp {
                                dw[o * inp + k] += go * xv[r * inp + k];
                            }
                        }
                    }
                });
                if let Some(b) = *b {
                    acc(b, &mut |db| {
                        for r in 0..rows {
                            for o in 0..out {
                                db[o] += g[r * out + o];
                            }
                        }
                    });
                }
            }
            Op::PositionAffine { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let wd = self.dims(w);
                let (rows, out, inp) = (wd[0], wd[1], wd[2]);
                let xv = self.value(x);
                let wv = self.value(w);
                acc(x, &mut |dx| {
                    for r in 0..rows {
                        for o in 0..out {
                            let go = g[r * out + o];
                            let base = (r * out + o) * inp;
                            for k in 0..inp {
                                dx[r * inp + k] += go * wv[base + k];
                            }
                        }
                    }
                });
                acc(w, &mut |dw| {
                    for r in 0..rows {
                        for o in 0..out {
                            let go = g[r * out + o];
                            let base = (r * out + o) * inp;
                            for k in 0..inp {
                                dw[base + k] += go * xv[r * inp + k];
                            }
                        }
                    }
                });
                acc(b, &mut |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::MatMul { a, b, transpose_b } => {
                let (a, b, tb) = (*a, *b, *transpose_b);
                let ad = self.dims(a);
                let (m, k) = (ad[0], ad[1]);
                let n = node.dims[1];
                let av = self.value(a);
                let bv = self.value(b);
                acc(a, &mut |da| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for p in 0..k {
                                let bval = if tb { bv[j * k + p] } else { bv[p * n + j] };
                                da[i * k + p] += gij * bval;
                            }
                        }
                    }
                });
                acc(b, &mut |db| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for p in 0..k {
                                let idx = if tb { j * k + p } else { p * n + j };
                                db[idx] += av[i * k + p] * gij;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.value(a);
                let bv = self.value(b);
                acc(a, &mut |d| {
                    for ((d, &gv), &q) in d.iter_mut().zip(g).zip(bv) {
                        *d += gv * q;
                    }
                });
                acc(b, &mut |d| {
                    for ((d, &gv), &p) in d.iter_mut().zip(g).zip(av) {
                        *d += gv * p;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * c));
            }
            Op::Softmax(x) => {
                let k = *node.dims.last().unwrap_or(&1);
                acc(*x, &mut |d| {
                    for (r, (dr, (yr, gr))) in d.chunks_mut(k).zip(y.chunks(k).zip(g.chunks(k))).enumerate() {
                        let _ = r;
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((dv, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv += p * (q - dot);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |d| {
                    for ((dv, &gv), &v) in d.iter_mut().zip(g).zip(xv) {
                        let f = v.as_f64();
                        *dv += gv * T::lit(gelu_cdf(f) + f * gelu_pdf(f));
                    }
                });
            }
            Op::Sigmoid(x) => {
                acc(*x, &mut |d| {
                    for ((dv, &gv), &s) in d.iter_mut().zip(g).zip(y) {
                        *dv += gv * s * (T::one() - s);
                    }
                });
            }
            Op::Tanh(x) => {
                acc(*x, &mut |d| {
                    for ((dv, &gv), &t) in d.iter_mut().zip(g).zip(y) {
                        *dv += gv * (T::one() - t * t);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (rows, d) = rows_width(&node.dims);
                let xv = self.value(x);
                let gv = self.value(gain);
                let dt = T::lit(d as f64);
                let xhat = |r: usize, i: usize| {
                    let row = &xv[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<T>() / dt;
                    (row[i] - mean) * rstd[r]
                };
                acc(gain, &mut |dg| {
                    for r in 0..rows {
                        for i in 0..d {
                            dg[i] += g[r * d + i] * xhat(r, i);
                        }
                    }
                });
                acc(bias, &mut |db| {
                    for r in 0..rows {
                        for i in 0..d {
                            db[i] += g[r * d + i];
                        }
                    }
                });
                acc(x, &mut |dx| {
                    for r in 0..rows {
                        let xh: Vec<T> = (0..d).map(|i| xhat(r, i)).collect();
                        let dxh: Vec<T> = (0..d).map(|i| g[r * d + i] * gv[i]).collect();
                        let mean_dxh = dxh.iter().copied().sum::<T>() / dt;
                        let mean_dxh_xh = dxh.iter().zip(&xh).map(|(&a, &b)| a * b).sum::<T>() / dt;
                        for i in 0..d {
                            dx[r * d + i] += rstd[r] * (dxh[i] - mean_dxh - xh[i] * mean_dxh_xh);
                        }
                    }
                });
            }
            Op::RepeatRows(v) => {
                let k = node.dims[1];
                acc(*v, &mut |d| {
                    for row in g.chunks(k) {
                        d.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                    }
                });
            }
            Op::ConcatLast(a, b) => {
                let (a, b) = (*a, *b);
                let wa = *self.dims(a).last().unwrap();
                let wb = *self.dims(b).last().unwrap();
                let w = wa + wb;
                acc(a, &mut |d| {
                    for (dr, gr) in d.chunks_mut(wa).zip(g.chunks(w)) {
                        dr.iter_mut().zip(&gr[..wa]).for_each(|(d, &gv)| *d += gv);
                    }
                });
                acc(b, &mut |d| {
                    for (dr, gr) in d.chunks_mut(wb).zip(g.chunks(w)) {
                        dr.iter_mut().zip(&gr[wa..]).for_each(|(d, &gv)| *d += gv);
                    }
                });
            }
            Op::SliceLast { x, start } => {
                let (x, start) = (*x, *start);
                let w = *self.dims(x).last().unwrap();
                let len = *node.dims.last().unwrap();
                acc(x, &mut |d| {
                    for (dr, gr) in d.chunks_mut(w).zip(g.chunks(len)) {
                        dr[start..start + len].iter_mut().zip(gr).for_each(|(d, &gv)| *d += gv);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let w = numel(&node.dims[1..]);
                let off = *start * w;
                acc(*x, &mut |d| {
                    d[off..off + g.len()].iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv));
            }
            Op::StackRows(xs) => {
                let k = node.dims[1];
                for (r, &x) in xs.iter().enumerate() {
                    acc(x, &mut |d| {
                        d.iter_mut().zip(&g[r * k..(r + 1) * k]).for_each(|(d, &gv)| *d += gv)
                    });
                }
            }
            Op::GatherRows { table, ids } => {
                let d = node.dims[1];
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(d, &gv)| *d += gv);
                    }
                });
            }
            Op::Nll { probs, gold, weight } => {
                let probs = *probs;
                let k = *self.dims(probs).last().unwrap_or(&1);
                let pv = self.value(probs);
                let floor = T::lit(PROB_FLOOR);
                acc(probs, &mut |d| {
                    for (r, (&gi, &w)) in gold.iter().zip(weight).enumerate() {
                        let p = pv[r * k + gi];
                        if w != T::zero() && p > floor {
                            d[r * k + gi] -= g[0] * w / p;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
        }
    }
}

/// Result of [`Tape::backward`]: one gradient buffer per reached node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a node, `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.param_vars[id.0].and_then(|v| self.wrt(v))
    }

    /// Per-parameter gradients indexed like the store; untouched parameters are `None`.
    pub fn into_param_grads(mut self) -> Vec<Option<Vec<T>>> {
        self.param_vars
            .iter()
            .map(|pv| pv.and_then(|v| self.grads[v.0].take()))
            .collect()
    }
}
