//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Minimum number of coordinates probed per parameter tensor when sampling.
pub const MIN_SAMPLED_COORDS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// `|a − fd| / max(|a|, |fd|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare `analytic` (indexed like `params`, `None` meaning all-zero) against
/// central differences `(f(θ+eps·e) − f(θ−eps·e)) / 2eps`.
///
/// Tensors with more than `max_coords` entries are probed on a fixed random
/// subset of `max(max_coords, MIN_SAMPLED_COORDS)` coordinates.
pub fn finite_diff_check<F>(
    f: F,
    params: &ParamStore<f64>,
    analytic: &[Option<Vec<f64>>],
    eps: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let base = f(params)?;
    if f(params)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }
    let cap = max_coords.max(MIN_SAMPLED_COORDS);
    let mut work = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut report = GradCheckReport::default();
    for id in params.ids() {
        let n = params.get(id).len();
        let coords: Vec<usize> = if n <= cap {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cap).into_vec();
            c.sort_unstable();
            c
        };
        let mut group = GroupCheck {
            name: params.name(id).to_string(),
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            max_abs_analytic: 0.0,
            max_abs_numeric: 0.0,
        };
        for &c in &coords {
            let orig = params.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + eps;
            let up = f(&work)?;
            work.get_mut(id).data_mut()[c] = orig - eps;
            let down = f(&work)?;
            work.get_mut(id).data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[c]);
            group.max_rel_err = group.max_rel_err.max(relative_error(a, numeric));
            group.max_abs_analytic = group.max_abs_analytic.max(a.abs());
            group.max_abs_numeric = group.max_abs_numeric.max(numeric.abs());
        }
        report.groups.push(group);
    }
    Ok(report)
}

/// Build a scalar loss on a fresh tape, differentiate it, and check every
/// parameter of `params` against finite differences of the same builder.
pub fn check_tape_gradients<B>(
    params: &ParamStore<f64>,
    build: B,
    eps: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape)?;
        tape.backward(loss)?.into_param_grads()
    };
    finite_diff_check(
        |p| {
            let mut tape = Tape::new(p);
            let loss = build(&mut tape)?;
            Ok(tape.value(loss)[0])
        },
        params,
        &analytic,
        eps,
        max_coords,
    )
}

/// Names of parameters whose analytic gradient is absent or identically zero.
pub fn zero_gradient_params(params: &ParamStore<f64>, analytic: &[Option<Vec<f64>>]) -> Vec<String> {
    params
        .ids()
        .filter(|id: &ParamId| {
            analytic[id.index()]
                .as_ref()
                .is_none_or(|g| g.iter().all(|&v| v == 0.0))
        })
        .map(|id| params.name(id).to_string())
        .collect()
}
