use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Which parameter coordinates a gradient check perturbs.
#[derive(Debug, Clone, Copy)]
pub struct CoordSample {
    /// At most this many coordinates per parameter tensor; `None` checks all.
    pub per_param: Option<usize>,
    pub seed: u64,
}

impl Default for CoordSample {
    fn default() -> Self {
        Self {
            per_param: Some(8),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Worst relative error of each parameter tensor, in store order.
    pub per_param: Vec<(String, f64)>,
    /// Smallest nonzero `|numeric|` over the checked coordinates, in units of the
    /// finite-difference quantum `ulp(f) / 2eps`. Coordinates near or below
    /// one quantum cannot be resolved by central differences at all.
    pub min_resolution: f64,
}

/// Spacing of `f64` values at `x`.
pub fn ulp(x: f64) -> f64 {
    let a = x.abs();
    if !a.is_finite() {
        return f64::NAN;
    }
    f64::from_bits(a.to_bits() + 1) - a
}

/// Adds uniform noise in `±scale` to every parameter, moving a freshly
/// initialized store (zero biases) off the kinks of ReLU and max.
pub fn jitter(params: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for v in params.get_mut(id).data_mut() {
            *v += rng.random_range(-scale..=scale);
        }
    }
}

/// Relative error used by the checker: `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let v = tape.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::Check(format!("objective is not finite ({v})")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` against central finite differences
/// with step `eps`, in 64-bit precision.
pub fn grad_check<F>(f: F, params: &ParamStore<f64>, eps: f64, coords: CoordSample) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check_where(f, params, eps, coords, |_| true)
}

/// [`grad_check`] restricted to the parameters whose names pass `keep`.
pub fn grad_check_where<F>(
    f: F,
    params: &ParamStore<f64>,
    eps: f64,
    coords: CoordSample,
    keep: impl Fn(&str) -> bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Check(format!("objective is not finite ({value})")));
    }
    let grads = tape.backward(loss, params)?;

    let mut rng = ChaCha8Rng::seed_from_u64(coords.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        per_param: Vec::new(),
        min_resolution: f64::INFINITY,
    };
    for (id, name, tensor) in params.iter() {
        if !keep(name) {
            continue;
        }
        let n = tensor.len();
        let picks: Vec<usize> = match coords.per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut worst_here = 0.0f64;
        for i in picks {
            let orig = tensor.data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let plus = evaluate(&f, &probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let minus = evaluate(&f, &probe)?;
            probe.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let quantum = ulp(plus.abs().max(minus.abs())) / (2.0 * eps);
            if numeric != 0.0 {
                report.min_resolution = report.min_resolution.min(numeric.abs() / quantum);
            }
            let analytic = grads.get(id).data()[i];
            let err = relative_error(analytic, numeric);
            report.coords_checked += 1;
            worst_here = worst_here.max(err);
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                if err >= report.max_rel_error {
                    report.worst_param = name.to_string();
                    report.worst_index = i;
                    report.analytic = analytic;
                    report.numeric = numeric;
                }
            }
        }
        report.per_param.push((name.to_string(), worst_here));
    }
    Ok(report)
}
