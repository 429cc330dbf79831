//! Central-difference gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|autodiff − central| / max(1, |central|)`.
pub fn relative_error(autodiff: f64, central: f64) -> f64 {
    (autodiff - central).abs() / central.abs().max(1.0)
}

/// Checks the tape gradient of a scalar function of one tensor against
/// central differences; returns the max relative error over coordinates.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Var,
{
    let mut g = Graph::new();
    let x = g.variable(point.clone());
    let y = f(&mut g, x);
    let fx = g.value(y).item();
    if !fx.is_finite() {
        return Err(Error::NonFinite("function value at the check point".into()));
    }
    let grads = g.backward(y);
    let analytic = g.grad_tensor(&grads, x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x);
        let v = g.value(y).item();
        if v.is_finite() { Ok(v) } else { Err(Error::NonFinite("function value at a probe point".into())) }
    };
    let mut worst = 0.0f64;
    for k in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[k] += h;
        let mut minus = point.clone();
        minus.data_mut()[k] -= h;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[k], central));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Only parameters whose names start with one of these (all when empty).
    pub prefixes: Vec<String>,
    /// Per-parameter cap on probed coordinates, chosen by seeded sampling.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: DEFAULT_STEP, prefixes: Vec::new(), max_coords_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Gradient check of a scalar loss with respect to stored parameters.
///
/// `loss` builds the forward pass on a fresh graph each time it is called.
pub fn param_grad_check<F>(store: &ParamStore, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let y = loss(&mut g)?;
        let v = g.value(y).item();
        if v.is_finite() { Ok(v) } else { Err(Error::NonFinite("loss at a probe point".into())) }
    };

    let (analytic, fx) = {
        let mut g = Graph::with_params(store);
        let y = loss(&mut g)?;
        let fx = g.value(y).item();
        let grads = g.backward(y);
        (g.param_grads(&grads), fx)
    };
    if !fx.is_finite() {
        return Err(Error::NonFinite("loss at the check point".into()));
    }

    let selected: Vec<ParamId> = store
        .ids()
        .filter(|&id| !store.is_frozen(id))
        .filter(|&id| opts.prefixes.is_empty() || opts.prefixes.iter().any(|p| store.name(id).starts_with(p)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, worst: None };
    for id in selected {
        let n = store.get(id).numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(cap) if cap < n => {
                let mut c = sample(&mut rng, n, cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for k in coords {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + opts.step;
            let fp = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - opts.step;
            let fm = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;
            let central = (fp - fm) / (2.0 * opts.step);
            let auto = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(auto, central);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), k));
                }
            }
        }
    }
    Ok(report)
}
