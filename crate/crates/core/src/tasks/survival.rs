//! Discrete-time hazard likelihood and the Cox partial likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::sigmoid;
use crate::numerics::{Graph, Tensor, Var};

pub const LOGIT_CLAMP: f64 = 30.0;

/// `censored == true` means the event was not observed (last follow-up).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    pub time: f64,
    pub censored: bool,
}

/// Interior cut points of the time axis; bin `j` covers `(edge[j-1], edge[j]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeBins {
    pub edges: Vec<f64>,
}

impl TimeBins {
    pub fn n_bins(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn bin(&self, t: f64) -> usize {
        self.edges.iter().filter(|&&e| t > e).count()
    }
}

/// Cut points at the `k/n` quantiles of the uncensored times.
pub fn bin_times(labels: &[SurvivalLabel], n: usize) -> Result<TimeBins> {
    if n == 0 {
        return Err(Error::config("need at least one time bin"));
    }
    let mut observed: Vec<f64> = labels.iter().filter(|l| !l.censored).map(|l| l.time).collect();
    if observed.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::input("survival times must be finite and nonnegative"));
    }
    observed.sort_by(f64::total_cmp);
    let mut distinct = observed.clone();
    distinct.dedup();
    if distinct.len() < n {
        return Err(Error::input(format!("{} distinct observed times for {n} bins", distinct.len())));
    }
    let m = observed.len();
    let edges = (1..n).map(|k| observed[(k * m).div_ceil(n) - 1]).collect();
    Ok(TimeBins { edges })
}

/// Per-bin hazards `σ(clamp(logit))`.
pub fn hazards(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&x| sigmoid(x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))).collect()
}

/// `S(j) = Π_{k≤j} (1 − hazard_k)`.
pub fn survival_curve(logits: &[f64]) -> Vec<f64> {
    let mut s = 1.0;
    hazards(logits)
        .into_iter()
        .map(|h| {
            s *= 1.0 - h;
            s
        })
        .collect()
}

/// Expected-survival risk score: higher means earlier predicted event.
pub fn hazard_risk(logits: &[f64]) -> f64 {
    -survival_curve(logits).iter().sum::<f64>()
}

/// Mean over patients of the negated log-likelihood:
/// censored `−log S(y)`, uncensored `−log S(y−1) − log hazard(y)`.
///
/// Written with `−log σ(x) = softplus(−x)` and `−log(1 − σ(x)) = softplus(x)`
/// on clamped logits, so every term is finite.
pub fn nll_survival_loss(g: &mut Graph<'_>, logits: Var, bins: &[usize], censored: &[bool]) -> Result<Var> {
    let (n, k) = (g.rows(logits), g.cols(logits));
    if bins.len() != n || censored.len() != n || n == 0 {
        return Err(Error::shape("one bin and censorship flag per prediction row"));
    }
    if let Some(&b) = bins.iter().find(|&&b| b >= k) {
        return Err(Error::input(format!("time bin {b} outside {k} bins")));
    }
    let mut survive = vec![0.0; n * k];
    let mut event = vec![0.0; n * k];
    for i in 0..n {
        let y = bins[i];
        let upto = if censored[i] { y + 1 } else { y };
        survive[i * k..i * k + upto].iter_mut().for_each(|w| *w = 1.0);
        if !censored[i] {
            event[i * k + y] = 1.0;
        }
    }
    let x = g.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
    let sp = g.softplus(x);
    let neg = g.scale(x, -1.0);
    let spn = g.softplus(neg);
    let ws = g.constant(Tensor::new(&[n, k], survive)?);
    let we = g.constant(Tensor::new(&[n, k], event)?);
    let a = g.mul(sp, ws);
    let b = g.mul(spn, we);
    let t = g.add(a, b);
    let s = g.sum(t);
    Ok(g.scale(s, 1.0 / n as f64))
}

fn risk_sets(labels: &[SurvivalLabel]) -> Vec<(usize, Vec<usize>)> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.censored)
        .map(|(i, li)| (i, (0..labels.len()).filter(|&j| labels[j].time >= li.time).collect()))
        .collect()
}

/// Negative Cox partial log-likelihood of risk scores `risk` (`N × 1` or
/// `N`), averaged over uncensored patients. Risk sets hold every patient
/// whose time is at least the event time (ties included).
pub fn cox_loss(g: &mut Graph<'_>, risk: Var, labels: &[SurvivalLabel]) -> Result<Var> {
    let n = g.value(risk).numel();
    if labels.len() != n {
        return Err(Error::shape("one survival label per risk score"));
    }
    let sets = risk_sets(labels);
    if sets.is_empty() {
        return Err(Error::input("Cox loss needs at least one uncensored patient"));
    }
    let r = g.reshape(risk, &[n, 1]);
    let events: Vec<usize> = sets.iter().map(|(i, _)| *i).collect();
    let picked = g.gather_rows(r, &events);
    let mut total = g.sum(picked);
    for (_, set) in &sets {
        let members = g.gather_rows(r, set);
        let lse = g.logsumexp(members);
        total = g.sub(total, lse);
    }
    Ok(g.scale(total, -1.0 / sets.len() as f64))
}

/// Plain evaluation of [`cox_loss`].
pub fn cox_loss_value(scores: &[f64], labels: &[SurvivalLabel]) -> Result<f64> {
    let mut g = Graph::new();
    let r = g.constant(Tensor::vector(scores.to_vec()));
    let l = cox_loss(&mut g, r, labels)?;
    Ok(g.value(l).item())
}

/// Closed-form gradient of the mean-reduced Cox loss with respect to the
/// patient embeddings `x` (`N × p`) for scores `xθ`:
///
/// `∂/∂x_k = −(1/|U|) [δ_k θ − Σ_{i ∈ U, k ∈ R_i} θ e^{r_k} / Σ_{j ∈ R_i} e^{r_j}]`.
pub fn cox_closed_form_gradient(x: &Tensor, theta: &[f64], labels: &[SurvivalLabel]) -> Result<Tensor> {
    let (n, p) = (x.rows(), x.cols());
    if theta.len() != p || labels.len() != n {
        return Err(Error::shape("embedding, θ and labels disagree"));
    }
    let r: Vec<f64> = (0..n).map(|i| x.row(i).iter().zip(theta).map(|(a, b)| a * b).sum()).collect();
    let sets = risk_sets(labels);
    if sets.is_empty() {
        return Err(Error::input("Cox gradient needs at least one uncensored patient"));
    }
    // coef[k] = δ_k − Σ_{i: k ∈ R_i} softmax_{R_i}(r)_k
    let mut coef = vec![0.0; n];
    for (i, set) in &sets {
        coef[*i] += 1.0;
        let m = set.iter().map(|&j| r[j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = set.iter().map(|&j| (r[j] - m).exp()).sum();
        for &k in set {
            coef[k] -= (r[k] - m).exp() / z;
        }
    }
    let scale = -1.0 / sets.len() as f64;
    let data = (0..n).flat_map(|k| theta.iter().map(|t| scale * coef[k] * t).collect::<Vec<_>>()).collect::<Vec<_>>();
    Tensor::new(&[n, p], data)
}

/// Max absolute deviation between the tape gradient of [`cox_loss`] with
/// respect to `x` and [`cox_closed_form_gradient`].
pub fn cox_gradient_check(x: &Tensor, theta: &[f64], labels: &[SurvivalLabel]) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let th = g.constant(Tensor::new(&[theta.len(), 1], theta.to_vec())?);
    let risk = g.matmul(xv, th);
    let loss = cox_loss(&mut g, risk, labels)?;
    let grads = g.backward(loss);
    let auto = g.grad_tensor(&grads, xv);
    let closed = cox_closed_form_gradient(x, theta, labels)?;
    Ok(auto.max_abs_diff(&closed))
}
