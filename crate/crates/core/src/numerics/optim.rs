use super::graph::ParamGrads;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global max-norm clipping; off by default.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: None }
    }
}

/// Adam moments aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState { config, step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update.
///
/// Parameters without a gradient this step (unused or frozen) are left
/// untouched, moments included. Any non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step(store: &mut ParamStore, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() || grads.len() != store.len() {
        return Err(Error::shape("optimizer state does not match the parameter store"));
    }
    for (id, g) in grads.iter() {
        if g.shape() != store.get(id).shape() {
            return Err(Error::shape(format!("gradient shape mismatch for {}", store.name(id))));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
        }
    }
    let clip = match state.config.max_grad_norm {
        Some(max) => {
            let norm = grads.global_norm();
            if norm > max { max / (norm + 1e-6) } else { 1.0 }
        }
        None => 1.0,
    };
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps, .. } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (id, g) in grads.iter() {
        if store.is_frozen(id) {
            continue;
        }
        let i = id.index();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = store.get_mut(id).data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k] * clip;
            m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
            v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;

    fn single(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(x)).unwrap();
        s
    }

    fn grad_of_square(store: &ParamStore) -> ParamGrads {
        let mut g = Graph::with_params(store);
        let x = g.param(store.id("x").unwrap());
        let y = g.square(x);
        let gr = g.backward(y);
        g.param_grads(&gr)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = single(1.5);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut gr = ParamGrads::empty(1);
        gr.set(s.id("x").unwrap(), Tensor::scalar(0.0));
        adam_step(&mut s, &gr, &mut st).unwrap();
        assert_eq!(s.get(s.id("x").unwrap()).item(), 1.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = single(0.0);
        let cfg = AdamConfig { lr: 0.01, eps: 0.0, ..AdamConfig::default() };
        let mut st = AdamState::new(&s, cfg);
        let mut gr = ParamGrads::empty(1);
        gr.set(s.id("x").unwrap(), Tensor::scalar(-3.7));
        adam_step(&mut s, &gr, &mut st).unwrap();
        assert!((s.get(s.id("x").unwrap()).item() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn two_steps_on_square_match_hand_recursion() {
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut s = single(1.0);
        let mut st = AdamState::new(&s, AdamConfig { lr, ..AdamConfig::default() });
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let gr = grad_of_square(&s);
            adam_step(&mut s, &gr, &mut st).unwrap();
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            assert!((s.get(s.id("x").unwrap()).item() - x).abs() < 1e-15, "step {t}");
        }
        // x1 = 0.9 exactly up to eps; x2 follows from the recursion above.
        assert!((x - 0.8).abs() < 1e-3);
    }

    #[test]
    fn non_finite_gradient_fails_before_update() {
        let mut s = single(1.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut gr = ParamGrads::empty(1);
        gr.set(s.id("x").unwrap(), Tensor::scalar(f64::NAN));
        assert!(matches!(adam_step(&mut s, &gr, &mut st), Err(Error::NonFinite(_))));
        assert_eq!(st.step, 0);
        assert_eq!(s.get(s.id("x").unwrap()).item(), 1.0);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut s = single(1.0);
        let id = s.id("x").unwrap();
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut gr = ParamGrads::empty(1);
        gr.set(id, Tensor::scalar(1.0));
        s.set_frozen(id, true);
        adam_step(&mut s, &gr, &mut st).unwrap();
        assert_eq!(s.get(id).item(), 1.0);
        assert_eq!(st.m[0].item(), 0.0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = single(0.0);
        let cfg = AdamConfig { max_grad_norm: Some(1.0), ..AdamConfig::default() };
        let mut st = AdamState::new(&s, cfg);
        let mut gr = ParamGrads::empty(1);
        gr.set(s.id("x").unwrap(), Tensor::scalar(100.0));
        adam_step(&mut s, &gr, &mut st).unwrap();
        assert!(st.m[0].item() < 0.1 + 1e-12);
    }
}
