//! Multinomial logistic-regression probe on fixed features.
//!
//! Features are standardized with training statistics; training is
//! full-batch gradient descent with a small L2 penalty, deterministic and
//! independent of the autodiff tape.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `(p + 1) × K`, bias row last.
    weights: Vec<f64>,
    classes: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeOptions {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { iterations: 500, lr: 0.5, l2: 1e-3 }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

impl LinearProbe {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, opts: ProbeOptions) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::input("probe needs one label per nonempty feature row"));
        }
        if y.iter().any(|&c| c >= classes) {
            return Err(Error::input("probe label outside the class range"));
        }
        let p = x[0].len();
        if x.iter().any(|r| r.len() != p || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::input("probe features must be finite rows of equal width"));
        }
        let mean: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let scale: Vec<f64> = (0..p)
            .map(|j| {
                let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                // Constant columns carry nothing; leave them at zero.
                if var > 1e-24 { 1.0 / var.sqrt() } else { 0.0 }
            })
            .collect();
        let mut probe = LinearProbe { mean, scale, weights: vec![0.0; (p + 1) * classes], classes };
        let xs: Vec<Vec<f64>> = x.iter().map(|r| probe.standardize(r)).collect();
        let mut grad = vec![0.0; probe.weights.len()];
        for _ in 0..opts.iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (row, &label) in xs.iter().zip(y) {
                let mut z = probe.logits_std(row);
                softmax_in_place(&mut z);
                z[label] -= 1.0;
                for (j, &v) in row.iter().chain(std::iter::once(&1.0)).enumerate() {
                    for c in 0..classes {
                        grad[j * classes + c] += v * z[c];
                    }
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                *w -= opts.lr * (g / n as f64 + opts.l2 * *w);
            }
        }
        Ok(probe)
    }

    fn standardize(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    fn logits_std(&self, row: &[f64]) -> Vec<f64> {
        let k = self.classes;
        let mut z = self.weights[row.len() * k..].to_vec();
        for (j, &v) in row.iter().enumerate() {
            for c in 0..k {
                z[c] += v * self.weights[j * k + c];
            }
        }
        z
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let z = self.logits_std(&self.standardize(row));
        crate::tasks::decoder::argmax(&z)
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let preds: Vec<usize> = x.iter().map(|r| self.predict(r)).collect();
        crate::metrics::accuracy(&preds, y)
    }
}
