//! Tensor-level entry points for the primitives, outside any tape.

use super::graph::Graph;
use super::nn::MultiHeadAttention;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Softmax along `axis`, max-shifted for overflow safety.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len().max(1) {
        return Err(Error::shape(format!("axis {axis} out of range for {:?}", shape)));
    }
    let extent = shape.get(axis).copied().unwrap_or(1);
    if extent == 0 {
        return Err(Error::shape("softmax over an empty axis"));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let inner: usize = shape.iter().skip(axis + 1).product();
    let outer: usize = shape.iter().take(axis).product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * extent * inner + k * inner + i;
            let max = (0..extent).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..extent {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..extent {
                out[at(k)] /= sum;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Row-wise layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if x.cols() == 0 {
        return Err(Error::shape("layer_norm over an empty axis"));
    }
    if gamma.numel() != x.cols() || beta.numel() != x.cols() {
        return Err(Error::shape("layer_norm affine width mismatch"));
    }
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let y = g.layer_norm(xv, gv, bv, eps);
    Ok(g.value(y).clone())
}

/// Multi-head attention of `q` rows over `k`/`v` rows with the projections in `attn`.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    attn: &MultiHeadAttention,
    store: &ParamStore,
) -> Result<Tensor> {
    for t in [q, k, v] {
        if t.shape().len() != 2 || t.cols() != attn.width {
            return Err(Error::shape(format!(
                "attention input {:?} does not match width {}",
                t.shape(),
                attn.width
            )));
        }
    }
    if k.rows() != v.rows() {
        return Err(Error::shape("key and value sequence lengths differ"));
    }
    let mut g = Graph::with_params(store);
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let y = attn.forward(&mut g, qv, kv, vv, None);
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::ParamBuilder;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        let y = softmax(&Tensor::vector(vec![0.0, 0.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&Tensor::vector(vec![1000.0, 0.0]), 0).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert!(y.data()[1] < 1e-300 && y.is_finite());
        let y = softmax(&Tensor::vector(vec![2f64.ln(), 0.0]), 0).unwrap();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_errors() {
        assert!(softmax(&Tensor::zeros(&[2, 0]), 1).is_err());
        assert!(softmax(&Tensor::zeros(&[2, 3]), 2).is_err());
        assert!(softmax(&Tensor::vector(vec![f64::NAN]), 0).is_err());
    }

    #[test]
    fn softmax_first_axis_of_matrix() {
        let x = Tensor::matrix(2, 2, vec![0.0, 5.0, 0.0, 1.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] + y.data()[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::vector(vec![1.0; 3]);
        let zeros = Tensor::zeros(&[3]);
        let y = layer_norm(&Tensor::matrix(1, 3, vec![4.0; 3]).unwrap(), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0; 3]);
        let (one2, zero2) = (Tensor::vector(vec![1.0; 2]), Tensor::zeros(&[2]));
        let y = layer_norm(&Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap(), &one2, &zero2, 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);
    }

    fn attention(width: usize, heads: usize, seed: u64) -> (MultiHeadAttention, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let attn = MultiHeadAttention::new(&mut pb, width, heads, false).unwrap();
        (attn, store)
    }

    fn project(x: &Tensor, lin: &crate::numerics::nn::Linear, store: &ParamStore) -> Tensor {
        let mut y = x.matmul(store.get(lin.weight)).unwrap();
        if let Some(b) = lin.bias {
            let b = store.get(b).data().to_vec();
            for r in 0..y.rows() {
                for c in 0..y.cols() {
                    y.data_mut()[r * b.len() + c] += b[c];
                }
            }
        }
        y
    }

    #[test]
    fn attention_rejects_indivisible_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        assert!(matches!(MultiHeadAttention::new(&mut pb, 6, 4, false), Err(Error::Config(_))));
    }

    #[test]
    fn single_token_attention_is_projected_value() {
        let (attn, store) = attention(8, 2, 1);
        let x = Tensor::matrix(1, 8, (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
        let y = multi_head_attention(&x, &x, &x, &attn, &store).unwrap();
        let expect = project(&project(&x, &attn.v, &store), &attn.out, &store);
        assert!(y.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn equal_scores_average_values() {
        // Identical keys give every query a uniform softmax.
        let (attn, store) = attention(4, 2, 2);
        let q = Tensor::matrix(2, 4, vec![0.3, -1.0, 0.2, 0.5, 1.0, 1.0, -2.0, 0.0]).unwrap();
        let k = Tensor::matrix(3, 4, [0.5, 0.1, -0.4, 0.9].repeat(3)).unwrap();
        let v = Tensor::matrix(3, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.5, 0.5]).unwrap();
        let y = multi_head_attention(&q, &k, &v, &attn, &store).unwrap();
        let vp = project(&v, &attn.v, &store);
        let mean: Vec<f64> = (0..4).map(|c| (0..3).map(|r| vp.data()[r * 4 + c]).sum::<f64>() / 3.0).collect();
        let expect = project(&Tensor::matrix(1, 4, mean).unwrap(), &attn.out, &store);
        for r in 0..2 {
            for c in 0..4 {
                assert!((y.data()[r * 4 + c] - expect.data()[c]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let y = softmax(&Tensor::matrix(3, 4, xs).unwrap(), 1).unwrap();
            for r in 0..3 {
                prop_assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn layer_norm_shift_invariant(xs in proptest::collection::vec(-3.0f64..3.0, 6), c in -5.0f64..5.0) {
            let ones = Tensor::vector(vec![1.0; 6]);
            let zeros = Tensor::zeros(&[6]);
            let x = Tensor::matrix(1, 6, xs).unwrap();
            let a = layer_norm(&x, &ones, &zeros, 1e-5).unwrap();
            let b = layer_norm(&x.map(|v| v + c), &ones, &zeros, 1e-5).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
            let m: f64 = a.data().iter().sum::<f64>() / 6.0;
            prop_assert!(m.abs() < 1e-12);
        }

        #[test]
        fn attention_rows_in_value_hull(seed in 0u64..1000, nk in 1usize..6) {
            let (attn, store) = attention(8, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            use rand::Rng;
            let mk = |rng: &mut ChaCha8Rng, n: usize| {
                Tensor::matrix(n, 8, (0..n * 8).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
            };
            let (q, kv) = (mk(&mut rng, 3), mk(&mut rng, nk));
            let mut g = Graph::with_params(&store);
            let (qv, kvv) = (g.constant(q), g.constant(kv.clone()));
            let y = attn.forward(&mut g, qv, kvv, kvv, None);
            prop_assert_eq!(g.shape(y), &[3, 8]);
            // The hull property holds before the output projection, so the
            // per-head mixture is recomputed from the projections.
            let vp = project(&kv, &attn.v, &store);
            let qp = project(&g.value(qv).clone(), &attn.q, &store);
            let kp = project(&kv, &attn.k, &store);
            let hd = 2;
            for h in 0..4 {
                for r in 0..3 {
                    let scores: Vec<f64> = (0..nk)
                        .map(|j| (0..hd).map(|c| qp.data()[r * 8 + h * hd + c] * kp.data()[j * 8 + h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                        .collect();
                    let p = softmax(&Tensor::vector(scores), 0).unwrap();
                    for c in 0..hd {
                        let col: Vec<f64> = (0..nk).map(|j| vp.data()[j * 8 + h * hd + c]).collect();
                        let mix: f64 = (0..nk).map(|j| p.data()[j] * col[j]).sum();
                        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        prop_assert!(mix >= lo - 1e-12 && mix <= hi + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn attention_key_permutation_invariant(seed in 0u64..1000) {
            let (attn, store) = attention(8, 2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::Rng;
            let q = Tensor::matrix(2, 8, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let kv = Tensor::matrix(4, 8, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let perm = [2usize, 0, 3, 1];
            let kvp = Tensor::from_rows(&perm.iter().map(|&i| kv.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let a = multi_head_attention(&q, &kv, &kv, &attn, &store).unwrap();
            let b = multi_head_attention(&q, &kvp, &kvp, &attn, &store).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }
}
