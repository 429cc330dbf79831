//! Parameterized building blocks: linear maps, layer norm, attention,
//! feed-forward and pre-norm transformer layers.

use super::graph::{Graph, Var};
use super::params::{ParamBuilder, ParamId};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, fan_in: usize, fan_out: usize) -> Self {
        let weight = pb.uniform("w", &[fan_in, fan_out], fan_in);
        let bias = Some(pb.uniform("b", &[fan_out], fan_in));
        Linear { weight, bias, fan_in, fan_out }
    }

    pub fn without_bias(pb: &mut ParamBuilder<'_>, fan_in: usize, fan_out: usize) -> Self {
        let weight = pb.uniform("w", &[fan_in, fan_out], fan_in);
        Linear { weight, bias: None, fan_in, fan_out }
    }

    /// Zero weights and bias: the layer outputs zeros until trained.
    pub fn zeroed(pb: &mut ParamBuilder<'_>, fan_in: usize, fan_out: usize) -> Self {
        let weight = pb.zeros("w", &[fan_in, fan_out]);
        let bias = Some(pb.zeros("b", &[fan_out]));
        Linear { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, width: usize) -> Self {
        LayerNorm { gamma: pb.ones("gamma", &[width]), beta: pb.zeros("beta", &[width]) }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Exact multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, width: usize, heads: usize, zero_out: bool) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::config(format!("width {width} is not divisible by {heads} heads")));
        }
        let q = Linear::new(&mut pb.scope("q"), width, width);
        let k = Linear::new(&mut pb.scope("k"), width, width);
        let v = Linear::new(&mut pb.scope("v"), width, width);
        let out = if zero_out {
            Linear::zeroed(&mut pb.scope("o"), width, width)
        } else {
            Linear::new(&mut pb.scope("o"), width, width)
        };
        Ok(MultiHeadAttention { q, k, v, out, heads, width })
    }

    /// Attends `query` rows over `key`/`value` rows.
    ///
    /// `allowed`, when given, is a `query_rows × key_rows` visibility map.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        query: Var,
        key: Var,
        value: Var,
        allowed: Option<&[bool]>,
    ) -> Var {
        assert_eq!(g.rows(key), g.rows(value), "key/value length mismatch");
        let head_dim = self.width / self.heads;
        let q = self.q.forward(g, query);
        let q = g.scale(q, 1.0 / (head_dim as f64).sqrt());
        let k = self.k.forward(g, key);
        let v = self.v.forward(g, value);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim),
                    g.slice_cols(k, h * head_dim, head_dim),
                    g.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = g.matmul_nt(qh, kh);
            let p = g.softmax(scores, allowed);
            outs.push(g.matmul(p, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.out.forward(g, merged)
    }
}

/// Two-layer GELU perceptron `width → hidden → width_out`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder<'_>, width: usize, hidden: usize, out: usize, zero_out: bool) -> Self {
        let fc1 = Linear::new(&mut pb.scope("fc1"), width, hidden);
        let fc2 = if zero_out {
            Linear::zeroed(&mut pb.scope("fc2"), hidden, out)
        } else {
            Linear::new(&mut pb.scope("fc2"), hidden, out)
        };
        FeedForward { fc1, fc2 }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm encoder layer: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, width: usize, heads: usize, zero_out: bool) -> Result<Self> {
        Ok(TransformerLayer {
            ln_attn: LayerNorm::new(&mut pb.scope("ln1"), width),
            attn: MultiHeadAttention::new(&mut pb.scope("attn"), width, heads, zero_out)?,
            ln_ffn: LayerNorm::new(&mut pb.scope("ln2"), width),
            ffn: FeedForward::new(&mut pb.scope("ffn"), width, 4 * width, width, zero_out),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, allowed: Option<&[bool]>) -> Var {
        let h = self.ln_attn.forward(g, x);
        let a = self.attn.forward(g, h, h, h, allowed);
        let x = g.add(x, a);
        let h = self.ln_ffn.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.add(x, f)
    }
}

/// Visibility map letting every query see exactly the keys flagged real.
pub fn key_padding_mask(queries: usize, key_real: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(queries * key_real.len());
    for _ in 0..queries {
        m.extend_from_slice(key_real);
    }
    m
}

/// Lower-triangular visibility map for autoregressive decoding.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|i| i % len <= i / len).collect()
}
