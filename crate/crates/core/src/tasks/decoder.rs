//! Causal report decoder cross-attending to fused slide tokens.

use crate::encoders::text::{CLS, END};
use crate::error::{Error, Result};
use crate::numerics::nn::{causal_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{Graph, ParamBuilder, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    fn new(pb: &mut ParamBuilder<'_>, width: usize, heads: usize) -> Result<Self> {
        Ok(DecoderLayer {
            ln_self: LayerNorm::new(&mut pb.scope("ln_self"), width),
            self_attn: MultiHeadAttention::new(&mut pb.scope("self_attn"), width, heads, false)?,
            ln_cross: LayerNorm::new(&mut pb.scope("ln_cross"), width),
            cross_attn: MultiHeadAttention::new(&mut pb.scope("cross_attn"), width, heads, false)?,
            ln_ffn: LayerNorm::new(&mut pb.scope("ln_ffn"), width),
            ffn: FeedForward::new(&mut pb.scope("ffn"), width, 4 * width, width, false),
        })
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, memory: Var, causal: &[bool]) -> Var {
        let h = self.ln_self.forward(g, x);
        let a = self.self_attn.forward(g, h, h, h, Some(causal));
        let x = g.add(x, a);
        let h = self.ln_cross.forward(g, x);
        let c = self.cross_attn.forward(g, h, memory, memory, None);
        let x = g.add(x, c);
        let h = self.ln_ffn.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct ReportDecoder {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub ln_memory: LayerNorm,
    pub layers: Vec<DecoderLayer>,
    pub ln_out: LayerNorm,
    pub out: Linear,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl ReportDecoder {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        vocab_size: usize,
        max_len: usize,
        width: usize,
        heads: usize,
        depth: usize,
    ) -> Result<Self> {
        Ok(ReportDecoder {
            token_embedding: pb.uniform_bound("token_embedding", &[vocab_size, width], 1.0),
            position_embedding: pb.uniform_bound("position_embedding", &[max_len, width], 0.1),
            ln_memory: LayerNorm::new(&mut pb.scope("ln_memory"), width),
            layers: (0..depth)
                .map(|i| DecoderLayer::new(&mut pb.scope(&format!("layer{i}")), width, heads))
                .collect::<Result<_>>()?,
            ln_out: LayerNorm::new(&mut pb.scope("ln_out"), width),
            out: Linear::new(&mut pb.scope("out"), width, vocab_size),
            vocab_size,
            max_len,
        })
    }

    /// Next-token logits for every prefix position, `len(inputs) × V`.
    pub fn logits(&self, g: &mut Graph<'_>, memory: Var, inputs: &[usize]) -> Result<Var> {
        let n = inputs.len();
        if n == 0 || n > self.max_len {
            return Err(Error::shape(format!("decoder input of length {n} (max {})", self.max_len)));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::input(format!("token id {bad} outside the vocabulary")));
        }
        let table = g.param(self.token_embedding);
        let tok = g.gather_rows(table, inputs);
        let pos = g.param(self.position_embedding);
        let pos = g.slice_rows(pos, 0, n);
        let mut x = g.add(tok, pos);
        let mem = self.ln_memory.forward(g, memory);
        let causal = causal_mask(n);
        for layer in &self.layers {
            x = layer.forward(g, x, mem, &causal);
        }
        let x = self.ln_out.forward(g, x);
        Ok(self.out.forward(g, x))
    }

    /// Teacher-forced mean cross-entropy of `target` (which should end in END),
    /// fed `[CLS] target[..n-1]`.
    pub fn teacher_forced_loss(&self, g: &mut Graph<'_>, memory: Var, target: &[usize]) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::input("empty report target"));
        }
        let target = &target[..target.len().min(self.max_len)];
        let mut inputs = Vec::with_capacity(target.len());
        inputs.push(CLS);
        inputs.extend_from_slice(&target[..target.len() - 1]);
        let logits = self.logits(g, memory, &inputs)?;
        Ok(super::losses::cross_entropy(g, logits, target))
    }

    /// Greedy decoding of at most `max_len` tokens; END, when produced, is
    /// the last returned token.
    pub fn generate(&self, store: &ParamStore, memory: &Tensor, max_len: usize) -> Result<Vec<usize>> {
        let max_len = max_len.min(self.max_len);
        let mut ids = vec![CLS];
        let mut out = Vec::new();
        while out.len() < max_len && ids.len() <= self.max_len {
            let mut g = Graph::with_params(store);
            let mem = g.constant(memory.clone());
            let logits = self.logits(&mut g, mem, &ids)?;
            let last = g.value(logits).row(ids.len() - 1);
            let next = argmax(last);
            out.push(next);
            if next == END {
                break;
            }
            ids.push(next);
        }
        Ok(out)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
