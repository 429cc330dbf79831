//! Patient-level pooling and the per-task output layers.

use crate::error::{Error, Result};
use crate::fusion::{FusedState, Modality};
use crate::numerics::nn::{key_padding_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{Graph, ParamBuilder, Tensor, Var};

/// How the patient embedding is pooled from a fused state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// Each present CLS cross-attends over the other modalities' tokens.
    Multimodal,
    /// The fused CLS tokens alone.
    Cls,
}

impl std::str::FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multimodal" => Ok(PoolKind::Multimodal),
            "cls" => Ok(PoolKind::Cls),
            _ => Err(Error::input(format!("unknown head kind {s:?} (multimodal|cls)"))),
        }
    }
}

/// Re-embeds each present modality's CLS with one shared cross-attention,
/// concatenates the three slots (zeros for absent modalities) and projects
/// `3d → 2d`.
#[derive(Clone, Debug)]
pub struct MultimodalHead {
    pub ln_query: LayerNorm,
    pub ln_context: LayerNorm,
    pub cross: MultiHeadAttention,
    pub proj: Linear,
    pub width: usize,
}

impl MultimodalHead {
    pub fn new(pb: &mut ParamBuilder<'_>, width: usize, heads: usize, zero_out: bool) -> Result<Self> {
        Ok(MultimodalHead {
            ln_query: LayerNorm::new(&mut pb.scope("ln_query"), width),
            ln_context: LayerNorm::new(&mut pb.scope("ln_context"), width),
            cross: MultiHeadAttention::new(&mut pb.scope("cross"), width, heads, zero_out)?,
            proj: Linear::new(&mut pb.scope("proj"), 3 * width, 2 * width),
            width,
        })
    }

    /// Per-slot CLS vectors after (optional) cross-attention re-embedding.
    pub fn reembed(&self, g: &mut Graph<'_>, fused: &FusedState, kind: PoolKind) -> [Option<Var>; 3] {
        let cross = kind == PoolKind::Multimodal && fused.set.count() >= 2;
        Modality::ALL.map(|m| {
            let cls = fused.cls(g, m)?;
            if !cross {
                return Some(cls);
            }
            // Context = every token of every other present modality.
            let mut parts = Vec::new();
            let mut real = Vec::new();
            for o in fused.set.modalities().filter(|&o| o != m) {
                let (s, l) = fused.set.span(o).expect("present");
                parts.push(g.slice_rows(fused.tokens, s, l));
                real.extend_from_slice(&fused.real[s..s + l]);
            }
            let ctx = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
            let q = self.ln_query.forward(g, cls);
            let kv = self.ln_context.forward(g, ctx);
            let allowed = key_padding_mask(1, &real);
            let a = self.cross.forward(g, q, kv, kv, Some(&allowed));
            Some(g.add(cls, a))
        })
    }

    /// Patient embedding, `1 × 2d`.
    pub fn forward(&self, g: &mut Graph<'_>, fused: &FusedState, kind: PoolKind) -> Var {
        let slots = self.reembed(g, fused, kind);
        let parts: Vec<Var> = slots
            .iter()
            .map(|s| match s {
                Some(v) => *v,
                None => g.constant(Tensor::zeros(&[1, self.width])),
            })
            .collect();
        let joined = g.concat_cols(&parts);
        self.proj.forward(g, joined)
    }
}

/// Two-layer GELU perceptron to `classes` logits.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub mlp: FeedForward,
    pub classes: usize,
}

impl MlpHead {
    pub fn new(pb: &mut ParamBuilder<'_>, input: usize, classes: usize) -> Self {
        MlpHead { mlp: FeedForward::new(pb, input, input, classes, false), classes }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        self.mlp.forward(g, x)
    }
}

/// All fine-tuning heads; they share the patient pooling.
#[derive(Clone, Debug)]
pub struct TaskHeads {
    pub pool: MultimodalHead,
    /// Risk score `x̄ θ`, no intercept (it cancels in the partial likelihood).
    pub cox: Linear,
    pub hazard: Linear,
    pub subtype: MlpHead,
    pub mutation: MlpHead,
}

impl TaskHeads {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        width: usize,
        heads: usize,
        n_classes: usize,
        n_time_bins: usize,
        zero_out: bool,
    ) -> Result<Self> {
        Ok(TaskHeads {
            pool: MultimodalHead::new(&mut pb.scope("pool"), width, heads, zero_out)?,
            cox: Linear::without_bias(&mut pb.scope("cox"), 2 * width, 1),
            hazard: Linear::new(&mut pb.scope("hazard"), 2 * width, n_time_bins),
            subtype: MlpHead::new(&mut pb.scope("subtype"), 2 * width, n_classes),
            mutation: MlpHead::new(&mut pb.scope("mutation"), 2 * width, 2),
        })
    }
}
