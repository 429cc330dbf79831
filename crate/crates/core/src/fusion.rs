//! Universal sequence transformer: shared self-attention over whatever
//! modalities are present, then one feed-forward expert per modality.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{key_padding_mask, FeedForward, LayerNorm, MultiHeadAttention};
use crate::numerics::{Graph, ParamBuilder, ParamId, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Slide,
    Genes,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Slide, Modality::Genes, Modality::Text];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        ['h', 'g', 't'][self.index()]
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h" | "slide" | "wsi" => Ok(Modality::Slide),
            "g" | "genes" | "omics" => Ok(Modality::Genes),
            "t" | "text" | "report" => Ok(Modality::Text),
            _ => Err(Error::input(format!("unknown modality {s:?}"))),
        }
    }
}

/// Presence flags and the span each present modality occupies in the fused
/// sequence, always ordered slide, genes, text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalitySet {
    spans: [Option<(usize, usize)>; 3],
}

impl ModalitySet {
    pub fn from_lengths(lengths: [Option<usize>; 3]) -> Result<Self> {
        let mut spans = [None; 3];
        let mut at = 0;
        for m in Modality::ALL {
            if let Some(len) = lengths[m.index()] {
                if len == 0 {
                    return Err(Error::input(format!("modality {m} contributes no tokens")));
                }
                spans[m.index()] = Some((at, len));
                at += len;
            }
        }
        if at == 0 {
            return Err(Error::input("no modality present"));
        }
        Ok(ModalitySet { spans })
    }

    pub fn present(&self, m: Modality) -> bool {
        self.spans[m.index()].is_some()
    }

    pub fn modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        Modality::ALL.into_iter().filter(|&m| self.present(m))
    }

    pub fn count(&self) -> usize {
        self.modalities().count()
    }

    pub fn span(&self, m: Modality) -> Option<(usize, usize)> {
        self.spans[m.index()]
    }

    /// The CLS row of a modality is the first row of its span.
    pub fn cls_index(&self, m: Modality) -> Option<usize> {
        self.span(m).map(|(s, _)| s)
    }

    pub fn len(&self) -> usize {
        self.spans.iter().flatten().map(|(_, l)| l).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One modality's contribution to the fused sequence.
#[derive(Clone, Debug)]
pub struct ModalityTokens {
    /// `len × d`, CLS first.
    pub tokens: Var,
    /// Rows that may be attended to (padding excluded).
    pub real: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct FusedState {
    pub tokens: Var,
    pub set: ModalitySet,
    pub real: Vec<bool>,
}

impl FusedState {
    pub fn cls(&self, g: &mut Graph<'_>, m: Modality) -> Option<Var> {
        self.set.cls_index(m).map(|i| g.slice_rows(self.tokens, i, 1))
    }

    /// Rows of one modality's span.
    pub fn span_tokens(&self, g: &mut Graph<'_>, m: Modality) -> Option<Var> {
        self.set.span(m).map(|(s, l)| g.slice_rows(self.tokens, s, l))
    }
}

/// Learned per-modality type vectors added at assembly; optional.
#[derive(Clone, Debug)]
pub struct TypeEmbeddings {
    pub rows: [ParamId; 3],
}

/// Concatenates the present modalities in slide, genes, text order.
pub fn assemble_sequence(
    g: &mut Graph<'_>,
    types: Option<&TypeEmbeddings>,
    parts: [Option<ModalityTokens>; 3],
) -> Result<FusedState> {
    let lengths = [0, 1, 2].map(|i| parts[i].as_ref().map(|p| g.rows(p.tokens)));
    for p in parts.iter().flatten() {
        if p.real.len() != g.rows(p.tokens) {
            return Err(Error::shape("padding mask length differs from token count"));
        }
    }
    let set = ModalitySet::from_lengths(lengths)?;
    let mut pieces = Vec::with_capacity(3);
    let mut real = Vec::with_capacity(set.len());
    for m in Modality::ALL {
        if let Some(p) = &parts[m.index()] {
            let t = match types {
                Some(te) => {
                    let row = g.param(te.rows[m.index()]);
                    g.add_row(p.tokens, row)
                }
                None => p.tokens,
            };
            pieces.push(t);
            real.extend_from_slice(&p.real);
        }
    }
    let tokens = if pieces.len() == 1 { pieces[0] } else { g.concat_rows(&pieces) };
    Ok(FusedState { tokens, set, real })
}

/// Shared pre-norm attention followed by modality-routed experts, each with
/// a residual connection.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_expert: LayerNorm,
    pub experts: [FeedForward; 3],
}

impl FusionBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, width: usize, heads: usize, zero_out: bool) -> Result<Self> {
        let ln_attn = LayerNorm::new(&mut pb.scope("ln_attn"), width);
        let attn = MultiHeadAttention::new(&mut pb.scope("attn"), width, heads, zero_out)?;
        let ln_expert = LayerNorm::new(&mut pb.scope("ln_expert"), width);
        let experts = Modality::ALL.map(|m| {
            FeedForward::new(&mut pb.scope(&format!("expert_{}", m.letter())), width, 4 * width, width, zero_out)
        });
        Ok(FusionBlock { ln_attn, attn, ln_expert, experts })
    }

    pub fn forward(&self, g: &mut Graph<'_>, state: &FusedState) -> FusedState {
        let z = state.tokens;
        let l = state.set.len();
        let h = self.ln_attn.forward(g, z);
        let allowed = if state.real.iter().all(|&r| r) { None } else { Some(key_padding_mask(l, &state.real)) };
        let a = self.attn.forward(g, h, h, h, allowed.as_deref());
        let z1 = g.add(z, a);
        let h = self.ln_expert.forward(g, z1);
        let mut outs = Vec::with_capacity(3);
        for m in state.set.modalities() {
            let (s, len) = state.set.span(m).expect("present modality has a span");
            let part = if state.set.count() == 1 { h } else { g.slice_rows(h, s, len) };
            outs.push(self.experts[m.index()].forward(g, part));
        }
        let e = if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs) };
        let tokens = g.add(z1, e);
        FusedState { tokens, set: state.set.clone(), real: state.real.clone() }
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub types: Option<TypeEmbeddings>,
    pub blocks: Vec<FusionBlock>,
}

impl Fusion {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        width: usize,
        heads: usize,
        n_blocks: usize,
        type_embeddings: bool,
        zero_out: bool,
    ) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::config("fusion needs at least one block"));
        }
        let types = type_embeddings.then(|| TypeEmbeddings {
            rows: Modality::ALL.map(|m| pb.uniform_bound(&format!("type_{}", m.letter()), &[width], 0.1)),
        });
        let blocks = (0..n_blocks)
            .map(|i| FusionBlock::new(&mut pb.scope(&format!("block{i}")), width, heads, zero_out))
            .collect::<Result<_>>()?;
        Ok(Fusion { types, blocks })
    }

    pub fn assemble(&self, g: &mut Graph<'_>, parts: [Option<ModalityTokens>; 3]) -> Result<FusedState> {
        assemble_sequence(g, self.types.as_ref(), parts)
    }

    /// Applies every block in order.
    pub fn fuse(&self, g: &mut Graph<'_>, state: FusedState) -> FusedState {
        self.blocks.iter().fold(state, |s, b| b.forward(g, &s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_follow_prefix_sums() {
        let s = ModalitySet::from_lengths([Some(26), Some(11), Some(512)]).unwrap();
        assert_eq!(s.len(), 549);
        let idx: Vec<_> = Modality::ALL.iter().map(|&m| s.cls_index(m).unwrap()).collect();
        assert_eq!(idx, vec![0, 26, 37]);
        let s = ModalitySet::from_lengths([None, Some(5), Some(7)]).unwrap();
        assert_eq!(s.span(Modality::Genes), Some((0, 5)));
        assert_eq!(s.span(Modality::Text), Some((5, 7)));
        assert!(ModalitySet::from_lengths([None; 3]).is_err());
        let s = ModalitySet::from_lengths([Some(26), None, None]).unwrap();
        assert_eq!((s.len(), s.count()), (26, 1));
    }

    #[test]
    fn modality_names_parse() {
        for m in Modality::ALL {
            assert_eq!(m.letter().to_string().parse::<Modality>().unwrap(), m);
        }
        assert!("x".parse::<Modality>().is_err());
    }
}
