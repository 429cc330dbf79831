//! Slide encoder and the square-grid region aggregation that compresses its
//! re-embedded patch tokens before fusion.

use crate::error::{Error, Result};
use crate::numerics::nn::{Linear, LayerNorm, TransformerLayer};
use crate::numerics::{Graph, ParamBuilder, ParamId, Tensor, Var};

/// A serialized slide: one feature row per sampled patch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag {
    features: Tensor,
}

impl FeatureBag {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::shape(format!("feature bag must be a matrix, got {:?}", features.shape())));
        }
        if features.rows() == 0 {
            return Err(Error::input("empty feature bag"));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("feature bag".into()));
        }
        Ok(FeatureBag { features })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn n_patches(&self) -> usize {
        self.features.rows()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }
}

/// Tokens laid out row-major on the smallest square grid that holds them.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub side: usize,
    /// `side² × d`, zero on padded cells.
    pub cells: Tensor,
    /// `side²` flags; the first `n_real` are true.
    pub real: Vec<bool>,
}

pub fn grid_side(n: usize) -> usize {
    let mut s = (n as f64).sqrt() as usize;
    while s * s < n {
        s += 1;
    }
    while s > 0 && (s - 1) * (s - 1) >= n {
        s -= 1;
    }
    s
}

pub fn reshape_to_grid(tokens: &Tensor) -> Result<Grid> {
    let n = tokens.rows();
    if n == 0 {
        return Err(Error::input("cannot lay out zero tokens on a grid"));
    }
    let d = tokens.cols();
    let side = grid_side(n);
    let mut data = tokens.data().to_vec();
    data.resize(side * side * d, 0.0);
    let real = (0..side * side).map(|i| i < n).collect();
    Ok(Grid { side, cells: Tensor::new(&[side * side, d], data)?, real })
}

/// Which real tokens each kept region averages.
///
/// Regions tile the grid in `a × b` blocks (edge blocks may be partial),
/// enumerated row-major. Blocks containing only padding are dropped and the
/// list is cut to `⌊n/(ab)⌋`; since every block holds at most `ab` cells,
/// at least that many blocks are nonempty, so `padded` stays 0 in practice.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionLayout {
    pub n_tokens: usize,
    pub side: usize,
    pub a: usize,
    pub b: usize,
    pub groups: Vec<Vec<usize>>,
    /// Trailing zero rows appended to reach the target count.
    pub padded: usize,
}

impl RegionLayout {
    pub fn new(n_tokens: usize, a: usize, b: usize) -> Result<Self> {
        if n_tokens == 0 {
            return Err(Error::input("region layout over zero tokens"));
        }
        if a == 0 || b == 0 {
            return Err(Error::config("region extents must be at least 1"));
        }
        let side = grid_side(n_tokens);
        if a > side || b > side {
            return Err(Error::config(format!("region {a}x{b} exceeds grid side {side}")));
        }
        if a * b > n_tokens {
            return Err(Error::config(format!("region {a}x{b} leaves no token for {n_tokens} patches")));
        }
        let target = n_tokens / (a * b);
        let mut groups = Vec::with_capacity(target);
        'outer: for r0 in (0..side).step_by(a) {
            for c0 in (0..side).step_by(b) {
                let members: Vec<usize> = (r0..(r0 + a).min(side))
                    .flat_map(|r| (c0..(c0 + b).min(side)).map(move |c| r * side + c))
                    .filter(|&cell| cell < n_tokens)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                groups.push(members);
                if groups.len() == target {
                    break 'outer;
                }
            }
        }
        let padded = target - groups.len();
        groups.resize(target, Vec::new());
        Ok(RegionLayout { n_tokens, side, a, b, groups, padded })
    }

    pub fn n_regions(&self) -> usize {
        self.groups.len()
    }

    /// Mean of each region's rows of `x` (`n_tokens × w`), one row per region.
    pub fn region_means(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.n_tokens {
            return Err(Error::shape(format!("{} rows for a layout of {} tokens", x.rows(), self.n_tokens)));
        }
        let w = x.cols();
        let mut out = vec![0.0; self.groups.len() * w];
        for (r, members) in self.groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let dst = &mut out[r * w..(r + 1) * w];
            for &m in members {
                for (d, s) in dst.iter_mut().zip(x.row(m)) {
                    *d += s;
                }
            }
            let inv = 1.0 / members.len() as f64;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        Tensor::new(&[self.groups.len(), w], out)
    }
}

/// Region-aggregated tokens with the CLS row prepended: `(⌊n/ab⌋ + 1) × d`.
pub fn region_aggregate(cls: &Tensor, tokens: &Tensor, a: usize, b: usize) -> Result<Tensor> {
    let layout = RegionLayout::new(tokens.rows(), a, b)?;
    let regions = layout.region_means(tokens)?;
    if cls.numel() != tokens.cols() {
        return Err(Error::shape("CLS width differs from token width"));
    }
    let mut data = cls.data().to_vec();
    data.extend_from_slice(regions.data());
    Tensor::new(&[layout.n_regions() + 1, tokens.cols()], data)
}

/// Graph outputs of the slide encoder for one bag.
#[derive(Clone, Copy, Debug)]
pub struct SlideEncoding {
    /// `1 × d`
    pub cls: Var,
    /// Re-embedded patches, `N_h × d`.
    pub patches: Var,
    /// Region tokens, `⌊N_h/ab⌋ × d`.
    pub regions: Var,
    /// CLS followed by region tokens.
    pub sequence: Var,
}

/// Input projection, learned CLS, and a stack of pre-norm transformer layers
/// without positional encoding.
#[derive(Clone, Debug)]
pub struct SlideEncoder {
    pub input: Linear,
    pub cls: ParamId,
    pub mask_token: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub ln_out: LayerNorm,
    pub width: usize,
    pub patch_dim: usize,
}

impl SlideEncoder {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        patch_dim: usize,
        width: usize,
        heads: usize,
        depth: usize,
        zero_out: bool,
    ) -> Result<Self> {
        let input = Linear::new(&mut pb.scope("input"), patch_dim, width);
        let cls = pb.uniform("cls", &[1, width], width);
        let mask_token = pb.uniform("mask", &[1, width], width);
        let layers = (0..depth)
            .map(|i| TransformerLayer::new(&mut pb.scope(&format!("layer{i}")), width, heads, zero_out))
            .collect::<Result<_>>()?;
        let ln_out = LayerNorm::new(&mut pb.scope("ln_out"), width);
        Ok(SlideEncoder { input, cls, mask_token, layers, ln_out, width, patch_dim })
    }

    /// Encodes `bag`; patches flagged in `masked` have their projected token
    /// replaced by the learned mask vector before the transformer layers.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        bag: &FeatureBag,
        layout: &RegionLayout,
        masked: Option<&[bool]>,
    ) -> Result<SlideEncoding> {
        if bag.width() != self.patch_dim {
            return Err(Error::shape(format!("patch width {} but encoder expects {}", bag.width(), self.patch_dim)));
        }
        let n = bag.n_patches();
        if layout.n_tokens != n {
            return Err(Error::shape("region layout does not match the bag"));
        }
        let x = g.constant(bag.features().clone());
        let mut x = self.input.forward(g, x);
        if let Some(m) = masked {
            if m.len() != n {
                return Err(Error::shape("patch mask length differs from bag size"));
            }
            if m.iter().any(|&b| b) {
                let mask = g.param(self.mask_token);
                let stacked = g.concat_rows(&[x, mask]);
                let idx: Vec<usize> = m.iter().enumerate().map(|(i, &b)| if b { n } else { i }).collect();
                x = g.gather_rows(stacked, &idx);
            }
        }
        let cls = g.param(self.cls);
        let mut h = g.concat_rows(&[cls, x]);
        for layer in &self.layers {
            h = layer.forward(g, h, None);
        }
        let h = self.ln_out.forward(g, h);
        let cls = g.slice_rows(h, 0, 1);
        let patches = g.slice_rows(h, 1, n);
        let regions = g.segment_mean(patches, &layout.groups);
        let sequence = g.concat_rows(&[cls, regions]);
        Ok(SlideEncoding { cls, patches, regions, sequence })
    }
}
