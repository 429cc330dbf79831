//! Masked-modeling, contrastive and triplet objectives.

use rand::seq::index::sample;
use rand::Rng;

use super::masking::{GeneMask, SlideMask, TextMask};
use crate::error::{Error, Result};
use crate::fusion::{FusedState, Modality};
use crate::model::AlterModel;
use crate::numerics::{Graph, ParamId, Tensor, Var};
use crate::tasks::cross_entropy;

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 100.0;

/// `1/τ` from the log-temperature parameter, with τ clamped to `[TAU_MIN, TAU_MAX]`.
pub fn inverse_temperature(g: &mut Graph<'_>, log_tau: ParamId) -> Var {
    let lt = g.param(log_tau);
    let lt = g.clamp(lt, TAU_MIN.ln(), TAU_MAX.ln());
    let neg = g.scale(lt, -1.0);
    g.exp(neg)
}

/// Symmetric InfoNCE between matched rows of `x` and `y` (`N × d`):
/// rows are L2-normalized, `S = x̂ ŷᵀ / τ`, and the loss is the mean of the
/// row-wise and column-wise cross-entropies against the diagonal.
pub fn clip_pair_loss(g: &mut Graph<'_>, x: Var, y: Var, inv_tau: Var) -> Var {
    let n = g.rows(x);
    assert_eq!(n, g.rows(y), "contrastive pairs must align");
    let xn = g.l2_normalize_rows(x);
    let yn = g.l2_normalize_rows(y);
    let s = g.matmul_nt(xn, yn);
    let s = g.mul_scalar(s, inv_tau);
    let labels: Vec<usize> = (0..n).collect();
    let st = g.transpose(s);
    let a = cross_entropy(g, s, &labels);
    let b = cross_entropy(g, st, &labels);
    let sum = g.add(a, b);
    g.scale(sum, 0.5)
}

/// The three modality pairs in loss order.
pub const CLIP_PAIRS: [(Modality, Modality); 3] =
    [(Modality::Slide, Modality::Genes), (Modality::Genes, Modality::Text), (Modality::Text, Modality::Slide)];

/// Sum of the pairwise contrastive losses, each over the samples holding
/// both modalities. `None` when no sample holds any pair.
pub fn clip_total(g: &mut Graph<'_>, cls: &[[Option<Var>; 3]], inv_tau: Var) -> Option<Var> {
    let mut total: Option<Var> = None;
    for (a, b) in CLIP_PAIRS {
        let pairs: Vec<(Var, Var)> = cls.iter().filter_map(|c| Some((c[a.index()]?, c[b.index()]?))).collect();
        if pairs.is_empty() {
            log::debug!("no sample holds both {a} and {b}; pair skipped");
            continue;
        }
        let xs: Vec<Var> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<Var> = pairs.iter().map(|p| p.1).collect();
        let x = g.concat_rows(&xs);
        let y = g.concat_rows(&ys);
        let l = clip_pair_loss(g, x, y, inv_tau);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    total
}

/// All `(anchor, positive, negative)` index triples with
/// `class[p] == class[a]`, `p != a`, `class[n] != class[a]`; seeded
/// subsample of `max` when there are more.
pub fn mine_triplets(classes: &[usize], max: usize, rng: &mut impl Rng) -> Vec<(usize, usize, usize)> {
    let n = classes.len();
    let mut all = Vec::new();
    for a in 0..n {
        for p in (0..n).filter(|&p| p != a && classes[p] == classes[a]) {
            for m in (0..n).filter(|&m| classes[m] != classes[a]) {
                all.push((a, p, m));
            }
        }
    }
    if all.len() > max {
        let mut keep = sample(rng, all.len(), max).into_vec();
        keep.sort_unstable();
        all = keep.into_iter().map(|i| all[i]).collect();
    }
    all
}

/// Mean hinge `max(‖a − p‖ − ‖a − n‖ + ε, 0)` over `triplets`, rows of `emb`.
pub fn triplet_loss(g: &mut Graph<'_>, emb: Var, triplets: &[(usize, usize, usize)], margin: f64) -> Result<Var> {
    if triplets.is_empty() {
        return Err(Error::input("triplet loss needs at least one triplet"));
    }
    let width = g.cols(emb);
    let pick = |g: &mut Graph<'_>, f: fn(&(usize, usize, usize)) -> usize| {
        let idx: Vec<usize> = triplets.iter().map(f).collect();
        g.gather_rows(emb, &idx)
    };
    let a = pick(g, |t| t.0);
    let p = pick(g, |t| t.1);
    let n = pick(g, |t| t.2);
    let ones = g.constant(Tensor::full(&[width, 1], 1.0));
    let dist = |g: &mut Graph<'_>, u: Var, v: Var| {
        let d = g.sub(u, v);
        let sq = g.square(d);
        let s = g.matmul(sq, ones);
        // The floor keeps the square root differentiable at coincident points.
        let s = g.add_const(s, 1e-24);
        g.sqrt(s)
    };
    let dp = dist(g, a, p);
    let dn = dist(g, a, n);
    let diff = g.sub(dp, dn);
    let shifted = g.add_const(diff, margin);
    let hinge = g.clamp(shifted, 0.0, f64::INFINITY);
    Ok(g.mean(hinge))
}

/// Squared error of the region-mean predictions at masked regions,
/// averaged over regions and feature columns.
pub fn slide_mlm_loss(g: &mut Graph<'_>, model: &AlterModel, fused: &FusedState, mask: &SlideMask) -> Result<Var> {
    let tokens = fused.span_tokens(g, Modality::Slide).ok_or_else(|| Error::input("slide absent from fused state"))?;
    let rows: Vec<usize> = mask.regions.iter().map(|r| r + 1).collect();
    let picked = g.gather_rows(tokens, &rows);
    let pred = model.mlm.slide.forward(g, picked);
    let target = g.constant(mask.targets.clone());
    let d = g.sub(pred, target);
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Cross-entropy of the original bin of each masked gene, read from its
/// pathway token plus a per-gene query embedding.
pub fn gene_mlm_loss(g: &mut Graph<'_>, model: &AlterModel, fused: &FusedState, mask: &GeneMask) -> Result<Var> {
    let tokens = fused.span_tokens(g, Modality::Genes).ok_or_else(|| Error::input("genes absent from fused state"))?;
    let rows: Vec<usize> = mask.genes.iter().map(|&gene| 1 + model.gene_pathway(gene)).collect();
    let pathway = g.gather_rows(tokens, &rows);
    let table = g.param(model.mlm.gene_query);
    let query = g.gather_rows(table, &mask.genes);
    let h = g.add(pathway, query);
    let logits = model.mlm.gene.forward(g, h);
    Ok(cross_entropy(g, logits, &mask.targets))
}

pub fn text_mlm_loss(g: &mut Graph<'_>, model: &AlterModel, fused: &FusedState, mask: &TextMask) -> Result<Var> {
    let tokens = fused.span_tokens(g, Modality::Text).ok_or_else(|| Error::input("text absent from fused state"))?;
    let picked = g.gather_rows(tokens, &mask.positions);
    let logits = model.mlm.text.forward(g, picked);
    Ok(cross_entropy(g, logits, &mask.targets))
}

/// `α·mlm + β·clip + triplet`; absent components count as zero.
pub fn total_loss(g: &mut Graph<'_>, mlm: Option<Var>, clip: Option<Var>, triplet: Option<Var>, alpha: f64, beta: f64) -> Option<Var> {
    let parts: Vec<Var> = [mlm.map(|v| g.scale(v, alpha)), clip.map(|v| g.scale(v, beta)), triplet].into_iter().flatten().collect();
    let mut it = parts.into_iter();
    let first = it.next()?;
    Some(it.fold(first, |acc, v| g.add(acc, v)))
}
