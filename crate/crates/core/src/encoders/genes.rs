//! Gene-expression discretization, the gene encoder, and pathway pooling.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::nn::{LayerNorm, TransformerLayer};
use crate::numerics::{Graph, ParamBuilder, ParamId, Var};

pub const DEFAULT_BINS: usize = 7;

/// Disjoint gene groups; genes may belong to no group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathwayPartition {
    n_genes: usize,
    groups: Vec<Vec<usize>>,
}

impl PathwayPartition {
    pub fn new(n_genes: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut owner = vec![false; n_genes];
        for (p, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::input(format!("pathway {p} has no genes")));
            }
            for &gene in members {
                if gene >= n_genes {
                    return Err(Error::input(format!("pathway {p} names gene {gene} of {n_genes}")));
                }
                if std::mem::replace(&mut owner[gene], true) {
                    return Err(Error::input(format!("gene {gene} appears in more than one pathway")));
                }
            }
        }
        Ok(PathwayPartition { n_genes, groups })
    }

    /// Consecutive blocks of `size` genes; the last block may be shorter.
    pub fn contiguous(n_genes: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::config("pathway size must be positive"));
        }
        let groups = (0..n_genes).step_by(size).map(|s| (s..(s + size).min(n_genes)).collect()).collect();
        PathwayPartition::new(n_genes, groups)
    }

    pub fn n_genes(&self) -> usize {
        self.n_genes
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Groups used for pooling: the declared pathways, plus one trailing
    /// group collecting every gene outside them (when any is).
    pub fn pooling_groups(&self) -> Vec<Vec<usize>> {
        let mut owned = vec![false; self.n_genes];
        for &g in self.groups.iter().flatten() {
            owned[g] = true;
        }
        let rest: Vec<usize> = (0..self.n_genes).filter(|&g| !owned[g]).collect();
        let mut out = self.groups.clone();
        if !rest.is_empty() {
            out.push(rest);
        }
        out
    }

    /// Pooling group index of every gene.
    pub fn gene_to_group(&self) -> Vec<usize> {
        let mut map = vec![0; self.n_genes];
        for (p, members) in self.pooling_groups().iter().enumerate() {
            for &g in members {
                map[g] = p;
            }
        }
        map
    }

    /// One line per pathway, whitespace-separated gene indices.
    pub fn parse(text: &str, n_genes: usize) -> Result<Self> {
        let groups = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.split_whitespace()
                    .map(|t| t.parse::<usize>().map_err(|_| Error::input(format!("bad gene index {t:?}"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        PathwayPartition::new(n_genes, groups)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let line: Vec<String> = g.iter().map(usize::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn load(path: impl AsRef<Path>, n_genes: usize) -> Result<Self> {
        PathwayPartition::parse(&fs::read_to_string(path)?, n_genes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Quantile binning of expression levels fitted on a cohort.
///
/// Zero maps to bin 0. Nonzero values map to `1 + #{edges ≤ v}` where the
/// `bins − 2` edges are evenly spaced quantiles of the fitted nonzero values.
/// A cohort without spread has no edges and maps everything to bin 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionBinner {
    n_bins: usize,
    edges: Vec<f64>,
}

impl ExpressionBinner {
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>, n_bins: usize) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::config("expression binning needs at least 2 bins"));
        }
        let mut nz: Vec<f64> = Vec::new();
        for &v in values {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::input(format!("expression value {v} is not a finite nonnegative number")));
            }
            if v > 0.0 {
                nz.push(v);
            }
        }
        nz.sort_by(f64::total_cmp);
        let spread = nz.first().zip(nz.last()).is_some_and(|(lo, hi)| hi > lo);
        let edges = if spread {
            let levels = n_bins - 1;
            (1..levels).map(|k| nz[(k * nz.len() / levels).min(nz.len() - 1)]).collect()
        } else {
            Vec::new()
        };
        Ok(ExpressionBinner { n_bins, edges })
    }

    pub fn from_edges(n_bins: usize, edges: Vec<f64>) -> Result<Self> {
        if n_bins < 2 || (!edges.is_empty() && edges.len() != n_bins - 2) {
            return Err(Error::config("edge count does not match bin count"));
        }
        if edges.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("bin edges must be nondecreasing"));
        }
        Ok(ExpressionBinner { n_bins, edges })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn bin(&self, v: f64) -> usize {
        if self.edges.is_empty() || v <= 0.0 {
            return 0;
        }
        1 + self.edges.iter().take_while(|&&e| e <= v).count()
    }

    pub fn bin_all(&self, values: &[f64]) -> Vec<usize> {
        values.iter().map(|&v| self.bin(v)).collect()
    }
}

/// Bins `values` against quantile edges fitted on `values` themselves.
pub fn discretize_expression(values: &[f64], n_bins: usize) -> Result<Vec<usize>> {
    Ok(ExpressionBinner::fit(values, n_bins)?.bin_all(values))
}

#[derive(Clone, Copy, Debug)]
pub struct GeneEncoding {
    pub cls: Var,
    /// Per-gene tokens, `N_g × d`.
    pub genes: Var,
    /// Pathway tokens, `N_p × d` (catch-all group included).
    pub pathways: Var,
    /// CLS followed by pathway tokens.
    pub sequence: Var,
}

/// Gene-identity plus bin embeddings, learned CLS, transformer stack.
/// Gene order carries no positional signal beyond the identity embedding.
#[derive(Clone, Debug)]
pub struct GeneEncoder {
    pub gene_embedding: ParamId,
    /// `(n_bins + 1) × d`; the last row embeds a masked value.
    pub bin_embedding: ParamId,
    pub cls: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub ln_out: LayerNorm,
    pub n_genes: usize,
    pub n_bins: usize,
    pub width: usize,
}

impl GeneEncoder {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        n_genes: usize,
        n_bins: usize,
        width: usize,
        heads: usize,
        depth: usize,
        zero_out: bool,
    ) -> Result<Self> {
        if n_genes == 0 {
            return Err(Error::config("gene encoder needs at least one gene"));
        }
        let gene_embedding = pb.uniform_bound("gene_embedding", &[n_genes, width], 1.0);
        let bin_embedding = pb.uniform_bound("bin_embedding", &[n_bins + 1, width], 1.0);
        let cls = pb.uniform("cls", &[1, width], width);
        let layers = (0..depth)
            .map(|i| TransformerLayer::new(&mut pb.scope(&format!("layer{i}")), width, heads, zero_out))
            .collect::<Result<_>>()?;
        let ln_out = LayerNorm::new(&mut pb.scope("ln_out"), width);
        Ok(GeneEncoder { gene_embedding, bin_embedding, cls, layers, ln_out, n_genes, n_bins, width })
    }

    pub fn mask_bin(&self) -> usize {
        self.n_bins
    }

    /// `bins[i]` is gene `i`'s bin id, or [`Self::mask_bin`] when masked.
    pub fn forward(&self, g: &mut Graph<'_>, bins: &[usize], pooling: &[Vec<usize>]) -> Result<GeneEncoding> {
        if bins.len() != self.n_genes {
            return Err(Error::shape(format!("{} expression values for {} genes", bins.len(), self.n_genes)));
        }
        if let Some(&b) = bins.iter().find(|&&b| b > self.n_bins) {
            return Err(Error::input(format!("bin id {b} out of range")));
        }
        if pooling.is_empty() {
            return Err(Error::input("no pathways to pool genes into"));
        }
        let ids = g.param(self.gene_embedding);
        let table = g.param(self.bin_embedding);
        let vals = g.gather_rows(table, bins);
        let x = g.add(ids, vals);
        let cls = g.param(self.cls);
        let mut h = g.concat_rows(&[cls, x]);
        for layer in &self.layers {
            h = layer.forward(g, h, None);
        }
        let h = self.ln_out.forward(g, h);
        let cls = g.slice_rows(h, 0, 1);
        let genes = g.slice_rows(h, 1, self.n_genes);
        let pathways = g.segment_mean(genes, pooling);
        let sequence = g.concat_rows(&[cls, pathways]);
        Ok(GeneEncoding { cls, genes, pathways, sequence })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_zero_and_flat_cohorts_map_to_zero() {
        assert_eq!(discretize_expression(&[0.0; 5], 7).unwrap(), vec![0; 5]);
        assert_eq!(discretize_expression(&[2.5; 5], 7).unwrap(), vec![0; 5]);
    }

    #[test]
    fn cohort_maximum_lands_in_top_bin() {
        let v: Vec<f64> = (0..50).map(|i| i as f64 * 0.37).collect();
        let b = discretize_expression(&v, 7).unwrap();
        assert_eq!(b[49], 6);
        assert_eq!(b[0], 0);
        assert!(b[1] >= 1);
    }

    #[test]
    fn partition_validation() {
        assert!(PathwayPartition::new(4, vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(PathwayPartition::new(4, vec![vec![0, 4]]).is_err());
        assert!(PathwayPartition::new(4, vec![vec![]]).is_err());
        let p = PathwayPartition::new(5, vec![vec![3, 1]]).unwrap();
        assert_eq!(p.pooling_groups(), vec![vec![3, 1], vec![0, 2, 4]]);
        assert_eq!(p.gene_to_group(), vec![1, 0, 1, 0, 1]);
        let none = PathwayPartition::new(3, vec![]).unwrap();
        assert_eq!(none.pooling_groups(), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn partition_text_round_trip() {
        let p = PathwayPartition::contiguous(10, 4).unwrap();
        assert_eq!(p.groups().len(), 3);
        let back = PathwayPartition::parse(&p.to_text(), 10).unwrap();
        assert_eq!(back, p);
        assert!(PathwayPartition::parse("0 1\nx\n", 3).is_err());
    }

    proptest! {
        #[test]
        fn binning_is_monotone(vals in proptest::collection::vec(0.0f64..10.0, 1..80)) {
            let binner = ExpressionBinner::fit(&vals, 7).unwrap();
            let mut sorted = vals.clone();
            sorted.sort_by(f64::total_cmp);
            let bins = binner.bin_all(&sorted);
            prop_assert!(bins.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(bins.iter().all(|&b| b < 7));
        }
    }
}
