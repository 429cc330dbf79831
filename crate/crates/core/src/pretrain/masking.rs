//! Mask plans for the three masked-modeling variants.

use rand::seq::index::sample;
use rand::Rng;

use crate::encoders::text::{TokenSequence, CLS, MASK, N_SPECIAL};
use crate::encoders::{FeatureBag, RegionLayout};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `⌈ratio·n⌉`, at least 1 and at most `n`.
pub fn mask_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).ceil() as usize).clamp(1, n)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("mask ratio {ratio} outside (0, 1]")))
    }
}

fn choose(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v = sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideMask {
    /// Masked region indices (sorted).
    pub regions: Vec<usize>,
    /// Per-patch flag: the patch's token is replaced by the mask vector.
    pub patch_mask: Vec<bool>,
    /// Mean original feature of each masked region, `|regions| × d_w`.
    pub targets: Tensor,
}

/// Masks `⌈ratio·R⌉` of the layout's nonempty regions.
pub fn mask_wsi(bag: &FeatureBag, layout: &RegionLayout, ratio: f64, rng: &mut impl Rng) -> Result<SlideMask> {
    check_ratio(ratio)?;
    let candidates: Vec<usize> = (0..layout.n_regions()).filter(|&r| !layout.groups[r].is_empty()).collect();
    if candidates.is_empty() {
        return Err(Error::input("slide has no region to mask"));
    }
    let regions: Vec<usize> = choose(rng, candidates.len(), mask_count(ratio, candidates.len()))
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    let mut patch_mask = vec![false; bag.n_patches()];
    for &r in &regions {
        for &p in &layout.groups[r] {
            patch_mask[p] = true;
        }
    }
    let means = layout.region_means(bag.features())?;
    let w = means.cols();
    let data = regions.iter().flat_map(|&r| means.row(r).to_vec()).collect();
    Ok(SlideMask { targets: Tensor::new(&[regions.len(), w], data)?, regions, patch_mask })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneMask {
    /// Masked gene indices (sorted).
    pub genes: Vec<usize>,
    /// Original bins of the masked genes.
    pub targets: Vec<usize>,
    /// Input bins with masked genes set to the mask bin.
    pub masked_bins: Vec<usize>,
}

/// Within every pathway independently, masks `⌈ratio·|pathway|⌉` genes.
pub fn mask_genes(bins: &[usize], pathways: &[Vec<usize>], mask_bin: usize, ratio: f64, rng: &mut impl Rng) -> Result<GeneMask> {
    check_ratio(ratio)?;
    let mut genes = Vec::new();
    for members in pathways.iter().filter(|m| !m.is_empty()) {
        for i in choose(rng, members.len(), mask_count(ratio, members.len())) {
            genes.push(members[i]);
        }
    }
    if genes.is_empty() {
        return Err(Error::input("no pathway to mask"));
    }
    genes.sort_unstable();
    let targets = genes.iter().map(|&g| bins[g]).collect();
    let mut masked_bins = bins.to_vec();
    for &g in &genes {
        masked_bins[g] = mask_bin;
    }
    Ok(GeneMask { genes, targets, masked_bins })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextMask {
    /// Selected positions (sorted).
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
    pub masked: TokenSequence,
}

/// BERT policy over the real, non-CLS tokens: of the selected positions,
/// 80% become MASK, 10% a random non-special word, 10% stay unchanged.
pub fn mask_text(seq: &TokenSequence, ratio: f64, vocab_size: usize, rng: &mut impl Rng) -> Result<TextMask> {
    check_ratio(ratio)?;
    let maskable: Vec<usize> = (0..seq.len()).filter(|&i| seq.real()[i] && seq.ids()[i] != CLS).collect();
    if maskable.is_empty() {
        return Err(Error::input("sequence has no maskable token"));
    }
    if vocab_size <= N_SPECIAL {
        return Err(Error::config("vocabulary has no ordinary word"));
    }
    let positions: Vec<usize> = choose(rng, maskable.len(), mask_count(ratio, maskable.len()))
        .into_iter()
        .map(|i| maskable[i])
        .collect();
    let mut ids = seq.ids().to_vec();
    let targets = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        let u: f64 = rng.random();
        if u < 0.8 {
            ids[p] = MASK;
        } else if u < 0.9 {
            ids[p] = rng.random_range(N_SPECIAL..vocab_size);
        }
    }
    Ok(TextMask { positions, targets, masked: seq.with_ids(ids)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn tiny_ratio_still_masks_one_region() {
        let bag = FeatureBag::new(Tensor::zeros(&[100, 3])).unwrap();
        let layout = RegionLayout::new(100, 2, 2).unwrap();
        let m = mask_wsi(&bag, &layout, 1e-6, &mut rng(0)).unwrap();
        assert_eq!(m.regions.len(), 1);
        assert_eq!(m.patch_mask.iter().filter(|&&b| b).count(), 4);
        assert_eq!(mask_wsi(&bag, &layout, 1e-6, &mut rng(0)).unwrap(), m);
    }

    #[test]
    fn identical_region_vectors_give_that_target() {
        let v = [0.5, -2.0];
        let bag = FeatureBag::new(Tensor::matrix(4, 2, v.repeat(4)).unwrap()).unwrap();
        let layout = RegionLayout::new(4, 2, 2).unwrap();
        let m = mask_wsi(&bag, &layout, 0.5, &mut rng(1)).unwrap();
        assert_eq!(m.targets.data(), &v);
    }

    #[test]
    fn gene_masks_per_pathway() {
        let bins: Vec<usize> = (0..21).map(|i| i % 7).collect();
        let pathways = vec![(0..10).collect::<Vec<_>>(), (10..20).collect(), vec![20]];
        let m = mask_genes(&bins, &pathways, 7, 0.2, &mut rng(2)).unwrap();
        assert_eq!(m.genes.iter().filter(|&&g| g < 10).count(), 2);
        assert_eq!(m.genes.iter().filter(|&&g| (10..20).contains(&g)).count(), 2);
        assert!(m.genes.contains(&20));
        for (&g, &t) in m.genes.iter().zip(&m.targets) {
            assert_eq!(t, bins[g]);
            assert_eq!(m.masked_bins[g], 7);
        }
        for g in (0..21).filter(|g| !m.genes.contains(g)) {
            assert_eq!(m.masked_bins[g], bins[g]);
        }
    }

    #[test]
    fn text_mask_skips_cls_and_padding() {
        let seq = TokenSequence::from_words(&(10..20).collect::<Vec<_>>(), 16).unwrap();
        let m = mask_text(&seq, 1.0, 64, &mut rng(3)).unwrap();
        assert_eq!(m.positions, (1..11).collect::<Vec<_>>());
        let empty = TokenSequence::from_words(&[], 4).unwrap();
        assert!(mask_text(&empty, 0.5, 64, &mut rng(0)).is_err());
    }
}
