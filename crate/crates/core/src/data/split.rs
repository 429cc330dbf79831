use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn get(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::input(format!("unknown split {name:?} (train|val|test)"))),
        }
    }
}

/// Integer counts proportional to `weights` summing to `total`
/// (largest remainder, ties to the earlier slot).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut left = total - counts.iter().sum::<usize>();
    for &s in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[s] += 1;
        left -= 1;
    }
    counts
}

/// Stratified train/val/test split. Overall sizes follow the ratios by
/// largest remainder; each class's quota per split is its floored share
/// plus leftover units handed out by largest fractional part. Falls back
/// to an unstratified split when a class has fewer than 3 members.
pub fn split(classes: &[usize], ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    let n = classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = apportion(n, &ratios);
    let n_classes = classes.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in classes.iter().enumerate() {
        members[c].push(i);
    }
    members.retain(|m| !m.is_empty());
    for m in &mut members {
        m.shuffle(&mut rng);
    }

    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    if members.iter().any(|m| m.len() < 3) {
        log::warn!("a class has fewer than 3 members; splitting without stratification");
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        let mut it = all.into_iter();
        for (s, &t) in targets.iter().enumerate() {
            out[s].extend(it.by_ref().take(t));
        }
    } else {
        let quotas: Vec<Vec<f64>> = members.iter().map(|m| ratios.iter().map(|r| r * m.len() as f64).collect()).collect();
        let mut alloc: Vec<Vec<usize>> = quotas.iter().map(|q| q.iter().map(|v| v.floor() as usize).collect()).collect();
        let mut row_left: Vec<usize> = members.iter().zip(&alloc).map(|(m, a)| m.len() - a.iter().sum::<usize>()).collect();
        let mut col_left: Vec<usize> = (0..3).map(|s| targets[s] - alloc.iter().map(|a| a[s]).sum::<usize>()).collect();
        let mut cells: Vec<(usize, usize)> = (0..members.len()).flat_map(|c| (0..3).map(move |s| (c, s))).collect();
        cells.sort_by(|&(c1, s1), &(c2, s2)| {
            let f = |c: usize, s: usize| quotas[c][s] - quotas[c][s].floor();
            f(c2, s2).total_cmp(&f(c1, s1)).then((c1, s1).cmp(&(c2, s2)))
        });
        // Row and column deficits have equal totals, so some cell always fits.
        while row_left.iter().any(|&r| r > 0) {
            let &(c, s) = cells.iter().find(|&&(c, s)| row_left[c] > 0 && col_left[s] > 0).expect("feasible cell");
            alloc[c][s] += 1;
            row_left[c] -= 1;
            col_left[s] -= 1;
        }
        for (m, a) in members.iter().zip(&alloc) {
            let mut it = m.iter().copied();
            for s in 0..3 {
                out[s].extend(it.by_ref().take(a[s]));
            }
        }
    }
    for part in &mut out {
        part.sort_unstable();
    }
    let [train, val, test] = out;
    Ok(Split { train, val, test })
}
