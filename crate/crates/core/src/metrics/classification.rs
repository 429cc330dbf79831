use crate::error::{Error, Result};

/// Binary ROC AUC via the rank-sum statistic; tied scores count one half.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("one score per label"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("classifier scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::input("AUC needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks (1-based) over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// One-vs-rest macro AUC over `C` score columns (`scores[i][c]`).
pub fn auc_ovr_macro(scores: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("one score row per label"));
    }
    if n_classes == 2 {
        let s: Vec<f64> = scores.iter().map(|r| r[1] - r[0]).collect();
        return auc_roc(&s, &labels.iter().map(|&l| l == 1).collect::<Vec<_>>());
    }
    let mut total = 0.0;
    for c in 0..n_classes {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        total += auc_roc(&s, &labels.iter().map(|&l| l == c).collect::<Vec<_>>())?;
    }
    Ok(total / n_classes as f64)
}

/// Unweighted mean of per-class F1; a class with no predictions and no
/// labels contributes 0.
pub fn f1_macro(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape("one prediction per label"));
    }
    if n_classes < 2 {
        return Err(Error::config("macro F1 needs at least two classes"));
    }
    let mut total = 0.0;
    for c in 0..n_classes {
        let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
        let fp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l != c).count() as f64;
        let fn_ = preds.iter().zip(labels).filter(|&(&p, &l)| p != c && l == c).count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        total += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
    }
    Ok(total / n_classes as f64)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}
