//! Evaluation metrics and the metrics file format.

pub mod classification;
pub mod generation;
pub mod report;

pub use classification::{accuracy, auc_ovr_macro, auc_roc, f1_macro};
pub use generation::{bleu_corpus, bleu_sentence, lcs_len, rouge_l};
pub use report::MetricsReport;

use crate::error::{Error, Result};
use crate::tasks::SurvivalLabel;

/// Harrell's concordance index. A pair is comparable when the earlier time
/// is an observed event; the earlier patient should carry the higher risk.
/// Risk ties count one half.
pub fn concordance_index(risk: &[f64], labels: &[SurvivalLabel]) -> Result<f64> {
    if risk.len() != labels.len() {
        return Err(Error::shape("one risk score per survival label"));
    }
    if risk.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("risk scores".into()));
    }
    let (mut concordant, mut comparable) = (0.0, 0usize);
    for i in 0..risk.len() {
        if labels[i].censored {
            continue;
        }
        for j in 0..risk.len() {
            if labels[j].time > labels[i].time {
                comparable += 1;
                concordant += match risk[i].partial_cmp(&risk[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    if comparable == 0 {
        return Err(Error::input("no comparable pairs for the concordance index"));
    }
    Ok(concordant / comparable as f64)
}
