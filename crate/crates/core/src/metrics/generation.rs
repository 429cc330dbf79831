//! BLEU-n and ROUGE-L over token-id sequences.

use std::collections::HashMap;

/// Zero-count smoothing used by sentence-level BLEU only.
pub const SENTENCE_EPSILON: f64 = 1e-9;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and hypothesis n-gram total for one order.
fn clipped(hyp: &[usize], reference: &[usize], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

fn combine(matches: &[usize], totals: &[usize], hyp_len: usize, ref_len: usize, epsilon: f64) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (&m, &t) in matches.iter().zip(totals) {
        let p = if m > 0 {
            m as f64 / t as f64
        } else if epsilon > 0.0 && t > 0 {
            epsilon / t as f64
        } else {
            return 0.0;
        };
        log_sum += p.ln();
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    bp * (log_sum / matches.len() as f64).exp()
}

/// Corpus BLEU-n: clipped counts and lengths summed over all pairs before
/// taking precisions and the brevity penalty.
pub fn bleu_corpus(pairs: &[(Vec<usize>, Vec<usize>)], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    let mut matches = vec![0; n];
    let mut totals = vec![0; n];
    let (mut hl, mut rl) = (0, 0);
    for (hyp, reference) in pairs {
        hl += hyp.len();
        rl += reference.len();
        for k in 1..=n {
            let (m, t) = clipped(hyp, reference, k);
            matches[k - 1] += m;
            totals[k - 1] += t;
        }
    }
    combine(&matches, &totals, hl, rl, 0.0)
}

/// Sentence BLEU-n with epsilon smoothing of zero precisions.
pub fn bleu_sentence(hyp: &[usize], reference: &[usize], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    let (matches, totals): (Vec<usize>, Vec<usize>) = (1..=n).map(|k| clipped(hyp, reference, k)).unzip();
    combine(&matches, &totals, hyp.len(), reference.len(), SENTENCE_EPSILON)
}

pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with recall weighted by `β = 1.2`.
pub fn rouge_l(hyp: &[usize], reference: &[usize]) -> f64 {
    const BETA: f64 = 1.2;
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    (1.0 + BETA * BETA) * p * r / (r + BETA * BETA * p)
}
