use crate::numerics::{Graph, Var};

/// Mean over rows of `−log softmax(logits)[row, label]`.
pub fn cross_entropy(g: &mut Graph<'_>, logits: Var, labels: &[usize]) -> Var {
    assert_eq!(g.rows(logits), labels.len(), "one label per logit row");
    let lp = g.log_softmax(logits);
    let picked = g.pick(lp, labels);
    let m = g.mean(picked);
    g.scale(m, -1.0)
}
