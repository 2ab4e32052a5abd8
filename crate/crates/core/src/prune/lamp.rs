//! Layer-adaptive magnitude scores.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LampScores {
    /// One score per weight, in the original index order.
    pub scores: Vec<f64>,
    /// Every weight was zero; all scores are then defined as 0.
    pub all_zero: bool,
}

/// Indices ascending by squared magnitude, ties by index.
fn ascending(w: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| (w[a] * w[a]).total_cmp(&(w[b] * w[b])).then(a.cmp(&b)));
    idx
}

/// Score at sorted position `u` is `w[u]^2 / sum_{v >= u} w[v]^2`.
pub fn lamp_scores(w: &[f64]) -> Result<LampScores> {
    if w.is_empty() {
        return Err(Error::Prune("lamp scores need at least one weight".into()));
    }
    if let Some(i) = w.iter().position(|v| !v.is_finite()) {
        return Err(Error::Prune(format!("weight {i} is not finite")));
    }
    let order = ascending(w);
    let mut scores = vec![0.0; w.len()];
    let mut suffix = 0.0;
    for &i in order.iter().rev() {
        let sq = w[i] * w[i];
        suffix += sq;
        scores[i] = if suffix > 0.0 { sq / suffix } else { 0.0 };
    }
    Ok(LampScores {
        all_zero: suffix == 0.0,
        scores,
    })
}

/// Like [`lamp_scores`], but weights of equal magnitude share the mean of
/// their scores, so the result does not depend on where equal weights sit.
pub fn lamp_scores_tie_averaged(w: &[f64]) -> Result<LampScores> {
    let mut s = lamp_scores(w)?;
    let order = ascending(w);
    let mut start = 0;
    while start < order.len() {
        let key = w[order[start]] * w[order[start]];
        let end = order[start..].iter().position(|&i| w[i] * w[i] != key).map_or(order.len(), |p| start + p);
        if end - start > 1 {
            let mean = order[start..end].iter().map(|&i| s.scores[i]).sum::<f64>() / (end - start) as f64;
            for &i in &order[start..end] {
                s.scores[i] = mean;
            }
        }
        start = end;
    }
    Ok(s)
}

/// Per output channel, the sum of the layer-wide tie-averaged scores of its
/// weights. `weight` is `[c_out, ...]` row-major.
pub fn channel_sums(weight: &[f32], c_out: usize) -> Result<Vec<f64>> {
    if c_out == 0 || weight.len() % c_out != 0 {
        return Err(Error::Prune(format!("{} weights do not split into {c_out} channels", weight.len())));
    }
    let w: Vec<f64> = weight.iter().map(|&v| v as f64).collect();
    let s = lamp_scores_tie_averaged(&w)?;
    Ok(s.scores.chunks(w.len() / c_out).map(|c| c.iter().sum()).collect())
}
