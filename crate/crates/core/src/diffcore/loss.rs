use super::tape::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Class-weighted cross-entropy, normalised by the sum of the applied weights:
/// `Σ_b w[y_b] · (−log softmax(z_b)[y_b]) / Σ_b w[y_b]`.
pub fn weighted_cross_entropy(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    weights: &[f64],
) -> Result<Var> {
    let lt = g.value(logits);
    let (b, k) = (lt.rows(), lt.cols());
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "weighted_cross_entropy",
            lhs: lt.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if weights.len() != k {
        return Err(Error::ShapeMismatch {
            op: "weighted_cross_entropy",
            lhs: lt.shape().to_vec(),
            rhs: vec![weights.len()],
        });
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::invalid(format!(
            "class weights must be strictly positive and finite, got {w}"
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
    }
    let total: f64 = labels.iter().map(|&y| weights[y]).sum();
    let mut mask = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        mask[i * k + y] = weights[y] / total;
    }
    let mask = g.constant(Tensor::new(vec![b, k], mask)?);
    let logp = g.log_softmax(logits);
    let picked = g.mul(logp, mask)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0))
}
