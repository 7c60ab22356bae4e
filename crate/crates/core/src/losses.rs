//! Training objectives. Each returns the batch-mean value and its exact
//! gradient with respect to the logits. Pseudo-labels and confidence weights
//! are constants: no gradient flows through them.

use crate::error::{Error, Result};
use crate::labelers::PseudoLabel;
use crate::ndmath::{argmax, softmax_rows, Matrix};

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub dlogits: Matrix,
}

impl LossOutput {
    pub fn zero(rows: usize, cols: usize) -> Self {
        LossOutput { value: 0.0, dlogits: Matrix::zeros(rows, cols) }
    }
}

#[inline]
fn safe_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

fn check_labels(probs: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != probs.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), probs.rows())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= probs.cols()) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {} classes", probs.cols())));
    }
    Ok(())
}

/// Per-sample weighted cross-entropy at hard labels: mean of `-w_i log p_{i,y_i}`.
fn weighted_ce(probs: &Matrix, labels: &[usize], weights: &[f64]) -> Result<LossOutput> {
    check_labels(probs, labels)?;
    let n = probs.rows();
    if n == 0 {
        return Ok(LossOutput::zero(0, probs.cols()));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut dlogits = probs.clone();
    for i in 0..n {
        let (y, w) = (labels[i], weights[i]);
        value += w * -safe_ln(probs.get(i, y));
        let row = dlogits.row_mut(i);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= w * inv_n);
    }
    Ok(LossOutput { value: value * inv_n, dlogits })
}

fn hard_labels(probs: &Matrix) -> Vec<usize> {
    probs.row_iter().map(|r| argmax(r).unwrap_or(0)).collect()
}

/// Cross-entropy against `(1 - epsilon) * onehot + epsilon / K`.
pub fn lsr_loss(logits: &Matrix, labels: &[usize], epsilon: f64) -> Result<LossOutput> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("label smoothing {epsilon} outside [0, 1)")));
    }
    if logits.rows() == 0 {
        check_labels(logits, labels)?;
        return Ok(LossOutput::zero(0, logits.cols()));
    }
    let probs = softmax_rows(logits)?;
    check_labels(&probs, labels)?;
    let (n, k) = probs.shape();
    let inv_n = 1.0 / n as f64;
    let off = epsilon / k as f64;
    let on = 1.0 - epsilon + off;
    let mut value = 0.0;
    let mut dlogits = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        let row = dlogits.row_mut(i);
        for (c, g) in row.iter_mut().enumerate() {
            let t = if c == y { on } else { off };
            if t != 0.0 {
                value -= t * safe_ln(probs.get(i, c));
            }
            *g = (*g - t) * inv_n;
        }
    }
    Ok(LossOutput { value: value * inv_n, dlogits })
}

/// Lee's pseudo-label loss: CE at the model's own argmax.
pub fn pl_loss_lee(probs: &Matrix) -> Result<LossOutput> {
    let labels = hard_labels(probs);
    weighted_ce(probs, &labels, &vec![1.0; labels.len()])
}

/// Pseudo-label CE weighted by the (detached) maximum probability.
pub fn pl_loss_weighted(probs: &Matrix) -> Result<LossOutput> {
    let labels = hard_labels(probs);
    let weights: Vec<f64> = labels.iter().enumerate().map(|(i, &y)| probs.get(i, y)).collect();
    weighted_ce(probs, &labels, &weights)
}

/// Mean Shannon entropy of the predictions.
pub fn minent_loss(probs: &Matrix) -> Result<LossOutput> {
    let (n, k) = probs.shape();
    if n == 0 {
        return Ok(LossOutput::zero(0, k));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut dlogits = Matrix::zeros(n, k);
    for i in 0..n {
        let p = probs.row(i);
        let h: f64 = p.iter().map(|&pk| -pk * safe_ln(pk)).sum();
        value += h;
        // dH/dz_j = -p_j (log p_j + H)
        for (g, &pj) in dlogits.row_mut(i).iter_mut().zip(p) {
            *g = -pj * (safe_ln(pj) + h) * inv_n;
        }
    }
    Ok(LossOutput { value: value * inv_n, dlogits })
}

/// Unweighted CE at nearest-centroid labels.
pub fn nc_loss(probs: &Matrix, pseudo: &[PseudoLabel]) -> Result<LossOutput> {
    let labels: Vec<usize> = pseudo.iter().map(|p| p.label).collect();
    weighted_ce(probs, &labels, &vec![1.0; labels.len()])
}

/// CE at neighborhood-aggregation labels, weighted by their confidence.
pub fn na_loss(probs: &Matrix, pseudo: &[PseudoLabel]) -> Result<LossOutput> {
    let labels: Vec<usize> = pseudo.iter().map(|p| p.label).collect();
    let weights: Vec<f64> = pseudo.iter().map(|p| p.confidence).collect();
    weighted_ce(probs, &labels, &weights)
}
