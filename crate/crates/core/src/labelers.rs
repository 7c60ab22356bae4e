//! Pseudo-label producers: the network's own argmax, nearest centroid over a
//! [`CentroidBank`], and neighborhood aggregation over an [`InstanceBank`].

use serde::{Deserialize, Serialize};

use crate::banks::{CentroidBank, InstanceBank};
use crate::error::{Error, Result};
use crate::ndmath::{argmax, cosine_sim, topk_indices, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub label: usize,
    /// Weight in [0, 1] applied to this sample's loss.
    pub confidence: f64,
    /// Row-normalized aggregated distribution (neighborhood aggregation only).
    pub soft: Option<Vec<f64>>,
}

pub fn argmax_label(probs_row: &[f64]) -> Result<PseudoLabel> {
    if probs_row.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("prediction row {probs_row:?}")));
    }
    let label = argmax(probs_row).ok_or(Error::EmptyInput)?;
    Ok(PseudoLabel { label, confidence: probs_row[label], soft: Some(probs_row.to_vec()) })
}

/// Class of the centroid at the smallest cosine distance; confidence is 1.
pub fn nc_label(feature: &[f64], bank: &CentroidBank) -> Result<PseudoLabel> {
    let q = Matrix::from_vec(1, feature.len(), feature.to_vec())?;
    let sims = cosine_sim(&q, bank.centroids())?;
    nc_from_similarities(sims.row(0))
}

fn nc_from_similarities(sims: &[f64]) -> Result<PseudoLabel> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &s) in sims.iter().enumerate() {
        let d = 1.0 - s;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    let (label, _) = best.ok_or(Error::EmptyInput)?;
    Ok(PseudoLabel { label, confidence: 1.0, soft: None })
}

/// Nearest-centroid labels for every row of `features`.
pub fn nc_label_batch(features: &Matrix, bank: &CentroidBank) -> Result<Vec<PseudoLabel>> {
    let sims = cosine_sim(features, bank.centroids())?;
    sims.row_iter().map(nc_from_similarities).collect()
}

/// Result of one neighborhood lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    /// Bank rows of the neighbors, most similar first.
    pub rows: Vec<usize>,
    pub pseudo: PseudoLabel,
}

/// Averages the balanced rows of `rows`, row-normalizes the average and takes
/// its argmax. With `raw_confidence` the weight is read from the unnormalized
/// average instead.
pub fn aggregate_rows(balanced: &Matrix, rows: &[usize], raw_confidence: bool) -> Result<PseudoLabel> {
    if rows.is_empty() {
        return Err(Error::NeighborhoodTooLarge { k: 0, usable: 0 });
    }
    let k = balanced.cols();
    let mut q_raw = vec![0.0; k];
    for &r in rows {
        q_raw.iter_mut().zip(balanced.row(r)).for_each(|(q, v)| *q += v);
    }
    let m = rows.len() as f64;
    q_raw.iter_mut().for_each(|q| *q /= m);
    let total: f64 = q_raw.iter().sum();
    let soft: Vec<f64> = if total > 0.0 { q_raw.iter().map(|q| q / total).collect() } else { vec![1.0 / k as f64; k] };
    let label = argmax(&soft).ok_or(Error::EmptyInput)?;
    let confidence = if raw_confidence { q_raw[label] } else { soft[label] };
    Ok(PseudoLabel { label, confidence: confidence.clamp(0.0, 1.0), soft: Some(soft) })
}

fn neighborhood(
    sims: &[f64],
    exclude: Option<usize>,
    balanced: &Matrix,
    m: usize,
    raw_confidence: bool,
) -> Result<Neighborhood> {
    let rows = topk_indices(sims, m, exclude)?;
    let pseudo = aggregate_rows(balanced, &rows, raw_confidence)?;
    Ok(Neighborhood { rows, pseudo })
}

/// Neighborhood aggregation for one query. `query_id`, when it names a bank
/// sample, is excluded from its own neighborhood.
pub fn na_aggregate(
    query_feature: &[f64],
    query_id: Option<usize>,
    bank: &InstanceBank,
    m: usize,
    raw_confidence: bool,
) -> Result<Neighborhood> {
    let q = Matrix::from_vec(1, query_feature.len(), query_feature.to_vec())?;
    let mut out = na_aggregate_batch(&q, &[query_id], bank, m, raw_confidence)?;
    Ok(out.pop().expect("one query"))
}

/// Batched [`na_aggregate`]: class balancing and similarities are computed once.
pub fn na_aggregate_batch(
    queries: &Matrix,
    query_ids: &[Option<usize>],
    bank: &InstanceBank,
    m: usize,
    raw_confidence: bool,
) -> Result<Vec<Neighborhood>> {
    if query_ids.len() != queries.rows() {
        return Err(Error::Shape(format!("{} ids for {} queries", query_ids.len(), queries.rows())));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("neighborhood size must be positive".into()));
    }
    let balanced = bank.balanced_read()?;
    let sims = cosine_sim(queries, bank.features())?;
    sims.row_iter()
        .zip(query_ids)
        .map(|(s, id)| neighborhood(s, id.and_then(|i| bank.row_of(i)), &balanced, m, raw_confidence))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn argmax_label_examples() {
        let p = argmax_label(&[0.2, 0.8]).unwrap();
        assert_eq!((p.label, p.confidence), (1, 0.8));
        let p = argmax_label(&[0.5, 0.5]).unwrap();
        assert_eq!((p.label, p.confidence), (0, 0.5));
        let p = argmax_label(&[1.0, 0.0]).unwrap();
        assert_eq!((p.label, p.confidence), (0, 1.0));
        assert!(argmax_label(&[f64::NAN, 0.5]).is_err());
    }

    fn centroids(rows: &[Vec<f64>]) -> CentroidBank {
        let mut b = CentroidBank::new(rows.len(), rows[0].len(), 0.1).unwrap();
        for (j, r) in rows.iter().enumerate() {
            b.set_centroid(j, r).unwrap();
        }
        b
    }

    #[test]
    fn nc_label_examples() {
        let bank = centroids(&[vec![1.0, 0.2], vec![-1.0, 0.3], vec![0.1, 1.0]]);
        assert_eq!(nc_label(&[0.1, 1.0], &bank).unwrap().label, 2);
        assert_eq!(nc_label(&[-3.0, 0.9], &bank).unwrap().label, 1);
        assert_eq!(nc_label(&[0.1, 1.0], &bank).unwrap().confidence, 1.0);
        let tie = centroids(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(nc_label(&[1.0, 1.0], &tie).unwrap().label, 0);
    }

    #[test]
    fn nc_label_zero_vectors_error() {
        let bank = centroids(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(nc_label(&[1.0, 1.0], &bank), Err(Error::ZeroVector));
        let bank = centroids(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(nc_label(&[0.0, 0.0], &bank), Err(Error::ZeroVector));
    }

    #[test]
    fn aggregate_rows_examples() {
        let bal = m(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.2, 0.8]]);
        let p = aggregate_rows(&bal, &[0, 1, 2], false).unwrap();
        assert_eq!(p.label, 0);
        assert!((p.confidence - 2.0 / 3.0).abs() < 1e-15);
        let soft = p.soft.unwrap();
        assert!((soft[1] - 1.0 / 3.0).abs() < 1e-15);

        let p = aggregate_rows(&bal, &[3], false).unwrap();
        assert_eq!(p.label, 1);
        assert!((p.confidence - 0.8).abs() < 1e-15);
    }

    #[test]
    fn raw_confidence_keeps_unnormalized_mass() {
        let bal = m(&[vec![0.1, 0.05], vec![0.3, 0.05]]);
        let norm = aggregate_rows(&bal, &[0, 1], false).unwrap();
        let raw = aggregate_rows(&bal, &[0, 1], true).unwrap();
        assert_eq!(norm.label, raw.label);
        assert!((raw.confidence - 0.2).abs() < 1e-15);
        assert!((norm.confidence - 0.2 / 0.25).abs() < 1e-15);
    }

    #[test]
    fn na_excludes_own_row() {
        let feats = m(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]]);
        let probs = m(&[vec![0.9, 0.1], vec![0.2, 0.8], vec![0.5, 0.5]]);
        let bank = InstanceBank::new(&[7, 8, 9], &feats, &probs, 1.0).unwrap();
        let n = na_aggregate(&[1.0, 0.0], Some(7), &bank, 1, false).unwrap();
        assert_eq!(n.rows, vec![1]);
        // an id outside the bank excludes nothing
        let n = na_aggregate(&[1.0, 0.0], Some(100), &bank, 1, false).unwrap();
        assert_eq!(n.rows, vec![0]);
        assert!(na_aggregate(&[1.0, 0.0], Some(7), &bank, 3, false).is_err());
        assert!(na_aggregate(&[1.0, 0.0], None, &bank, 3, false).is_ok());
    }
}
