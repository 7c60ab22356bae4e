//! Memory banks over the target set.
//!
//! [`CentroidBank`] keeps one EMA-smoothed feature centroid per class for the
//! nearest-centroid labeler. [`InstanceBank`] keeps every sample's latest
//! feature and sharpened prediction for neighborhood aggregation; class
//! balancing is applied lazily at read time over the whole bank.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autonet::NetParams;
use crate::error::{Error, Result};
use crate::ndmath::{argmax, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidBank {
    centroids: Matrix,
    gamma: f64,
    initialized: Vec<bool>,
}

impl CentroidBank {
    /// All-zero, uninitialized centroids.
    pub fn new(class_count: usize, dim: usize, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("EMA gamma {gamma} outside (0, 1]")));
        }
        Ok(CentroidBank { centroids: Matrix::zeros(class_count, dim), gamma, initialized: vec![false; class_count] })
    }

    /// Centroids are per-pseudo-class means of `features`; classes with no
    /// member start at the global mean and stay flagged uninitialized.
    pub fn from_assignments(features: &Matrix, labels: &[usize], class_count: usize, gamma: f64) -> Result<Self> {
        let mut bank = CentroidBank::new(class_count, features.cols(), gamma)?;
        if labels.len() != features.rows() {
            return Err(Error::Shape(format!("{} labels for {} features", labels.len(), features.rows())));
        }
        let n = features.rows().max(1) as f64;
        let global: Vec<f64> = features.col_sums().into_iter().map(|s| s / n).collect();
        let means = class_means(features, labels, class_count)?;
        for (j, mean) in means.into_iter().enumerate() {
            match mean {
                Some(m) => {
                    bank.centroids.row_mut(j).copy_from_slice(&m);
                    bank.initialized[j] = true;
                }
                None => bank.centroids.row_mut(j).copy_from_slice(&global),
            }
        }
        Ok(bank)
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn centroid(&self, class: usize) -> &[f64] {
        self.centroids.row(class)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized[class]
    }

    pub fn class_count(&self) -> usize {
        self.centroids.rows()
    }

    pub fn set_centroid(&mut self, class: usize, value: &[f64]) -> Result<()> {
        if value.len() != self.centroids.cols() {
            return Err(Error::Shape(format!("centroid dim {} vs {}", value.len(), self.centroids.cols())));
        }
        self.centroids.row_mut(class).copy_from_slice(value);
        self.initialized[class] = true;
        Ok(())
    }

    /// `c_j <- gamma * batch_mean_j + (1 - gamma) * c_j` for every class present
    /// in `pseudo`. A class's first observation is adopted as is.
    pub fn update(&mut self, batch_features: &Matrix, pseudo: &[usize]) -> Result<()> {
        if batch_features.cols() != self.centroids.cols() {
            return Err(Error::Shape(format!(
                "batch feature dim {} vs bank dim {}",
                batch_features.cols(),
                self.centroids.cols()
            )));
        }
        if pseudo.len() != batch_features.rows() {
            return Err(Error::Shape(format!("{} labels for {} rows", pseudo.len(), batch_features.rows())));
        }
        let means = class_means(batch_features, pseudo, self.class_count())?;
        let g = self.gamma;
        for (j, mean) in means.into_iter().enumerate() {
            let Some(mean) = mean else { continue };
            let row = self.centroids.row_mut(j);
            if self.initialized[j] {
                for (c, m) in row.iter_mut().zip(&mean) {
                    *c = g * m + (1.0 - g) * *c;
                }
            } else {
                row.copy_from_slice(&mean);
                self.initialized[j] = true;
            }
        }
        Ok(())
    }
}

fn class_means(features: &Matrix, labels: &[usize], class_count: usize) -> Result<Vec<Option<Vec<f64>>>> {
    let dim = features.cols();
    let mut sums = vec![vec![0.0; dim]; class_count];
    let mut counts = vec![0usize; class_count];
    for (row, &y) in features.row_iter().zip(labels) {
        if y >= class_count {
            return Err(Error::InvalidArgument(format!("pseudo-label {y} out of range for {class_count} classes")));
        }
        counts[y] += 1;
        sums[y].iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect())
}

/// Per-sample feature and sharpened prediction table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceBank {
    features: Matrix,
    raw_sharp: Matrix,
    temperature: f64,
    ids: Vec<usize>,
    rows_by_id: BTreeMap<usize, usize>,
}

impl InstanceBank {
    /// One row per id, filled from `features` and `probs`.
    pub fn new(ids: &[usize], features: &Matrix, probs: &Matrix, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
        }
        if features.rows() != ids.len() || probs.rows() != ids.len() {
            return Err(Error::Shape(format!(
                "{} ids, {} feature rows, {} prediction rows",
                ids.len(),
                features.rows(),
                probs.rows()
            )));
        }
        let mut rows_by_id = BTreeMap::new();
        for (row, &id) in ids.iter().enumerate() {
            if rows_by_id.insert(id, row).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate sample id {id}")));
            }
        }
        let mut bank = InstanceBank {
            features: features.clone(),
            raw_sharp: Matrix::zeros(ids.len(), probs.cols()),
            temperature,
            ids: ids.to_vec(),
            rows_by_id,
        };
        for r in 0..ids.len() {
            bank.sharpen_into(r, probs.row(r))?;
        }
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn raw_sharp(&self) -> &Matrix {
        &self.raw_sharp
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row_of(&self, id: usize) -> Option<usize> {
        self.rows_by_id.get(&id).copied()
    }

    fn sharpen_into(&mut self, row: usize, p: &[f64]) -> Result<()> {
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite(format!("prediction row {p:?} is not a distribution")));
        }
        let inv_t = 1.0 / self.temperature;
        let dst = self.raw_sharp.row_mut(row);
        if inv_t == 1.0 {
            dst.copy_from_slice(p);
        } else {
            dst.iter_mut().zip(p).for_each(|(d, &v)| *d = v.powf(inv_t));
        }
        Ok(())
    }

    /// Overwrites the rows of `sample_ids` (no moving average).
    pub fn write(&mut self, sample_ids: &[usize], features: &Matrix, probs: &Matrix) -> Result<()> {
        if features.rows() != sample_ids.len() || probs.rows() != sample_ids.len() {
            return Err(Error::Shape(format!(
                "{} ids, {} feature rows, {} prediction rows",
                sample_ids.len(),
                features.rows(),
                probs.rows()
            )));
        }
        if features.cols() != self.features.cols() || probs.cols() != self.raw_sharp.cols() {
            return Err(Error::Shape("write dimensions differ from bank".into()));
        }
        let rows =
            sample_ids.iter().map(|&id| self.row_of(id).ok_or(Error::UnknownId(id))).collect::<Result<Vec<_>>>()?;
        for (i, &r) in rows.iter().enumerate() {
            self.features.row_mut(r).copy_from_slice(features.row(i));
            self.sharpen_into(r, probs.row(i))?;
        }
        Ok(())
    }

    /// Total sharpened mass of each class over the whole bank.
    pub fn class_mass(&self) -> Result<Vec<f64>> {
        let mass = self.raw_sharp.col_sums();
        if let Some(k) = mass.iter().position(|&m| m <= 0.0 || !m.is_finite()) {
            return Err(Error::ZeroClassMass(k));
        }
        Ok(mass)
    }

    /// Class-balanced predictions: each class column divided by its total mass.
    pub fn balanced_read(&self) -> Result<Matrix> {
        let mass = self.class_mass()?;
        let mut out = self.raw_sharp.clone();
        for r in 0..out.rows() {
            out.row_mut(r).iter_mut().zip(&mass).for_each(|(v, m)| *v /= m);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bank serializes")
    }
}

/// Forward pass over every bank sample, then both banks built from it.
/// Centroids use the network's argmax labels from that pass.
pub fn bank_init(
    params: &NetParams,
    inputs: &Matrix,
    ids: &[usize],
    gamma: f64,
    temperature: f64,
) -> Result<(CentroidBank, InstanceBank)> {
    if inputs.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let cache = params.forward(inputs)?;
    let labels: Vec<usize> = cache.probs.row_iter().map(|r| argmax(r).unwrap_or(0)).collect();
    let centroids = CentroidBank::from_assignments(&cache.features, &labels, params.spec.class_count, gamma)?;
    let instances = InstanceBank::new(ids, &cache.features, &cache.probs, temperature)?;
    Ok((centroids, instances))
}
