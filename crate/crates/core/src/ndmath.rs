//! Dense row-major kernels: the matrix type plus softmax, cosine similarity
//! and top-k selection used by the network, the banks and the labelers.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 2-D array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values cannot fill a {rows}x{cols} matrix", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows explicitly
        let cols = self.cols;
        (0..self.rows).map(move |r| if cols == 0 { &[][..] } else { &self.data[r * cols..(r + 1) * cols] })
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!("matmul {}x{} by {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_t {}x{} by ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "t_matmul ({}x{})^T by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let b = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn unit_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroVector);
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Pairwise cosine similarity, `queries.rows() x keys.rows()`.
pub fn cosine_sim(queries: &Matrix, keys: &Matrix) -> Result<Matrix> {
    if queries.cols() != keys.cols() {
        return Err(Error::Shape(format!("cosine_sim: query dim {} vs key dim {}", queries.cols(), keys.cols())));
    }
    let q = unit_rows(queries)?;
    let k = unit_rows(keys)?;
    let mut sim = q.matmul_t(&k)?;
    sim.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(sim)
}

/// Cosine similarity of a single pair of vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine: {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Indices of the `k` largest scores in descending order, lowest index first
/// among equal scores. `exclude`, when given, is never returned.
pub fn topk_indices(scores: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
    let excluded = exclude.is_some_and(|e| e < scores.len());
    let usable = scores.len() - usize::from(excluded);
    if k > usable {
        return Err(Error::NeighborhoodTooLarge { k, usable });
    }
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| Some(i) != exclude).collect();
    let order = |a: &usize, b: &usize| -> Ordering { scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)) };
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(softmax_rows(&m).unwrap().row(0), &[0.5, 0.5]);

        let m = Matrix::from_rows(&[vec![1000.0, 1000.0, 1000.0]]).unwrap();
        let p = softmax_rows(&m).unwrap();
        for &v in p.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let m = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let p = softmax_rows(&m).unwrap();
        let e = std::f64::consts::E;
        assert!((p.get(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((p.get(0, 1) - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_empty_errors() {
        assert_eq!(softmax_rows(&Matrix::zeros(0, 0)), Err(Error::EmptyInput));
    }

    #[test]
    fn cosine_examples() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let s = cosine_sim(&q, &k).unwrap();
        assert_eq!(s.get(0, 0), 0.0);
        assert_eq!(s.get(1, 1), 1.0);
        assert!((s.get(2, 1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_row_errors() {
        let q = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let err = cosine_sim(&q, &k).unwrap_err();
        assert_eq!(err.to_string(), "zero vector has undefined direction");
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector));
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[0.1, 0.9, 0.5], 2, None).unwrap(), vec![1, 2]);
        assert_eq!(topk_indices(&[0.7, 0.7], 1, None).unwrap(), vec![0]);
        assert_eq!(topk_indices(&[0.9, 0.1, 0.5], 2, Some(0)).unwrap(), vec![2, 1]);
        assert!(topk_indices(&[0.9, 0.1], 2, Some(0))
            .unwrap_err()
            .to_string()
            .starts_with("neighborhood larger than bank"));
    }

    /// Repeated linear scan for the best remaining index.
    fn topk_oracle(scores: &[f64], k: usize, exclude: Option<usize>) -> Vec<usize> {
        let mut taken = vec![false; scores.len()];
        if let Some(e) = exclude {
            taken[e] = true;
        }
        let mut out = Vec::new();
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for i in 0..scores.len() {
                if taken[i] {
                    continue;
                }
                if best.is_none_or(|b| scores[i] > scores[b]) {
                    best = Some(i);
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            out.push(b);
        }
        out
    }

    #[test]
    fn topk_matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..1000 {
            let n = rng.random_range(1..=200);
            // coarse grid so ties are common
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64 / 10.0).collect();
            let exclude = if trial % 2 == 0 { Some(rng.random_range(0..n)) } else { None };
            let usable = n - usize::from(exclude.is_some());
            let k = rng.random_range(0..=usable.min(10));
            assert_eq!(topk_indices(&scores, k, exclude).unwrap(), topk_oracle(&scores, k, exclude));
        }
        let scores: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let mut sorted: Vec<usize> = (0..200).collect();
        sorted.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        assert_eq!(topk_indices(&scores, 5, None).unwrap(), sorted[..5].to_vec());
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.5, 0.5]), Some(0));
        assert_eq!(argmax(&[0.2, 0.8, 0.8]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[4.0, 5.0, 10.0, 11.0]);
        assert_eq!(a.matmul_t(&b.transpose()).unwrap(), ab);
        assert_eq!(a.transpose().t_matmul(&b).unwrap(), ab);
        assert!(a.matmul(&a).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-500.0f64..500.0, 1..12)) {
            let m = Matrix::from_rows(&[row]).unwrap();
            let p = softmax_rows(&m).unwrap();
            let s: f64 = p.row(0).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(0).iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn cosine_self_diagonal_is_one(
            rows in prop::collection::vec(prop::collection::vec(0.1f64..10.0, 4), 1..8)
        ) {
            let m = Matrix::from_rows(&rows).unwrap();
            let s = cosine_sim(&m, &m).unwrap();
            for i in 0..m.rows() {
                prop_assert!((s.get(i, i) - 1.0).abs() < 1e-12);
            }
        }
    }
}
