//! Brute-force oracles and random instance builders shared by the
//! integration tests.

#![allow(dead_code)]

use atdoc::banks::InstanceBank;
use atdoc::ndmath::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Random probability rows bounded away from zero.
pub fn random_probs(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Matrix {
    let mut m = random_matrix(rng, rows, k, 0.01, 1.0);
    for r in 0..rows {
        let s: f64 = m.row(r).iter().sum();
        m.row_mut(r).iter_mut().for_each(|v| *v /= s);
    }
    m
}

/// A random instance bank with distinct ids `100..100+n`.
pub fn random_bank(rng: &mut ChaCha8Rng, n: usize, dim: usize, k: usize, temperature: f64) -> InstanceBank {
    let feats = random_matrix(rng, n, dim, -1.0, 1.0);
    let probs = random_probs(rng, n, k);
    let ids: Vec<usize> = (100..100 + n).collect();
    InstanceBank::new(&ids, &feats, &probs, temperature).unwrap()
}

pub struct OracleNeighborhood {
    pub rows: Vec<usize>,
    pub label: usize,
    pub confidence: f64,
    pub soft: Vec<f64>,
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Neighborhood aggregation by full sort and explicit averaging.
pub fn oracle_na(query: &[f64], exclude: Option<usize>, bank: &InstanceBank, m: usize) -> OracleNeighborhood {
    let feats = bank.features();
    let sharp = bank.raw_sharp();
    let k = sharp.cols();
    let mass: Vec<f64> = (0..k).map(|j| (0..sharp.rows()).map(|r| sharp.get(r, j)).sum()).collect();
    let mut scored: Vec<(f64, usize)> =
        (0..feats.rows()).filter(|&r| Some(r) != exclude).map(|r| (oracle_cosine(query, feats.row(r)), r)).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let rows: Vec<usize> = scored.iter().take(m).map(|&(_, r)| r).collect();
    let mut avg = vec![0.0; k];
    for &r in &rows {
        for j in 0..k {
            avg[j] += sharp.get(r, j) / mass[j];
        }
    }
    avg.iter_mut().for_each(|v| *v /= m as f64);
    let total: f64 = avg.iter().sum();
    let soft: Vec<f64> = avg.iter().map(|v| v / total).collect();
    let mut label = 0;
    for j in 1..k {
        if soft[j] > soft[label] {
            label = j;
        }
    }
    OracleNeighborhood { rows, label, confidence: soft[label], soft }
}
