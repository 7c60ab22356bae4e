//! Property and oracle tests across banks, labelers, losses and metrics.

mod support;

use atdoc::banks::{CentroidBank, InstanceBank};
use atdoc::evalkit::{accuracy, per_class_mean_accuracy};
use atdoc::labelers::{aggregate_rows, na_aggregate, nc_label, PseudoLabel};
use atdoc::losses::{na_loss, nc_loss};
use atdoc::ndmath::{argmax, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{oracle_na, random_bank, random_matrix, random_probs};

#[test]
fn na_aggregate_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..600 {
        let n = rng.random_range(2..60);
        let dim = rng.random_range(1..6);
        let k = rng.random_range(2..6);
        let temperature = [1.0, 0.5, 0.25][trial % 3];
        let bank = random_bank(&mut rng, n, dim, k, temperature);
        // half the queries are bank members and exclude their own row
        let (query, id, exclude) = if trial % 2 == 0 {
            let r = rng.random_range(0..n);
            (bank.features().row(r).to_vec(), Some(bank.ids()[r]), Some(r))
        } else {
            (random_matrix(&mut rng, 1, dim, -1.0, 1.0).row(0).to_vec(), None, None)
        };
        let usable = n - exclude.is_some() as usize;
        let m = rng.random_range(1..=usable);
        let got = na_aggregate(&query, id, &bank, m, false).unwrap();
        let want = oracle_na(&query, exclude, &bank, m);
        assert_eq!(got.rows, want.rows, "trial {trial}");
        assert_eq!(got.pseudo.label, want.label, "trial {trial}");
        assert!((got.pseudo.confidence - want.confidence).abs() < 1e-12, "trial {trial}");
        let soft = got.pseudo.soft.unwrap();
        for (a, b) in soft.iter().zip(&want.soft) {
            assert!((a - b).abs() < 1e-12, "trial {trial}");
        }
    }
}

#[test]
fn single_sample_bank_balances_to_all_ones() {
    let feats = Matrix::from_rows(&[vec![0.3, -0.2]]).unwrap();
    let probs = Matrix::from_rows(&[vec![0.2, 0.5, 0.3]]).unwrap();
    let bank = InstanceBank::new(&[0], &feats, &probs, 0.5).unwrap();
    assert_eq!(bank.balanced_read().unwrap().row(0), &[1.0, 1.0, 1.0]);
}

fn ema_closed_form(gamma: f64, steps: usize, c0: &[f64], v: &[f64]) -> Vec<f64> {
    let decay = (1.0 - gamma).powi(steps as i32);
    c0.iter().zip(v).map(|(c, x)| x + decay * (c - x)).collect()
}

proptest! {
    #[test]
    fn balanced_columns_sum_to_one(seed in any::<u64>(), n in 1usize..500, k in 2usize..=10, t_idx in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = random_bank(&mut rng, n, 3, k, [1.0, 0.5, 0.1][t_idx]);
        let bal = bank.balanced_read().unwrap();
        for s in bal.col_sums() {
            prop_assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn ema_follows_geometric_decay(
        gamma in 0.01f64..1.0,
        steps in 1usize..=10,
        c0 in prop::collection::vec(-5.0f64..5.0, 3),
        v in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let mut bank = CentroidBank::new(2, 3, gamma).unwrap();
        bank.set_centroid(0, &c0).unwrap();
        bank.set_centroid(1, &[9.0, 9.0, 9.0]).unwrap();
        let batch = Matrix::from_rows(&[v.clone(), v.clone()]).unwrap();
        for _ in 0..steps {
            bank.update(&batch, &[0, 0]).unwrap();
        }
        let want = ema_closed_form(gamma, steps, &c0, &v);
        for (a, b) in bank.centroid(0).iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        // the class absent from every batch never moves
        prop_assert_eq!(bank.centroid(1), &[9.0, 9.0, 9.0]);
    }

    #[test]
    fn aggregated_label_is_a_convex_combination(seed in any::<u64>(), n in 2usize..40, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = random_bank(&mut rng, n, 4, k, 0.5);
        let bal = bank.balanced_read().unwrap();
        let m = rng.random_range(1..=n);
        let rows: Vec<usize> = (0..m).collect();
        let p = aggregate_rows(&bal, &rows, true).unwrap();
        let soft = p.soft.unwrap();
        prop_assert!((soft.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(soft.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // the raw mass of each class lies between its smallest and largest neighbor entry
        for j in 0..k {
            let raw: f64 = rows.iter().map(|&r| bal.get(r, j)).sum::<f64>() / m as f64;
            let lo = rows.iter().map(|&r| bal.get(r, j)).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|&r| bal.get(r, j)).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(raw >= lo - 1e-15 && raw <= hi + 1e-15);
        }
        prop_assert!((0.0..=1.0).contains(&p.confidence));
    }

    #[test]
    fn nc_label_is_scale_invariant(
        feature in prop::collection::vec(-3.0f64..3.0, 3),
        scale in 0.001f64..1000.0,
        seed in any::<u64>(),
    ) {
        prop_assume!(feature.iter().any(|v| v.abs() > 1e-3));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cents = random_matrix(&mut rng, 4, 3, -1.0, 1.0);
        let mut bank = CentroidBank::new(4, 3, 0.1).unwrap();
        for j in 0..4 {
            bank.set_centroid(j, cents.row(j)).unwrap();
        }
        let scaled: Vec<f64> = feature.iter().map(|v| v * scale).collect();
        prop_assert_eq!(nc_label(&feature, &bank).unwrap().label, nc_label(&scaled, &bank).unwrap().label);
    }

    #[test]
    fn na_loss_with_unit_confidence_equals_nc_loss(seed in any::<u64>(), rows in 1usize..8, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = random_probs(&mut rng, rows, k);
        let pseudo: Vec<PseudoLabel> = (0..rows)
            .map(|_| PseudoLabel { label: rng.random_range(0..k), confidence: 1.0, soft: None })
            .collect();
        let a = na_loss(&probs, &pseudo).unwrap();
        let b = nc_loss(&probs, &pseudo).unwrap();
        prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
        prop_assert_eq!(a.dlogits, b.dlogits);
    }

    #[test]
    fn accuracy_is_frequency_weighted_recall(seed in any::<u64>(), n in 1usize..200, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let acc = accuracy(&preds, &truth).unwrap();
        let per = per_class_mean_accuracy(&preds, &truth, k).unwrap();
        let weighted: f64 = per
            .per_class
            .iter()
            .enumerate()
            .filter_map(|(j, r)| r.map(|r| r * truth.iter().filter(|&&t| t == j).count() as f64))
            .sum::<f64>()
            / n as f64;
        prop_assert!((acc - weighted).abs() < 1e-12);
    }
}

#[test]
fn row_normalization_never_changes_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let k = rng.random_range(2..12);
        let q: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0) * 10f64.powi(rng.random_range(-6..2))).collect();
        let total: f64 = q.iter().sum();
        let normalized: Vec<f64> = q.iter().map(|v| v / total).collect();
        assert_eq!(argmax(&q), argmax(&normalized), "{q:?}");
    }
}
