mod common;

use alt_core::division::{
    class_learning_effect, division_thresholds, division_thresholds_signed, partition,
    threshold_for_beta, DivisionMode, LearningState, TauAggregate,
};
use alt_core::numerics::{argmax, max_value, Matrix};
use common::{random_simplex, rng, tau_closed_form};
use proptest::prelude::*;

fn probs_strategy() -> impl Strategy<Value = (usize, Vec<Vec<f64>>, Vec<f64>)> {
    (2usize..6, 1usize..30, any::<u64>()).prop_map(|(c, n, seed)| {
        let mut r = rng(seed);
        let rows = (0..n).map(|_| random_simplex(&mut r, c)).collect();
        let t = (0..c)
            .map(|k| match (seed >> k) % 3 {
                0 => f64::INFINITY,
                1 => 1.0 / c as f64,
                _ => 0.3 + 0.1 * k as f64,
            })
            .collect();
        (c, rows, t)
    })
}

proptest! {
    #[test]
    fn partition_is_disjoint_cover((_c, rows, t) in probs_strategy()) {
        let p = Matrix::from_rows(&rows).unwrap();
        for mode in [DivisionMode::Literal, DivisionMode::Prose, DivisionMode::Off] {
            let part = partition(&p, &t, mode).unwrap();
            let mut all: Vec<usize> = part.inner.iter().chain(&part.outliers).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..rows.len()).collect::<Vec<_>>());
        }
        let lit = partition(&p, &t, DivisionMode::Literal).unwrap();
        let prose = partition(&p, &t, DivisionMode::Prose).unwrap();
        prop_assert_eq!(&lit.inner, &prose.outliers);
        prop_assert_eq!(&lit.outliers, &prose.inner);
        for &i in &lit.outliers {
            prop_assert!(max_value(&rows[i]) >= t[argmax(&rows[i])]);
        }
    }

    #[test]
    fn ema_matches_closed_form(alpha in 0.01f64..0.99, c in 2usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut s = LearningState::new(c, alpha, TauAggregate::Mean).unwrap();
        let mut ms = Vec::new();
        for _ in 0..100 {
            let conf: Vec<f64> = (0..5).map(|_| max_value(&random_simplex(&mut r, c))).collect();
            ms.push(conf.iter().sum::<f64>() / conf.len() as f64);
            s.update_tau(&conf).unwrap();
            prop_assert!(s.tau >= 1.0 / c as f64 - 1e-12 && s.tau <= 1.0 + 1e-12);
        }
        prop_assert!((s.tau - tau_closed_form(1.0 / c as f64, alpha, &ms)).abs() <= 1e-12);
    }

    #[test]
    fn thresholds_monotone_in_count(sigma in prop::collection::vec(0usize..50, 2..8)) {
        let t = division_thresholds(&sigma).unwrap();
        let c = sigma.len() as f64;
        for i in 0..sigma.len() {
            prop_assert!(t[i] >= 1.0 / c);
            for j in 0..sigma.len() {
                if sigma[i] <= sigma[j] {
                    prop_assert!(t[i] <= t[j]);
                }
            }
        }
        if sigma.contains(&0) {
            let min = t.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(min, 1.0 / c);
        }
    }
}

#[test]
fn tau_examples() {
    let mut s = LearningState::new(4, 0.9, TauAggregate::Max).unwrap();
    assert_eq!(s.tau, 0.25);
    let t = s.update_tau(&[0.85, 0.3]).unwrap();
    assert!((t - 0.31).abs() < 1e-15);
    let before = s.clone();
    s.update_tau(&[]).unwrap();
    assert_eq!(s, before);
    assert!(s.update_tau(&[0.1]).is_err());
}

#[test]
fn constant_input_converges_geometrically() {
    let mut s = LearningState::new(2, 0.8, TauAggregate::Max).unwrap();
    for t in 1..=40 {
        s.update_tau(&[0.9]).unwrap();
        let expect = 0.8f64.powi(t) * (0.5 - 0.9f64).abs();
        assert!(((s.tau - 0.9).abs() - expect).abs() < 1e-12);
    }
}

#[test]
fn learning_effect_examples() {
    let p = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
    assert_eq!(class_learning_effect(&p, 0.65), vec![1, 1]);
    assert_eq!(class_learning_effect(&p, 1.0), vec![0, 0]);
    assert_eq!(class_learning_effect(&p, 0.0).iter().sum::<usize>(), 3);
}

#[test]
fn threshold_examples() {
    assert_eq!(threshold_for_beta(0.0, 10), 0.1);
    assert!(threshold_for_beta(1.0, 10).is_infinite());
    let t = threshold_for_beta(0.5, 10);
    assert!((t - 0.1 * (1.0 + 0.5 / std::f64::consts::LN_2)).abs() < 1e-15);
    assert_eq!(division_thresholds(&[0, 0, 0]).unwrap(), vec![1.0 / 3.0; 3]);
    assert!(division_thresholds_signed(&[1, -1]).is_err());
}

#[test]
fn partition_example() {
    let p = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.55, 0.45], vec![0.2, 0.8]]).unwrap();
    let part = partition(&p, &[0.6, f64::INFINITY], DivisionMode::Literal).unwrap();
    assert_eq!(part.outliers, vec![0]);
    assert_eq!(part.inner, vec![1, 2]);
    let all_inner = partition(&p, &[f64::INFINITY; 2], DivisionMode::Literal).unwrap();
    assert!(all_inner.outliers.is_empty());
    let all_out = partition(&p, &[0.5; 2], DivisionMode::Literal).unwrap();
    assert_eq!(all_out.outliers.len(), 3);
}
