mod common;

use alt_core::bank::FeatureBank;
use alt_core::model::{ModelDims, ModelParams};
use alt_core::numerics::Matrix;
use common::{brute_knn, random_matrix, random_simplex, rng};
use proptest::prelude::*;
use rand::Rng;

#[derive(Debug, Clone)]
enum Op {
    Init(u64),
    Update { seed: u64, count: usize },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        1 => any::<u64>().prop_map(Op::Init),
        20 => (any::<u64>(), 1usize..16).prop_map(|(seed, count)| Op::Update { seed, count }),
    ]
}

const N: usize = 40;

fn dims() -> ModelDims {
    ModelDims {
        input_dim: 3,
        hidden_dim: 6,
        feature_dim: 5,
        bottleneck_dim: Some(3),
        num_classes: 4,
    }
}

fn check(bank: &FeatureBank) -> Result<(), TestCaseError> {
    for i in 0..bank.len() {
        let f = bank.features().row(i);
        let p = bank.probs().row(i);
        prop_assert!((f.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-6);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn interleaved_ops_keep_rows_normalized(ops in prop::collection::vec(op(), 150..200)) {
        let mut r = rng(0);
        let inputs = random_matrix(&mut r, N, 3, 2.0);
        let mut params = ModelParams::init(dims(), 0).unwrap();
        let mut bank = FeatureBank::init(&params, &inputs).unwrap();
        for o in ops {
            match o {
                Op::Init(seed) => {
                    params = ModelParams::init(dims(), seed).unwrap();
                    bank = FeatureBank::init(&params, &inputs).unwrap();
                }
                Op::Update { seed, count } => {
                    let mut r = rng(seed);
                    let idx = rand::seq::index::sample(&mut r, N, count).into_vec();
                    let x = random_matrix(&mut r, count, 3, 4.0);
                    let (z, p) = params.forward_batch(&x).unwrap();
                    bank.update(&idx, &z, &p).unwrap();
                }
            }
            check(&bank)?;
        }
    }

    #[test]
    fn knn_equals_brute_force(seed in any::<u64>(), n in 2usize..120, d in 1usize..5) {
        let mut r = rng(seed);
        let feats = Matrix::from_vec(
            n,
            d,
            (0..n * d).map(|_| r.random_range(-2i32..=2) as f64 + 0.25).collect(),
        )
        .unwrap();
        let probs = Matrix::from_rows(&(0..n).map(|_| random_simplex(&mut r, 3)).collect::<Vec<_>>()).unwrap();
        let bank = FeatureBank::from_parts(feats, probs).unwrap();
        let q = r.random_range(0..n);
        let k = r.random_range(1..n);
        let got = bank.knn(q, k).unwrap();
        let want = brute_knn(bank.features(), q, k);
        prop_assert_eq!(got.indices, want.iter().map(|w| w.0).collect::<Vec<_>>());
        prop_assert_eq!(got.similarities, want.iter().map(|w| w.1).collect::<Vec<_>>());
    }
}

#[test]
fn knn_rejects_bad_k_and_query() {
    let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let p = Matrix::from_vec(3, 2, vec![0.5; 6]).unwrap();
    let bank = FeatureBank::from_parts(f, p).unwrap();
    assert!(bank.knn(0, 0).is_err());
    assert!(bank.knn(0, 3).is_err());
    assert!(bank.knn(3, 1).is_err());
    let nb = bank.knn(0, 2).unwrap();
    assert_eq!(nb.indices, vec![2, 1]);
}

#[test]
fn update_rejects_duplicates_and_out_of_range() {
    let mut r = rng(1);
    let inputs = random_matrix(&mut r, 5, 3, 1.0);
    let params = ModelParams::init(dims(), 1).unwrap();
    let mut bank = FeatureBank::init(&params, &inputs).unwrap();
    let (z, p) = params.forward_batch(&inputs.select_rows(&[0, 1])).unwrap();
    assert!(bank.update(&[0, 0], &z, &p).is_err());
    assert!(bank.update(&[0, 9], &z, &p).is_err());
    assert!(bank.update(&[4, 2], &z, &p).is_ok());
}

#[test]
fn save_load_round_trip() {
    let mut r = rng(2);
    let inputs = random_matrix(&mut r, 12, 3, 1.0);
    let params = ModelParams::init(dims(), 2).unwrap();
    let bank = FeatureBank::init(&params, &inputs).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.altc");
    bank.save(&path).unwrap();
    let back = FeatureBank::load(&path).unwrap();
    assert_eq!(back.features(), bank.features());
    assert_eq!(back.probs(), bank.probs());
}
