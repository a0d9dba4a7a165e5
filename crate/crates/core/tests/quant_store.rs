use std::collections::BTreeMap;

use dynprec::model::{forward, init_model, FullPrecision, ModelConfig, ModelWeights};
use dynprec::provider::MatrixProvider;
use dynprec::quant::{quantize_layer, MaterializedStore, QuantStore};
use dynprec::{Error, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn mse(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.sub(b).frobenius_sq() / a.len() as f64
}

#[test]
fn mse_non_increasing_on_random_8x8() {
    for seed in 0..20 {
        let w = random_matrix(8, 8, seed);
        let q = quantize_layer(&w, 6, 3).unwrap();
        let errs: Vec<f64> = (3..=6).map(|b| mse(&w, &q.dequantize(b).unwrap())).collect();
        for pair in errs.windows(2) {
            assert!(pair[1] <= pair[0], "seed {seed}: {errs:?}");
        }
    }
}

#[test]
fn reconstruction_error_within_half_step() {
    let w = random_matrix(16, 40, 3);
    let q = quantize_layer(&w, 6, 2).unwrap();
    for b in 2..=6u8 {
        let wb = q.dequantize::<f64>(b).unwrap();
        for r in 0..w.rows() {
            let span = (q.hi()[r] - q.lo()[r]) as f64;
            let cell = span / (1u64 << b) as f64;
            for c in 0..w.cols() {
                let e = (w.get(r, c) - wb.get(r, c)).abs();
                // Truncated codes stay inside their cell.
                assert!(e <= cell * (0.5 + 0.5_f64.powi((6 - b) as i32)) + 1e-12);
            }
        }
    }
}

#[test]
fn store_round_trip_and_corruption() {
    let m: ModelWeights<f64> = init_model(2, ModelConfig::tiny()).unwrap();
    let store = QuantStore::quantize_model(&m, 6, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.nqs");
    let hash = store.save(&path).unwrap();
    let back = QuantStore::load(&path).unwrap();
    assert_eq!(back, store);
    assert_eq!(back.hash(), hash);
    back.check_model(&m).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 1;
    assert!(matches!(
        QuantStore::from_bytes(&bad_magic, &path),
        Err(Error::Format { .. })
    ));
    assert!(QuantStore::from_bytes(&bytes[..bytes.len() - 3], &path).is_err());

    let other: ModelWeights<f64> = init_model(3, ModelConfig::tiny()).unwrap();
    assert!(matches!(store.check_model(&other), Err(Error::Provenance(_))));
}

#[test]
fn requests_outside_served_range_fail() {
    let q = quantize_layer(&random_matrix(4, 4, 1), 6, 3).unwrap();
    assert!(matches!(q.dequantize::<f64>(2), Err(Error::BitOutOfRange { .. })));
    assert!(matches!(q.dequantize::<f64>(7), Err(Error::BitOutOfRange { .. })));
    assert!(q.gemv(4, &[1.0; 3]).is_err());
}

/// Serving every layer at `n` bits through the store equals running the model
/// whose linear weights were replaced by the same dequantized matrices.
#[test]
fn static_provider_is_transparent() {
    let m: ModelWeights<f64> = init_model(5, ModelConfig::tiny()).unwrap();
    let store = QuantStore::quantize_model(&m, 6, 3).unwrap();
    let weights = MaterializedStore::<f64>::new(&store).unwrap();
    let mut replaced = m.clone();
    for id in m.config.layer_ids() {
        *replaced.linear_mut(id) = store.layer(id).unwrap().dequantize(6).unwrap();
    }
    let bits: BTreeMap<_, _> = m.config.layer_ids().into_iter().map(|id| (id, 6u8)).collect();
    let toks: Vec<u32> = (0..20).map(|i| (i * 37 % 256) as u32).collect();
    let a = forward(&replaced, &toks, &mut FullPrecision(&replaced)).unwrap();
    let mut p = MatrixProvider::static_bits(&weights, &bits).unwrap();
    let b = forward(&m, &toks, &mut p).unwrap();
    assert_eq!(a, b);
}

#[test]
fn f32_and_f64_models_quantize_alike() {
    let m: ModelWeights<f64> = init_model(8, ModelConfig::tiny()).unwrap();
    let m32: ModelWeights<f32> = m.cast();
    let a = QuantStore::quantize_model(&m.cast::<f32>().cast::<f64>(), 6, 3).unwrap();
    let b = QuantStore::quantize_model(&m32, 6, 3).unwrap();
    assert_eq!(a.layers, b.layers);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codes_nest_across_bits(rows in 1usize..12, cols in 1usize..12, seed in 0u64..1000, b_min in 1u8..4) {
        let w = random_matrix(rows, cols, seed);
        let q = quantize_layer(&w, 6, b_min).unwrap();
        for b in b_min..6 {
            let lo = q.codes_at(b).unwrap();
            let hi = q.codes_at(b + 1).unwrap();
            prop_assert!(lo.iter().zip(&hi).all(|(&l, &h)| h >> 1 == l));
        }
    }

    #[test]
    fn neighbour_delta_is_exact(seed in 0u64..1000) {
        let w = random_matrix(6, 9, seed);
        let q = quantize_layer(&w, 5, 2).unwrap();
        for l in 2..5u8 {
            let d = q.delta::<f64>(l, l + 1).unwrap();
            let mut sum = q.dequantize::<f64>(l).unwrap();
            sum.add_assign(&d);
            prop_assert_eq!(sum, q.dequantize::<f64>(l + 1).unwrap());
        }
    }
}
