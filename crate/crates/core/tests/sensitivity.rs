use dynprec::model::{backward, init_model, BackwardOptions, FullPrecision, ModelConfig, ModelWeights};
use dynprec::quant::{MaterializedStore, QuantStore};
use dynprec::sensitivity::{profile, ScoreKind, SensitivityProfile};
use dynprec::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    model: ModelWeights<f64>,
    store: QuantStore,
    weights: MaterializedStore<f64>,
}

fn fixture() -> Fixture {
    let model = init_model(21, ModelConfig::tiny()).unwrap();
    let store = QuantStore::quantize_model(&model, 5, 2).unwrap();
    let weights = MaterializedStore::new(&store).unwrap();
    Fixture {
        model,
        store,
        weights,
    }
}

fn samples(n: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(0..256)).collect())
        .collect()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn fisher_matches_per_sample_gradient_squares() {
    let f = fixture();
    let s = samples(5, 10, 1);
    let prof = profile(&f.model, &f.store, &f.weights, &s).unwrap();
    for id in f.model.config.layer_ids() {
        let (r, c) = f.model.config.linear_shape(id.kind);
        let mut fisher = vec![0.0; r * c];
        let mut gsum = vec![0.0; r * c];
        for tokens in &s {
            let pass = backward(&f.model, tokens, &mut FullPrecision(&f.model), BackwardOptions::default()).unwrap();
            let g = pass.grads.weight_grad(id).unwrap();
            for (k, v) in g.as_slice().iter().enumerate() {
                fisher[k] += v * v;
                gsum[k] += v;
            }
        }
        for k in 0..r * c {
            assert!(rel_close(prof.fisher[&id].as_slice()[k], fisher[k], 1e-12));
            assert!((prof.grad_sum[&id].as_slice()[k] - gsum[k]).abs() <= 1e-12 * gsum[k].abs().max(1e-6));
        }
    }
}

#[test]
fn permutation_invariant_scores() {
    let f = fixture();
    let s = samples(11, 8, 2);
    let a = profile(&f.model, &f.store, &f.weights, &s).unwrap();
    let mut rev = s.clone();
    rev.reverse();
    rev.swap(0, 5);
    let b = profile(&f.model, &f.store, &f.weights, &rev).unwrap();
    for kind in [ScoreKind::SecondOrder, ScoreKind::FirstOrder, ScoreKind::Hawq] {
        for (id, row) in a.table(kind) {
            for (x, y) in row.iter().zip(&b.table(kind)[id]) {
                assert!(rel_close(*x, *y, 1e-12), "{kind:?} {id}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn duplicate_sample_doubles_fisher() {
    let f = fixture();
    let one = samples(1, 9, 3);
    let two = vec![one[0].clone(), one[0].clone()];
    let a = profile(&f.model, &f.store, &f.weights, &one).unwrap();
    let b = profile(&f.model, &f.store, &f.weights, &two).unwrap();
    assert_eq!(b.n_samples, 2);
    for (id, m) in &a.fisher {
        for (x, y) in m.as_slice().iter().zip(b.fisher[id].as_slice()) {
            assert!(rel_close(2.0 * x, *y, 1e-12));
        }
    }
}

#[test]
fn scores_cover_every_layer_and_bit() {
    let f = fixture();
    let prof = profile(&f.model, &f.store, &f.weights, &samples(3, 6, 4)).unwrap();
    for id in f.model.config.layer_ids() {
        for b in 2..=5 {
            for kind in [ScoreKind::SecondOrder, ScoreKind::FirstOrder, ScoreKind::Hawq] {
                let s = prof.score(kind, id, b).unwrap();
                assert!(s.is_finite() && s >= 0.0);
            }
        }
        let row = &prof.table(ScoreKind::SecondOrder)[&id];
        assert!(row[row.len() - 1] <= row[0]);
    }
    assert!(prof.score(ScoreKind::Hawq, f.model.config.layer_ids()[0], 6).is_err());
}

#[test]
fn profile_file_round_trip_is_deterministic() {
    let f = fixture();
    let s = samples(4, 7, 5);
    let a = profile(&f.model, &f.store, &f.weights, &s).unwrap();
    let b = profile(&f.model, &f.store, &f.weights, &s).unwrap();
    assert_eq!(a.hash(), b.hash());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.dprof");
    let h = a.save(&path).unwrap();
    let back = SensitivityProfile::load(&path).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.hash(), h);
    let bytes = std::fs::read(&path).unwrap();
    assert!(SensitivityProfile::from_bytes(&bytes[..bytes.len() - 8], &path).is_err());
}

#[test]
fn empty_corpus_is_rejected() {
    let f = fixture();
    assert!(matches!(
        profile(&f.model, &f.store, &f.weights, &[]),
        Err(Error::Empty(_))
    ));
}
