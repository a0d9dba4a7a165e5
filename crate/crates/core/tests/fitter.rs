use std::collections::BTreeMap;

use dynprec::fitter::{fit, interpolated_loss, interpolated_weight, sample_grad, FitHyper};
use dynprec::model::{init_model, LayerId, ModelConfig, ModelWeights};
use dynprec::quant::{MaterializedStore, QuantStore};
use dynprec::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    model: ModelWeights<f64>,
    weights: MaterializedStore<f64>,
    samples: Vec<Vec<u32>>,
}

fn fixture(n_samples: usize) -> Fixture {
    let model = init_model(31, ModelConfig::tiny()).unwrap();
    let store = QuantStore::quantize_model(&model, 6, 3).unwrap();
    let weights = MaterializedStore::new(&store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let samples = (0..n_samples)
        .map(|_| (0..12).map(|_| rng.random_range(0..256)).collect())
        .collect();
    Fixture {
        model,
        weights,
        samples,
    }
}

fn params(m: &ModelWeights<f64>) -> BTreeMap<LayerId, u64> {
    m.config
        .layer_ids()
        .into_iter()
        .map(|id| (id, m.config.param_count(id)))
        .collect()
}

fn mean_grads(f: &Fixture, p: &BTreeMap<LayerId, f64>, bounds: &BTreeMap<LayerId, (u8, u8)>) -> BTreeMap<LayerId, f64> {
    let eff = p
        .iter()
        .map(|(&id, &v)| (id, interpolated_weight(&f.weights, id, v)))
        .collect();
    let mut acc: BTreeMap<LayerId, f64> = BTreeMap::new();
    for s in &f.samples {
        let (_, g) = sample_grad(&f.model, &f.weights, &eff, p, bounds, s).unwrap();
        for (id, v) in g {
            *acc.entry(id).or_default() += v / f.samples.len() as f64;
        }
    }
    acc
}

#[test]
fn grad_p_matches_central_differences_at_fractional_p() {
    let f = fixture(3);
    let ids = f.model.config.layer_ids();
    let p: BTreeMap<LayerId, f64> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, 3.2 + 0.17 * (i % 13) as f64))
        .collect();
    let bounds = ids.iter().map(|&id| (id, (3u8, 6u8))).collect();
    let analytic = mean_grads(&f, &p, &bounds);
    let h = 1e-4;
    for &id in &ids {
        let mut plus = p.clone();
        *plus.get_mut(&id).unwrap() += h;
        let mut minus = p.clone();
        *minus.get_mut(&id).unwrap() -= h;
        let fd = (interpolated_loss(&f.model, &f.weights, &plus, &f.samples).unwrap()
            - interpolated_loss(&f.model, &f.weights, &minus, &f.samples).unwrap())
            / (2.0 * h);
        let a = analytic[&id];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
        assert!(rel < 1e-3, "{id}: analytic {a:e} fd {fd:e}");
    }
}

#[test]
fn integer_p_uses_the_cell_above() {
    let f = fixture(2);
    let ids = f.model.config.layer_ids();
    let p: BTreeMap<LayerId, f64> = ids.iter().map(|&id| (id, 4.0)).collect();
    let bounds = ids.iter().map(|&id| (id, (3u8, 6u8))).collect();
    let analytic = mean_grads(&f, &p, &bounds);
    let h = 1e-4;
    let base = interpolated_loss(&f.model, &f.weights, &p, &f.samples).unwrap();
    for &id in ids.iter().take(5) {
        let mut plus = p.clone();
        *plus.get_mut(&id).unwrap() += h;
        let fwd = (interpolated_loss(&f.model, &f.weights, &plus, &f.samples).unwrap() - base) / h;
        let a = analytic[&id];
        // One-sided difference: first-order accurate only.
        assert!((a - fwd).abs() <= 1e-2 * a.abs().max(fwd.abs()).max(1e-9), "{id}: {a:e} vs {fwd:e}");
    }
}

#[test]
fn pinned_layers_get_no_gradient() {
    let f = fixture(1);
    let ids = f.model.config.layer_ids();
    let p: BTreeMap<LayerId, f64> = ids.iter().map(|&id| (id, 3.0)).collect();
    let bounds = ids.iter().map(|&id| (id, (3u8, 3u8))).collect();
    let g = mean_grads(&f, &p, &bounds);
    assert!(g.values().all(|&v| v == 0.0));
}

#[test]
fn fit_respects_bounds_and_reports_accounting() {
    let f = fixture(16);
    let ids = f.model.config.layer_ids();
    let max_bits: BTreeMap<LayerId, u8> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, if i % 3 == 0 { 4 } else { 6 }))
        .collect();
    let out = fit(&f.model, &f.weights, &max_bits, &f.samples, 4.2, &FitHyper::default()).unwrap();
    let m = params(&f.model);
    let manual: f64 = out.params.p.iter().map(|(id, &p)| p * m[id] as f64).sum::<f64>()
        / m.values().sum::<u64>() as f64;
    assert!((out.avg(&m) - manual).abs() < 1e-12);
    for (id, &p) in &out.params.p {
        assert!(p >= 3.0 && p <= max_bits[id] as f64, "{id}: {p}");
    }
    assert!(!out.log.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fit.csv");
    out.write_log_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("alpha,epoch,loss,reg,avg"));
    assert_eq!(text.lines().count(), out.log.len() + 1);
}

#[test]
fn huge_alpha_pins_every_layer_to_target() {
    let f = fixture(16);
    let ids = f.model.config.layer_ids();
    let max_bits: BTreeMap<LayerId, u8> = ids.iter().map(|&id| (id, 6)).collect();
    let hyper = FitHyper {
        alpha: 1e6,
        retry_alpha: None,
        ..FitHyper::default()
    };
    let out = fit(&f.model, &f.weights, &max_bits, &f.samples, 4.5, &hyper).unwrap();
    for (id, &p) in &out.params.p {
        assert!((p - 4.5).abs() <= 0.05, "{id}: {p}");
    }
}

#[test]
fn unreachable_targets_are_infeasible() {
    let f = fixture(2);
    let ids = f.model.config.layer_ids();
    let max_bits: BTreeMap<LayerId, u8> = ids.iter().map(|&id| (id, 5)).collect();
    for target in [2.5, 5.5, f64::NAN] {
        assert!(matches!(
            fit(&f.model, &f.weights, &max_bits, &f.samples, target, &FitHyper::default()),
            Err(Error::Infeasible(_))
        ));
    }
    assert!(matches!(
        fit(&f.model, &f.weights, &max_bits, &[], 4.0, &FitHyper::default()),
        Err(Error::Empty(_))
    ));
}

#[test]
fn fit_is_deterministic_for_a_seed() {
    let f = fixture(10);
    let ids = f.model.config.layer_ids();
    let max_bits: BTreeMap<LayerId, u8> = ids.iter().map(|&id| (id, 6)).collect();
    let a = fit(&f.model, &f.weights, &max_bits, &f.samples, 4.0, &FitHyper::default()).unwrap();
    let b = fit(&f.model, &f.weights, &max_bits, &f.samples, 4.0, &FitHyper::default()).unwrap();
    assert_eq!(a.params, b.params);
}
