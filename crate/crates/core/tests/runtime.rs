use std::collections::BTreeMap;
use std::sync::OnceLock;

use dynprec::estimator::{AsyncSource, EstimatorSettings};
use dynprec::model::{init_model, model_hash, LayerId, ModelConfig, ModelWeights};
use dynprec::pipeline::{baseline_assignment, runs_identical};
use dynprec::quant::{MaterializedStore, QuantStore};
use dynprec::runtime::{
    compile_plan, decode, eval_perplexity, nearest_rank, qos_stats, DynamicProvider, EvalMode,
    PlanMethod, PrecisionPlan, Provenance, RuntimeOptions, TraceSummary,
};
use dynprec::sensitivity::profile;
use dynprec::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    model: ModelWeights<f64>,
    store: QuantStore,
    weights: MaterializedStore<f64>,
    samples: Vec<Vec<u32>>,
    baselines: Vec<PrecisionPlan>,
    dp: PrecisionPlan,
}

fn samples(n: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(0..256)).collect())
        .collect()
}

fn provenance(model: &ModelWeights<f64>, store: &QuantStore) -> Provenance {
    Provenance {
        model_hash: model_hash(model),
        store_hash: store.hash(),
        profile_hash: None,
        corpus_hash: None,
        fit: None,
        estimator: None,
        budget_bits: Some(5.0),
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let model = init_model(51, ModelConfig::tiny()).unwrap();
        let store = QuantStore::quantize_model(&model, 6, 3).unwrap();
        let weights = MaterializedStore::new(&store).unwrap();
        let calib = samples(8, 16, 1);
        let prof = profile(&model, &store, &weights, &calib).unwrap();
        let ids = model.config.layer_ids();
        let params: BTreeMap<LayerId, u64> =
            ids.iter().map(|&id| (id, model.config.param_count(id))).collect();
        let baselines = [PlanMethod::LlmMq, PlanMethod::HawqV2]
            .into_iter()
            .map(|m| {
                let a = baseline_assignment(&prof, &params, m, 5.0, 4.0).unwrap();
                PrecisionPlan::from_static(m, 4.0, &a, &params, &store, provenance(&model, &store))
                    .unwrap()
            })
            .collect();
        let max_bits: BTreeMap<LayerId, u8> = ids.iter().map(|&id| (id, 6)).collect();
        let p: BTreeMap<LayerId, f64> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, if i % 5 == 4 { 5.0 } else { 3.3 + 0.23 * (i % 11) as f64 }))
            .collect();
        let settings = EstimatorSettings {
            k: 8,
            ..EstimatorSettings::default()
        };
        let dp = compile_plan(
            &model,
            &weights,
            &max_bits,
            &p,
            &calib,
            4.3,
            &settings,
            provenance(&model, &store),
        )
        .unwrap()
        .plan;
        Fixture {
            model,
            store,
            weights,
            samples: samples(4, 20, 2),
            baselines,
            dp,
        }
    })
}

#[test]
fn baseline_sentinel_plans_match_static_runs() {
    let f = fixture();
    for plan in &f.baselines {
        let bits = plan.static_bits().expect("baselines are all-sentinel");
        let dynamic = eval_perplexity(
            &f.model,
            &f.weights,
            &f.samples,
            EvalMode::Dynamic(plan, RuntimeOptions::default()),
        )
        .unwrap();
        let fixed = eval_perplexity(&f.model, &f.weights, &f.samples, EvalMode::Static(&bits)).unwrap();
        assert!(runs_identical(&dynamic, &fixed), "{}", plan.method);
        assert_eq!(dynamic.loss, fixed.loss);
    }
}

#[test]
fn forced_dp_plans_match_static_runs() {
    let f = fixture();
    assert!(f.dp.static_bits().is_none());
    for high in [false, true] {
        let forced = f.dp.forced(high);
        let bits = forced.static_bits().unwrap();
        assert_eq!(bits, f.dp.extreme_bits(high));
        let dynamic = eval_perplexity(
            &f.model,
            &f.weights,
            &f.samples,
            EvalMode::Dynamic(&forced, RuntimeOptions::default()),
        )
        .unwrap();
        let fixed = eval_perplexity(&f.model, &f.weights, &f.samples, EvalMode::Static(&bits)).unwrap();
        assert!(runs_identical(&dynamic, &fixed), "high = {high}");
    }
}

#[test]
fn plan_json_round_trip_keeps_hash() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    for plan in f.baselines.iter().chain([&f.dp]) {
        let path = dir.path().join(format!("{}.json", plan.method));
        let h = plan.save(&path).unwrap();
        assert_eq!(h, plan.hash());
        let back = PrecisionPlan::load(&path).unwrap();
        assert_eq!(&back, plan);
        assert_eq!(back.hash(), h);
    }
    assert!(f.dp.to_json().contains("inf"));
}

#[test]
fn invalid_plans_are_rejected() {
    let f = fixture();
    let mut p = f.dp.clone();
    p.version = 99;
    assert!(matches!(p.validate(), Err(Error::Config(_))));

    let i = f.dp.layers.iter().position(|l| l.is_dynamic()).unwrap();
    let mut p = f.dp.clone();
    p.layers[i].p = p.layers[i].pair().1 as f64 + 0.5;
    assert!(p.validate().is_err());

    let mut p = f.dp.clone();
    p.layers[i].b_max = p.layers[i].pair().0;
    assert!(p.validate().is_err());

    let mut p = f.baselines[0].clone();
    p.layers[0].threshold.t = 0.5;
    assert!(p.validate().is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{ not json").unwrap();
    assert!(matches!(PrecisionPlan::load(&path), Err(Error::Format { .. })));
}

#[test]
fn plans_refuse_foreign_models_and_stores() {
    let f = fixture();
    f.dp.check_provenance(&f.model, &f.store).unwrap();
    let other = init_model(52, ModelConfig::tiny()).unwrap();
    assert!(matches!(f.dp.check_provenance(&other, &f.store), Err(Error::Provenance(_))));
    let store5 = QuantStore::quantize_model(&f.model, 5, 3).unwrap();
    assert!(matches!(f.dp.check_provenance(&f.model, &store5), Err(Error::Provenance(_))));
    let w5 = MaterializedStore::new(&store5).unwrap();
    assert!(matches!(
        DynamicProvider::new(&f.dp, &w5, RuntimeOptions::default()),
        Err(Error::Provenance(_))
    ));
}

#[test]
fn decode_records_one_step_per_new_token() {
    let f = fixture();
    let prompt: Vec<u32> = b"the ferry".iter().map(|&b| b as u32).collect();
    for source in [AsyncSource::PreviousToken, AsyncSource::PrecedingBlock] {
        for prime in [true, false] {
            let opts = RuntimeOptions {
                async_source: source,
                prime_async: prime,
                ..RuntimeOptions::default()
            };
            let a = decode(&f.model, &f.weights, &f.dp, &prompt, 6, opts).unwrap();
            let b = decode(&f.model, &f.weights, &f.dp, &prompt, 6, opts).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.generated.len(), 6);
            assert_eq!(a.trace.steps.len(), 6);
            for (i, s) in a.trace.steps.iter().enumerate() {
                assert_eq!(s.step, i);
                assert_eq!(s.position, prompt.len() - 1 + i);
                for (l, &bit) in a.trace.layers.iter().zip(&s.bits) {
                    let lp = f.dp.layer(*l).unwrap();
                    let (lo, hi) = lp.pair();
                    assert!(bit == lo || bit == hi);
                }
            }
        }
    }
    assert!(matches!(
        decode(&f.model, &f.weights, &f.dp, &[], 3, RuntimeOptions::default()),
        Err(Error::Empty(_))
    ));
    assert!(decode(&f.model, &f.weights, &f.dp, &prompt, 40, RuntimeOptions::default()).is_err());
}

/// A static plan decodes at its average bits and spends nothing on estimation.
#[test]
fn static_decode_effective_bits_equal_plan_average() {
    let f = fixture();
    let plan = &f.baselines[0];
    let out = decode(&f.model, &f.weights, plan, &[65, 66, 67], 5, RuntimeOptions::default()).unwrap();
    for s in &out.trace.steps {
        assert!((s.effective_bits - plan.avg_p()).abs() < 1e-12);
        assert!(s.estimates.iter().all(Option::is_none));
    }
    assert_eq!(out.trace.estimator_ops, 0);
}

#[test]
fn exact_selection_incurs_no_more_than_matched_static() {
    let f = fixture();
    let run = eval_perplexity(
        &f.model,
        &f.weights,
        &f.samples,
        EvalMode::Dynamic(&f.dp, RuntimeOptions::exact()),
    )
    .unwrap();
    let trace = run.merged_trace().unwrap();
    for (i, t) in trace.tallies.iter().enumerate() {
        let matched = (1.0 - t.high as f64 / t.rows as f64) * t.error_total;
        assert!(t.incurred_error <= matched * (1.0 + 1e-12) + 1e-12, "{}", trace.layers[i]);
    }
    assert!(trace.incurred_error() <= trace.static_matched_error() * (1.0 + 1e-12));
    assert!(trace.estimator_ops > 0);
}

#[test]
fn trace_files_have_expected_shape() {
    let f = fixture();
    let out = decode(&f.model, &f.weights, &f.dp, &[70, 71], 4, RuntimeOptions::exact()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    let js = dir.path().join("s.json");
    out.trace.write_csv(&csv).unwrap();
    out.trace.write_summary_json(&js).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("step,position,layer,bit,estimate"));
    assert_eq!(text.lines().count(), 1 + 4 * out.trace.layers.len());
    let s: TraceSummary = serde_json::from_str(&std::fs::read_to_string(&js).unwrap()).unwrap();
    assert_eq!(s.steps, 4);
    assert!((s.mean_effective_bits - out.trace.mean_effective_bits()).abs() < 1e-12);
    assert_eq!(s.high_rate.len(), out.trace.layers.len());
}

#[test]
fn qos_matches_sorted_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs: Vec<f64> = (0..37).map(|_| rng.random_range(3.5..4.5)).collect();
    let q = qos_stats(4.0, &xs).unwrap();
    let mut sorted = xs.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    // ceil(0.9 * 37) = 34, ceil(0.99 * 37) = 37.
    assert_eq!(q.p90, sorted[33]);
    assert_eq!(q.p99, sorted[36]);
    assert_eq!(nearest_rank(&sorted, 0.9), sorted[33]);
    assert!((q.mean - mean).abs() < 1e-12);
    assert!((q.p90_delta_pct - 100.0 * (sorted[33] - mean) / mean).abs() < 1e-9);
    assert!(qos_stats(4.0, &[]).is_err());
}
