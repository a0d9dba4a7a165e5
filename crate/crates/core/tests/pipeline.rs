use std::path::{Path, PathBuf};

use dynprec::config::RunConfig;
use dynprec::pipeline::{
    cmd_decode, cmd_eval, cmd_init_model, cmd_plan, cmd_profile, cmd_quantize, cmd_report,
    load_report, plan_path, report_paths,
};
use dynprec::runtime::PlanMethod;
use dynprec::Error;

const TEXT: &str = "The lock keeper opened the upper gate at dawn and the barges drifted in one by one. \
Gulls waited on the bollards while the water dropped, and a boy counted the rungs of the ladder aloud twice.";

fn config_text(calib: &str) -> String {
    format!(
        r#"budget_bits = 5.0
targets = [4.0, 4.5]

[paths]
model = "art/model.json"
calib_corpus = "{calib}"
eval_corpus = "eval.txt"
store = "art/store.nqs"
profile = "art/profile.dprof"
plan_dir = "art/plans"
report_dir = "art/reports"

[model]
n_blocks = 2
d_model = 16
n_heads = 2
d_ff = 32
vocab = 256
seq_cap = 32
norm_eps = 1e-6

[calibration]
sample_len = 16

[eval]
sample_len = 16
max_samples = 4

[fit]
epochs = 2

[estimator]
k = 8
calib_inputs = 32
calib_epochs = 20
"#
    )
}

fn setup(dir: &Path) -> RunConfig {
    std::fs::write(dir.join("calib.txt"), TEXT).unwrap();
    std::fs::write(dir.join("eval.txt"), &TEXT[40..]).unwrap();
    let path = dir.join("run.toml");
    std::fs::write(&path, config_text("calib.txt")).unwrap();
    RunConfig::load(&path).unwrap()
}

fn prepare(dir: &Path) -> RunConfig {
    let cfg = setup(dir);
    cmd_init_model(&cfg).unwrap();
    cmd_quantize(&cfg).unwrap();
    cmd_profile(&cfg).unwrap();
    cfg
}

#[test]
fn quantize_is_reproducible_and_needs_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    assert!(matches!(cmd_quantize(&cfg), Err(Error::Config(_))));
    let m1 = cmd_init_model(&cfg).unwrap();
    let h1 = cmd_quantize(&cfg).unwrap();
    let m2 = cmd_init_model(&cfg).unwrap();
    let h2 = cmd_quantize(&cfg).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(h1, h2);
}

#[test]
fn doubling_the_corpus_doubles_the_sample_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepare(dir.path());
    let once = cmd_profile(&cfg).unwrap();
    std::fs::write(dir.path().join("twice.txt"), format!("{TEXT}{TEXT}")).unwrap();
    std::fs::write(dir.path().join("run2.toml"), config_text("twice.txt")).unwrap();
    let cfg2 = RunConfig::load(&dir.path().join("run2.toml")).unwrap();
    let twice = cmd_profile(&cfg2).unwrap();
    assert_eq!(TEXT.len() % 16, 0, "corpus should split evenly");
    assert_eq!(twice.n_samples, 2 * once.n_samples);
}

#[test]
fn full_grid_produces_one_row_per_plan() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepare(dir.path());
    let mut plans: Vec<PathBuf> = Vec::new();
    for m in PlanMethod::ALL {
        for &t in &cfg.targets {
            let out = cmd_plan(&cfg, m, t).unwrap();
            assert_eq!(out.path, plan_path(&cfg, m, t));
            plans.push(out.path);
        }
    }
    assert!(plan_path(&cfg, PlanMethod::Dp, 4.0).with_extension("fitlog.csv").exists());
    let report = cmd_eval(&cfg, &[]).unwrap();
    assert_eq!(report.rows.len(), 6);
    assert_eq!(report.eval_samples, 4);
    for r in &report.rows {
        assert!(r.perplexity.is_finite() && r.perplexity_exact.is_finite());
        assert!(r.incurred_error_exact <= r.static_matched_error_exact * (1.0 + 1e-12) + 1e-12);
        if r.method == PlanMethod::Dp {
            assert!(r.static_identical.is_none());
        } else {
            assert_eq!(r.static_identical, Some(true));
            assert_eq!(r.static_perplexity, Some(r.perplexity));
        }
    }
    assert_eq!(report.ordering.len(), 2);
    let (json, csv) = report_paths(&cfg);
    assert_eq!(load_report(&json).unwrap(), report);
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 7);
    let table = cmd_report(&cfg, None).unwrap();
    assert!(table.contains("hawq_v2") && table.contains("llm_mq"));

    let out = cmd_decode(&cfg, &plans[0], "The lock", 5).unwrap();
    assert_eq!(out.generated.len(), 5);
    let reports = cfg.resolve(&cfg.paths.report_dir);
    assert!(reports.join("decode_trace.csv").exists());
    assert!(reports.join("decode_summary.json").exists());
    assert!(matches!(
        cmd_decode(&cfg, &dir.path().join("missing.json"), "x", 2),
        Err(Error::Config(_))
    ));
}

#[test]
fn eval_refuses_a_requantized_store() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = prepare(dir.path());
    let out = cmd_plan(&cfg, PlanMethod::LlmMq, 4.0).unwrap();
    cfg.quant.b_min = 2;
    cmd_quantize(&cfg).unwrap();
    assert!(matches!(cmd_eval(&cfg, &[out.path]), Err(Error::Provenance(_))));
}

#[test]
fn eval_refuses_a_changed_profile() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = prepare(dir.path());
    let out = cmd_plan(&cfg, PlanMethod::HawqV2, 4.0).unwrap();
    cfg.calibration.max_samples = Some(3);
    cmd_profile(&cfg).unwrap();
    assert!(matches!(cmd_eval(&cfg, &[out.path]), Err(Error::Provenance(_))));
}

#[test]
fn infeasible_targets_and_bad_configs_are_typed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepare(dir.path());
    assert!(matches!(cmd_plan(&cfg, PlanMethod::Dp, 5.5), Err(Error::Infeasible(_))));
    assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
    assert!(matches!(
        RunConfig::load(&dir.path().join("nope.toml")),
        Err(Error::Config(_))
    ));
}
