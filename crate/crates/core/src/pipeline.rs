//! Commands that chain the stages together through files on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocator::{problem_from_profile, sweep_static, BitAssignment};
use crate::config::RunConfig;
use crate::corpus::{samples_hash, Corpus};
use crate::error::{Error, Result};
use crate::fitter::{fit, FitOutcome};
use crate::model::{export_weights, init_model, load_weights, model_hash, LayerId, ModelWeights};
use crate::quant::{short, MaterializedStore, QuantStore};
use crate::runtime::{
    compile_plan, decode, eval_perplexity, qos_stats, DecodeOutput, EvalMode, EvalResult,
    PlanMethod, PrecisionPlan, Provenance, RuntimeOptions,
};
use crate::sensitivity::{profile, ScoreKind, SensitivityProfile};

pub const REPORT_VERSION: u32 = 1;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

/// Model, store and profile loaded together, with their chain checked.
pub struct Artifacts {
    pub model: ModelWeights<f64>,
    pub store: QuantStore,
    pub weights: MaterializedStore<f64>,
    pub profile: Option<SensitivityProfile>,
}

impl Artifacts {
    pub fn load(cfg: &RunConfig, with_profile: bool) -> Result<Self> {
        let model = load_model(cfg)?;
        let store = QuantStore::load(&cfg.input(&cfg.paths.store)?)?;
        store.check_model(&model)?;
        let weights = MaterializedStore::new(&store)?;
        let profile = if with_profile {
            let prof = SensitivityProfile::load(&cfg.input(&cfg.paths.profile)?)?;
            if prof.model_hash != store.model_hash || prof.store_hash != store.hash() {
                return Err(Error::Provenance(format!(
                    "profile was built from store {}, current store is {}",
                    short(&prof.store_hash),
                    short(&store.hash())
                )));
            }
            Some(prof)
        } else {
            None
        };
        Ok(Self {
            model,
            store,
            weights,
            profile,
        })
    }

    pub fn params(&self) -> BTreeMap<LayerId, u64> {
        self.model
            .config
            .layer_ids()
            .into_iter()
            .map(|id| (id, self.model.config.param_count(id)))
            .collect()
    }
}

fn load_model(cfg: &RunConfig) -> Result<ModelWeights<f64>> {
    let model: ModelWeights<f64> = load_weights(&cfg.input(&cfg.paths.model)?)?;
    if model.config != cfg.model {
        return Err(Error::Config(format!(
            "model file has {:?}, config asks for {:?}",
            model.config, cfg.model
        )));
    }
    Ok(model)
}

pub fn calib_samples(cfg: &RunConfig) -> Result<Vec<Vec<u32>>> {
    corpus_samples(cfg, &cfg.paths.calib_corpus, cfg.calibration)
}

pub fn eval_samples(cfg: &RunConfig) -> Result<Vec<Vec<u32>>> {
    corpus_samples(cfg, &cfg.paths.eval_corpus, cfg.eval)
}

fn corpus_samples(
    cfg: &RunConfig,
    path: &Path,
    s: crate::config::SampleConfig,
) -> Result<Vec<Vec<u32>>> {
    let corpus = Corpus::load(&cfg.input(path)?)?;
    let samples = corpus.samples(s.sample_len, s.max_samples);
    if samples.is_empty() {
        return Err(Error::Empty(format!(
            "{} is shorter than one sample of {} bytes",
            path.display(),
            s.sample_len
        )));
    }
    Ok(samples)
}

/// Write fresh random weights; returns the model hash.
pub fn cmd_init_model(cfg: &RunConfig) -> Result<String> {
    let model: ModelWeights<f64> = init_model(cfg.seeds.model, cfg.model)?;
    let path = cfg.resolve(&cfg.paths.model);
    ensure_parent(&path)?;
    export_weights(&model, &path)?;
    Ok(model_hash(&model))
}

/// Quantize every linear layer; returns the store hash.
pub fn cmd_quantize(cfg: &RunConfig) -> Result<String> {
    let model = load_model(cfg)?;
    let store = QuantStore::quantize_model(&model, cfg.quant.n_bits, cfg.quant.b_min)?;
    let path = cfg.resolve(&cfg.paths.store);
    ensure_parent(&path)?;
    store.save(&path)
}

pub fn cmd_profile(cfg: &RunConfig) -> Result<SensitivityProfile> {
    let a = Artifacts::load(cfg, false)?;
    let samples = calib_samples(cfg)?;
    let prof = profile(&a.model, &a.store, &a.weights, &samples)?;
    let path = cfg.resolve(&cfg.paths.profile);
    ensure_parent(&path)?;
    prof.save(&path)?;
    Ok(prof)
}

pub fn plan_path(cfg: &RunConfig, method: PlanMethod, target: f64) -> PathBuf {
    cfg.resolve(&cfg.paths.plan_dir)
        .join(format!("{}_{target:.2}.json", method.name()))
}

pub struct PlanOutcome {
    pub plan: PrecisionPlan,
    pub path: PathBuf,
    pub hash: String,
    /// Phase-1 assignment (dp) or the static assignment (baselines).
    pub assignment: BitAssignment,
    pub fit: Option<FitOutcome>,
}

fn baseline_kind(method: PlanMethod) -> ScoreKind {
    match method {
        PlanMethod::Dp => ScoreKind::SecondOrder,
        PlanMethod::LlmMq => ScoreKind::FirstOrder,
        PlanMethod::HawqV2 => ScoreKind::Hawq,
    }
}

/// Static baseline assignment: per-layer caps from the method's own scores at
/// the memory budget, then the lower-bound sweep toward `target` under them.
pub fn baseline_assignment(
    prof: &SensitivityProfile,
    params: &BTreeMap<LayerId, u64>,
    method: PlanMethod,
    budget_bits: f64,
    target: f64,
) -> Result<BitAssignment> {
    let kind = baseline_kind(method);
    let caps = problem_from_profile(prof, kind, params, budget_bits)?.solve()?;
    let mut problem = problem_from_profile(prof, kind, params, budget_bits)?;
    problem.caps = Some(problem.layers.iter().map(|id| caps.bits[id]).collect());
    sweep_static(problem, target)
}

pub fn cmd_plan(cfg: &RunConfig, method: PlanMethod, target: f64) -> Result<PlanOutcome> {
    let a = Artifacts::load(cfg, true)?;
    let prof = a.profile.as_ref().expect("profile loaded");
    let params = a.params();
    let calib = calib_samples(cfg)?;
    let mut provenance = Provenance {
        model_hash: a.store.model_hash.clone(),
        store_hash: a.store.hash(),
        profile_hash: Some(prof.hash()),
        corpus_hash: Some(samples_hash(&calib)),
        fit: None,
        estimator: None,
        budget_bits: Some(cfg.budget_bits),
    };
    let path = plan_path(cfg, method, target);
    ensure_parent(&path)?;
    let (plan, assignment, fit_out) = match method {
        PlanMethod::Dp => {
            let phase1 =
                problem_from_profile(prof, ScoreKind::SecondOrder, &params, cfg.budget_bits)?
                    .solve()?;
            let hyper = cfg.fit_hyper();
            let out = fit(&a.model, &a.weights, &phase1.bits, &calib, target, &hyper)?;
            out.write_log_csv(&path.with_extension("fitlog.csv"))?;
            let settings = cfg.estimator_settings();
            provenance.fit = Some(hyper);
            provenance.estimator = Some(settings.clone());
            let mut compiled = compile_plan(
                &a.model,
                &a.weights,
                &phase1.bits,
                &out.params.p,
                &calib,
                target,
                &settings,
                provenance,
            )?;
            let gap = (compiled.plan.avg_p() - target).abs();
            if gap > crate::fitter::FIT_TOLERANCE {
                compiled.plan.warnings.push(format!(
                    "fitted average {:.4} misses target {target} by {gap:.4}",
                    compiled.plan.avg_p()
                ));
            }
            (compiled.plan, phase1, Some(out))
        }
        _ => {
            let assignment = baseline_assignment(prof, &params, method, cfg.budget_bits, target)?;
            if let Some(w) = &assignment.warning {
                log::warn!("{method} at {target}: {w}");
            }
            let plan = PrecisionPlan::from_static(method, target, &assignment, &params, &a.store, provenance)?;
            (plan, assignment, None)
        }
    };
    let hash = plan.save(&path)?;
    Ok(PlanOutcome {
        plan,
        path,
        hash,
        assignment,
        fit: fit_out,
    })
}

/// One (method, target) cell of the comparison grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: PlanMethod,
    pub target: f64,
    pub plan_hash: String,
    pub plan_avg_bits: f64,
    pub perplexity: f64,
    pub effective_bits: f64,
    pub estimator_ops: u64,
    pub incurred_error: f64,
    pub static_matched_error: f64,
    pub perplexity_exact: f64,
    pub effective_bits_exact: f64,
    pub estimator_ops_exact: u64,
    pub incurred_error_exact: f64,
    pub static_matched_error_exact: f64,
    pub qos_mean: f64,
    pub qos_p90: f64,
    pub qos_p99: f64,
    pub qos_p90_delta_pct: f64,
    pub qos_p99_delta_pct: f64,
    /// Baselines only: perplexity of the plain static run.
    pub static_perplexity: Option<f64>,
    /// Baselines only: whether the sentinel run matched the static run bit for bit.
    pub static_identical: Option<bool>,
    pub warnings: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetOrdering {
    pub target: f64,
    /// Methods from lowest to highest perplexity.
    pub by_perplexity: Vec<PlanMethod>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub model_hash: String,
    pub store_hash: String,
    pub eval_corpus_hash: String,
    pub eval_samples: usize,
    pub fp_perplexity: f64,
    pub rows: Vec<ReportRow>,
    pub ordering: Vec<TargetOrdering>,
}

/// Whether two runs produced identical logits, losses and per-step bits.
pub fn runs_identical(a: &EvalResult, b: &EvalResult) -> bool {
    a.logits == b.logits
        && a.loss.mean_loss.to_bits() == b.loss.mean_loss.to_bits()
        && a.traces.len() == b.traces.len()
        && a.traces.iter().zip(&b.traces).all(|(x, y)| {
            x.layers == y.layers
                && x.steps.len() == y.steps.len()
                && x.steps.iter().zip(&y.steps).all(|(s, t)| {
                    s.position == t.position
                        && s.bits == t.bits
                        && s.effective_bits.to_bits() == t.effective_bits.to_bits()
                })
        })
}

pub fn evaluate_plan(
    a: &Artifacts,
    plan: &PrecisionPlan,
    samples: &[Vec<u32>],
    opts: RuntimeOptions,
) -> Result<ReportRow> {
    plan.check_provenance(&a.model, &a.store)?;
    let approx = eval_perplexity(&a.model, &a.weights, samples, EvalMode::Dynamic(plan, opts))?;
    let exact = eval_perplexity(
        &a.model,
        &a.weights,
        samples,
        EvalMode::Dynamic(plan, RuntimeOptions::exact()),
    )?;
    let ta = approx.merged_trace().expect("dynamic runs trace");
    let te = exact.merged_trace().expect("dynamic runs trace");
    let qos = qos_stats(plan.target_bits, &approx.per_query_bits())?;
    let (static_perplexity, static_identical) = match (plan.method, plan.static_bits()) {
        (PlanMethod::Dp, _) | (_, None) => (None, None),
        (_, Some(bits)) => {
            let st = eval_perplexity(&a.model, &a.weights, samples, EvalMode::Static(&bits))?;
            (Some(st.loss.perplexity), Some(runs_identical(&approx, &st)))
        }
    };
    Ok(ReportRow {
        method: plan.method,
        target: plan.target_bits,
        plan_hash: plan.hash(),
        plan_avg_bits: plan.avg_p(),
        perplexity: approx.loss.perplexity,
        effective_bits: ta.mean_effective_bits(),
        estimator_ops: ta.estimator_ops,
        incurred_error: ta.incurred_error(),
        static_matched_error: ta.static_matched_error(),
        perplexity_exact: exact.loss.perplexity,
        effective_bits_exact: te.mean_effective_bits(),
        estimator_ops_exact: te.estimator_ops,
        incurred_error_exact: te.incurred_error(),
        static_matched_error_exact: te.static_matched_error(),
        qos_mean: qos.mean,
        qos_p90: qos.p90,
        qos_p99: qos.p99,
        qos_p90_delta_pct: qos.p90_delta_pct,
        qos_p99_delta_pct: qos.p99_delta_pct,
        static_perplexity,
        static_identical,
        warnings: plan.warnings.join("; "),
    })
}

/// Plans in `plan_dir`, sorted by file name.
pub fn discover_plans(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg.input(&cfg.paths.plan_dir)?;
    let mut out: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}

/// Evaluate plans over the eval corpus and write `report.json` and
/// `report.csv` into the report directory.
pub fn cmd_eval(cfg: &RunConfig, plans: &[PathBuf]) -> Result<Report> {
    let a = Artifacts::load(cfg, false)?;
    let plan_files = if plans.is_empty() {
        discover_plans(cfg)?
    } else {
        plans.to_vec()
    };
    if plan_files.is_empty() {
        return Err(Error::Config("no plans to evaluate".into()));
    }
    let loaded = plan_files
        .iter()
        .map(|p| {
            let plan = PrecisionPlan::load(p)?;
            plan.check_provenance(&a.model, &a.store)?;
            Ok(plan)
        })
        .collect::<Result<Vec<_>>>()?;
    let profile_path = cfg.resolve(&cfg.paths.profile);
    if profile_path.exists() {
        let current = SensitivityProfile::load(&profile_path)?.hash();
        for (plan, path) in loaded.iter().zip(&plan_files) {
            if let Some(h) = &plan.provenance.profile_hash {
                if *h != current {
                    return Err(Error::Provenance(format!(
                        "{} was planned from profile {}, current profile is {}",
                        path.display(),
                        short(h),
                        short(&current)
                    )));
                }
            }
        }
    }
    let samples = eval_samples(cfg)?;
    let fp = eval_perplexity(&a.model, &a.weights, &samples, EvalMode::Fp)?;
    let opts = cfg.runtime_options();
    let mut rows = loaded
        .iter()
        .map(|plan| evaluate_plan(&a, plan, &samples, opts))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|x, y| {
        x.method
            .cmp(&y.method)
            .then(x.target.total_cmp(&y.target))
    });
    let report = Report {
        version: REPORT_VERSION,
        model_hash: a.store.model_hash.clone(),
        store_hash: a.store.hash(),
        eval_corpus_hash: samples_hash(&samples),
        eval_samples: samples.len(),
        fp_perplexity: fp.loss.perplexity,
        ordering: ordering(&rows),
        rows,
    };
    write_report(cfg, &report)?;
    Ok(report)
}

fn ordering(rows: &[ReportRow]) -> Vec<TargetOrdering> {
    let mut targets: Vec<f64> = rows.iter().map(|r| r.target).collect();
    targets.sort_by(f64::total_cmp);
    targets.dedup();
    targets
        .into_iter()
        .map(|t| {
            let mut at: Vec<&ReportRow> = rows.iter().filter(|r| r.target == t).collect();
            at.sort_by(|a, b| a.perplexity.total_cmp(&b.perplexity));
            TargetOrdering {
                target: t,
                by_perplexity: at.iter().map(|r| r.method).collect(),
            }
        })
        .collect()
}

pub fn report_paths(cfg: &RunConfig) -> (PathBuf, PathBuf) {
    let dir = cfg.resolve(&cfg.paths.report_dir);
    (dir.join("report.json"), dir.join("report.csv"))
}

fn write_report(cfg: &RunConfig, report: &Report) -> Result<()> {
    let (json, csv_path) = report_paths(cfg);
    ensure_parent(&json)?;
    fs::write(&json, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&json, e))?;
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| crate::fitter::csv_err(&csv_path, e))?;
    for row in &report.rows {
        w.serialize(row).map_err(|e| crate::fitter::csv_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

pub fn load_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: Report =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if report.version != REPORT_VERSION {
        return Err(Error::format(path, format!("unsupported report version {}", report.version)));
    }
    Ok(report)
}

/// Plain-text table of a report.
pub fn render_report(report: &Report) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "eval samples {}  fp perplexity {:.4}  model {}  store {}",
        report.eval_samples,
        report.fp_perplexity,
        short(&report.model_hash),
        short(&report.store_hash)
    );
    let _ = writeln!(
        s,
        "{:<8} {:>6} {:>10} {:>7} {:>10} {:>7} {:>12} {:>12} {:>8} {:>8}  plan",
        "method", "target", "ppl", "bits", "ppl_exact", "bits_x", "incurred_x", "matched_x", "p90_%", "p99_%"
    );
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{:<8} {:>6.2} {:>10.4} {:>7.3} {:>10.4} {:>7.3} {:>12.4} {:>12.4} {:>8.3} {:>8.3}  {}",
            r.method.name(),
            r.target,
            r.perplexity,
            r.effective_bits,
            r.perplexity_exact,
            r.effective_bits_exact,
            r.incurred_error_exact,
            r.static_matched_error_exact,
            r.qos_p90_delta_pct,
            r.qos_p99_delta_pct,
            short(&r.plan_hash)
        );
    }
    for o in &report.ordering {
        let names: Vec<&str> = o.by_perplexity.iter().map(|m| m.name()).collect();
        let _ = writeln!(s, "target {:.2}: {}", o.target, names.join(" < "));
    }
    s
}

pub fn cmd_report(cfg: &RunConfig, path: Option<&Path>) -> Result<String> {
    let p = match path {
        Some(p) => p.to_path_buf(),
        None => report_paths(cfg).0,
    };
    Ok(render_report(&load_report(&p)?))
}

/// Greedy decode from `prompt`; writes the per-step trace next to the reports.
pub fn cmd_decode(
    cfg: &RunConfig,
    plan_file: &Path,
    prompt: &str,
    n_new: usize,
) -> Result<DecodeOutput> {
    let a = Artifacts::load(cfg, false)?;
    if !plan_file.exists() {
        return Err(Error::Config(format!("plan {} does not exist", plan_file.display())));
    }
    let plan = PrecisionPlan::load(plan_file)?;
    plan.check_provenance(&a.model, &a.store)?;
    let tokens: Vec<u32> = prompt.bytes().map(u32::from).collect();
    let out = decode(&a.model, &a.weights, &plan, &tokens, n_new, cfg.runtime_options())?;
    let dir = cfg.resolve(&cfg.paths.report_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    out.trace.write_csv(&dir.join("decode_trace.csv"))?;
    out.trace.write_summary_json(&dir.join("decode_summary.json"))?;
    Ok(out)
}
