use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plan::PrecisionPlan;
use crate::allocator::weighted_avg;
use crate::error::{Error, Result};
use crate::estimator::{exact_error, AsyncSource, EstimatorKind, InputSource};
use crate::fitter::write_csv;
use crate::model::{
    token_losses, LayerId, LossReport, ModelWeights, Session, WeightProvider,
};
use crate::num::{dot, Scalar};
use crate::provider::MatrixProvider;
use crate::quant::MaterializedStore;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeOptions {
    /// Replace every estimator with `‖ΔW x‖` on the immediate input.
    pub force_exact: bool,
    pub async_source: AsyncSource,
    /// Seed the previous-token buffers from the last prefill position.
    pub prime_async: bool,
    /// Record exact errors of every row for incurred-error accounting.
    pub track_error: bool,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        Self {
            force_exact: false,
            async_source: AsyncSource::PreviousToken,
            prime_async: true,
            track_error: false,
        }
    }
}

impl RuntimeOptions {
    pub fn exact() -> Self {
        Self {
            force_exact: true,
            track_error: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub position: usize,
    /// One entry per trace layer.
    pub bits: Vec<u8>,
    pub estimates: Vec<Option<f64>>,
    pub effective_bits: f64,
}

/// Per-layer counters of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerTally {
    pub rows: usize,
    pub high: usize,
    /// Exact errors of every row, summed.
    pub error_total: f64,
    /// Exact errors of the rows served at the low bit.
    pub incurred_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub layers: Vec<LayerId>,
    pub params: Vec<u64>,
    pub steps: Vec<StepRecord>,
    pub tallies: Vec<LayerTally>,
    /// Multiply-adds spent in estimators.
    pub estimator_ops: u64,
}

#[derive(Debug, Clone, Serialize)]
struct TraceRow {
    step: usize,
    position: usize,
    layer: String,
    bit: u8,
    estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub steps: usize,
    pub mean_effective_bits: f64,
    pub estimator_ops: u64,
    pub incurred_error: f64,
    pub static_matched_error: f64,
    pub high_rate: BTreeMap<LayerId, f64>,
}

impl Trace {
    fn empty(layers: Vec<LayerId>, params: Vec<u64>) -> Self {
        let n = layers.len();
        Self {
            layers,
            params,
            steps: Vec::new(),
            tallies: vec![LayerTally::default(); n],
            estimator_ops: 0,
        }
    }

    /// Trace of a static run: every position at the same bits.
    pub fn fixed(
        layers: Vec<LayerId>,
        params: Vec<u64>,
        bits: &BTreeMap<LayerId, u8>,
        positions: std::ops::Range<usize>,
    ) -> Result<Self> {
        let row: Vec<u8> = layers
            .iter()
            .map(|id| bits.get(id).copied().ok_or_else(|| Error::MissingTensor(id.to_string())))
            .collect::<Result<_>>()?;
        let eff = effective_bits(&row, &params);
        let mut trace = Self::empty(layers, params);
        for (step, position) in positions.enumerate() {
            trace.steps.push(StepRecord {
                step,
                position,
                bits: row.clone(),
                estimates: vec![None; row.len()],
                effective_bits: eff,
            });
        }
        for t in &mut trace.tallies {
            t.rows = trace.steps.len();
        }
        Ok(trace)
    }

    pub fn mean_effective_bits(&self) -> f64 {
        if self.steps.is_empty() {
            return f64::NAN;
        }
        self.steps.iter().map(|s| s.effective_bits).sum::<f64>() / self.steps.len() as f64
    }

    pub fn incurred_error(&self) -> f64 {
        self.tallies.iter().map(|t| t.incurred_error).sum()
    }

    /// Expected incurred error of a selection-blind policy with the same
    /// per-layer high rate: `Σ (1 − m/n) · Σ e`.
    pub fn static_matched_error(&self) -> f64 {
        self.tallies
            .iter()
            .filter(|t| t.rows > 0)
            .map(|t| (1.0 - t.high as f64 / t.rows as f64) * t.error_total)
            .sum()
    }

    pub fn high_rate(&self, i: usize) -> f64 {
        let t = &self.tallies[i];
        if t.rows == 0 {
            0.0
        } else {
            t.high as f64 / t.rows as f64
        }
    }

    /// Fold `other` into `self`, renumbering its steps.
    pub fn merge(&mut self, other: &Trace) {
        assert_eq!(self.layers, other.layers, "traces over different layers");
        let base = self.steps.len();
        self.steps.extend(other.steps.iter().cloned().map(|mut s| {
            s.step += base;
            s
        }));
        for (a, b) in self.tallies.iter_mut().zip(&other.tallies) {
            a.rows += b.rows;
            a.high += b.high;
            a.error_total += b.error_total;
            a.incurred_error += b.incurred_error;
        }
        self.estimator_ops += other.estimator_ops;
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            steps: self.steps.len(),
            mean_effective_bits: self.mean_effective_bits(),
            estimator_ops: self.estimator_ops,
            incurred_error: self.incurred_error(),
            static_matched_error: self.static_matched_error(),
            high_rate: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, &id)| (id, self.high_rate(i)))
                .collect(),
        }
    }

    /// Long-format CSV: one row per (step, layer).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<TraceRow> = self
            .steps
            .iter()
            .flat_map(|s| {
                self.layers.iter().enumerate().map(move |(i, id)| TraceRow {
                    step: s.step,
                    position: s.position,
                    layer: id.to_string(),
                    bit: s.bits[i],
                    estimate: s.estimates[i],
                })
            })
            .collect();
        write_csv(path, &rows)
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn effective_bits(bits: &[u8], params: &[u64]) -> f64 {
    weighted_avg(bits.iter().zip(params).map(|(&b, &m)| (b as f64, m)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Prefill,
    Dynamic,
}

/// Serves every layer at its planned bits, choosing between the pair per
/// token from the estimated error.
pub struct DynamicProvider<'a> {
    plan: &'a PrecisionPlan,
    weights: &'a MaterializedStore<f64>,
    opts: RuntimeOptions,
    index: BTreeMap<LayerId, usize>,
    phase: Phase,
    prev_input: BTreeMap<LayerId, Vec<f64>>,
    current: BTreeMap<LayerId, (usize, Matrix<f64>)>,
    steps: BTreeMap<usize, StepRecord>,
    trace: Trace,
}

impl<'a> DynamicProvider<'a> {
    pub fn new(
        plan: &'a PrecisionPlan,
        weights: &'a MaterializedStore<f64>,
        opts: RuntimeOptions,
    ) -> Result<Self> {
        plan.validate()?;
        if plan.n_bits != weights.n_bits() || plan.b_min != weights.b_min() {
            return Err(Error::Provenance(format!(
                "plan serves bits {}..={}, store holds {}..={}",
                plan.b_min,
                plan.n_bits,
                weights.b_min(),
                weights.n_bits()
            )));
        }
        let layers: Vec<LayerId> = plan.layers.iter().map(|l| l.layer).collect();
        let params = plan.layers.iter().map(|l| l.params).collect();
        Ok(Self {
            plan,
            weights,
            opts,
            index: layers.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
            phase: Phase::Dynamic,
            prev_input: BTreeMap::new(),
            current: BTreeMap::new(),
            steps: BTreeMap::new(),
            trace: Trace::empty(layers, params),
        })
    }

    /// Serve every row at `b_max` without recording steps.
    pub fn begin_prefill(&mut self) {
        self.phase = Phase::Prefill;
    }

    pub fn begin_dynamic(&mut self) {
        if self.phase == Phase::Prefill && !self.opts.prime_async {
            self.prev_input.clear();
        }
        self.phase = Phase::Dynamic;
    }

    pub fn into_trace(mut self) -> Trace {
        let params = self.trace.params.clone();
        for (step, (_, mut s)) in std::mem::take(&mut self.steps).into_iter().enumerate() {
            s.step = step;
            s.effective_bits = effective_bits(&s.bits, &params);
            self.trace.steps.push(s);
        }
        self.trace
    }

    fn async_input<'x>(&'x self, id: LayerId, pos: usize, x: &'x [f64]) -> &'x [f64] {
        match self.opts.async_source {
            AsyncSource::PreviousToken => self.prev_input.get(&id).map(Vec::as_slice).unwrap_or(x),
            AsyncSource::PrecedingBlock => {
                let prev = LayerId::new(id.block - 1, id.kind);
                match self.current.get(&prev) {
                    Some((p0, m)) if pos >= *p0 && pos - p0 < m.rows() => m.row(pos - p0),
                    _ => x,
                }
            }
        }
    }
}

fn apply_row(w: &Matrix<f64>, x: &[f64], out: &mut [f64]) {
    for (r, slot) in out.iter_mut().enumerate() {
        *slot = f64::from_f64_lossy(dot(w.row(r), x));
    }
}

impl WeightProvider<f64> for DynamicProvider<'_> {
    fn apply(&mut self, id: LayerId, pos0: usize, xs: &Matrix<f64>) -> Matrix<f64> {
        let i = self.index[&id];
        let lp = &self.plan.layers[i];
        let weights = self.weights;
        if self.phase == Phase::Prefill {
            if xs.rows() > 0 {
                self.prev_input.insert(id, xs.row(xs.rows() - 1).to_vec());
            }
            if self.opts.async_source == AsyncSource::PrecedingBlock {
                self.current.insert(id, (pos0, xs.clone()));
            }
            return weights.weight(id, lp.b_max).apply_rows(xs);
        }
        let (l, h) = lp.pair();
        let delta = (l < h).then(|| weights.neighbor_delta(id, l));
        let (rows, cols) = (weights.weight(id, l).rows(), xs.cols());
        let mut out = Matrix::zeros(xs.rows(), rows);
        let n_layers = self.trace.layers.len();
        for t in 0..xs.rows() {
            let x = xs.row(t);
            let pos = pos0 + t;
            let estimate = match (&lp.estimator, delta) {
                (Some(est), Some(d)) => {
                    let (value, ops) = if self.opts.force_exact {
                        (exact_error(d, x), (rows * cols) as u64)
                    } else {
                        let xe = match est.input_source {
                            InputSource::Immediate => x,
                            InputSource::PreviousResidual => self.async_input(id, pos, x),
                        };
                        (est.estimate(xe, d), est.op_count(rows, cols))
                    };
                    self.trace.estimator_ops += ops;
                    Some(value)
                }
                _ => None,
            };
            let bit = lp.threshold.select(estimate.unwrap_or(0.0));
            apply_row(weights.weight(id, bit), x, out.row_mut(t));

            let tally = &mut self.trace.tallies[i];
            tally.rows += 1;
            if bit == h && l < h {
                tally.high += 1;
            }
            if self.opts.track_error {
                if let Some(d) = delta {
                    let e = exact_error(d, x);
                    tally.error_total += e;
                    if bit == l {
                        tally.incurred_error += e;
                    }
                }
            }
            let step = self.steps.entry(pos).or_insert_with(|| StepRecord {
                step: 0,
                position: pos,
                bits: vec![0; n_layers],
                estimates: vec![None; n_layers],
                effective_bits: 0.0,
            });
            step.bits[i] = bit;
            step.estimates[i] = estimate;
            self.prev_input.insert(id, x.to_vec());
        }
        if self.opts.async_source == AsyncSource::PrecedingBlock {
            self.current.insert(id, (pos0, xs.clone()));
        }
        out
    }
}

/// Estimators that are exact and read the immediate input.
pub fn uses_exact_immediate(plan: &PrecisionPlan) -> bool {
    plan.layers.iter().all(|l| match &l.estimator {
        None => true,
        Some(e) => e.kind == EstimatorKind::Exact && e.input_source == InputSource::Immediate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub generated: Vec<u32>,
    pub trace: Trace,
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding: the prompt minus its last token is prefilled at each
/// layer's `b_max`, then every new token is one dynamic step.
pub fn decode(
    model: &ModelWeights<f64>,
    weights: &MaterializedStore<f64>,
    plan: &PrecisionPlan,
    prompt: &[u32],
    n_new: usize,
    opts: RuntimeOptions,
) -> Result<DecodeOutput> {
    let Some((&last, head)) = prompt.split_last() else {
        return Err(Error::Empty("prompt has no tokens".into()));
    };
    let total = prompt.len() + n_new.saturating_sub(1);
    if total > model.config.seq_cap {
        return Err(Error::SequenceTooLong {
            len: total,
            cap: model.config.seq_cap,
        });
    }
    let mut provider = DynamicProvider::new(plan, weights, opts)?;
    let mut session = Session::new(model);
    provider.begin_prefill();
    if !head.is_empty() {
        session.extend(head, &mut provider)?;
    }
    provider.begin_dynamic();
    let mut cur = last;
    let mut generated = Vec::with_capacity(n_new);
    for _ in 0..n_new {
        let logits = session.extend(&[cur], &mut provider)?;
        cur = argmax(logits.row(0));
        generated.push(cur);
    }
    Ok(DecodeOutput {
        generated,
        trace: provider.into_trace(),
    })
}

#[derive(Debug, Clone, Copy)]
pub enum EvalMode<'a> {
    Dynamic(&'a PrecisionPlan, RuntimeOptions),
    Static(&'a BTreeMap<LayerId, u8>),
    Fp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub loss: LossReport,
    /// Logits of every sample, in order.
    pub logits: Vec<Matrix<f64>>,
    /// One trace per sample; empty for full precision.
    pub traces: Vec<Trace>,
}

impl EvalResult {
    pub fn merged_trace(&self) -> Option<Trace> {
        let mut it = self.traces.iter();
        let mut acc = it.next()?.clone();
        for t in it {
            acc.merge(t);
        }
        Some(acc)
    }

    /// Mean effective bits of each sample.
    pub fn per_query_bits(&self) -> Vec<f64> {
        self.traces.iter().map(Trace::mean_effective_bits).collect()
    }
}

/// Teacher-forced perplexity over `samples`. Every position is a dynamic
/// step with its own precision selection.
pub fn eval_perplexity(
    model: &ModelWeights<f64>,
    weights: &MaterializedStore<f64>,
    samples: &[Vec<u32>],
    mode: EvalMode<'_>,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Empty("no evaluation samples".into()));
    }
    let layers = model.config.layer_ids();
    let params: Vec<u64> = layers.iter().map(|&id| model.config.param_count(id)).collect();
    let fixed = match mode {
        EvalMode::Static(bits) => Some(MatrixProvider::static_bits(weights, bits)?),
        _ => None,
    };
    let per_sample = samples
        .par_iter()
        .map(|s| -> Result<(Vec<f64>, Matrix<f64>, Option<Trace>)> {
            if s.len() < 2 {
                return Err(Error::Empty("teacher forcing needs at least two tokens".into()));
            }
            let inputs = &s[..s.len() - 1];
            let mut session = Session::new(model);
            let (logits, trace) = match mode {
                EvalMode::Dynamic(plan, opts) => {
                    let mut p = DynamicProvider::new(plan, weights, opts)?;
                    let logits = session.extend(inputs, &mut p)?;
                    (logits, Some(p.into_trace()))
                }
                EvalMode::Static(bits) => {
                    let mut p = fixed.clone().expect("static provider");
                    let logits = session.extend(inputs, &mut p)?;
                    let t = Trace::fixed(layers.clone(), params.clone(), bits, 0..inputs.len())?;
                    (logits, Some(t))
                }
                EvalMode::Fp => {
                    let mut p = crate::model::FullPrecision(model);
                    (session.extend(inputs, &mut p)?, None)
                }
            };
            Ok((token_losses(&logits, &s[1..]), logits, trace))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    let mut n = 0;
    let mut logits = Vec::with_capacity(samples.len());
    let mut traces = Vec::new();
    for (losses, l, t) in per_sample {
        sum += losses.iter().sum::<f64>();
        n += losses.len();
        logits.push(l);
        traces.extend(t);
    }
    Ok(EvalResult {
        loss: LossReport::from_sum(sum, n),
        logits,
        traces,
    })
}
