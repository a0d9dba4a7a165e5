//! Relative-error estimators and threshold translation.
//!
//! For a layer served from the neighbouring pair `(l, h)`, the relative error
//! of input `x` is `‖ΔW x‖₂` with `ΔW = W_h − W_l`. The runtime picks `W_h`
//! when the estimate exceeds the layer's threshold `T`, the empirical
//! `r`-quantile of calibration errors with `r = 1 − (p − l)`.
//!
//! Three estimators are offered: exact (`rows·cols` multiply-adds), a linear
//! fit on `‖x‖` (accepted only above an R² gate), and a random projection
//! `‖G x‖` with `G = A·ΔW`, `A` a `k × rows` Gaussian sketch, optionally
//! refined by gradient descent on `G`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, CapturingProvider, InputSite, LayerId, ModelWeights};
use crate::num::norm2;
use crate::provider::MatrixProvider;
use crate::quant::MaterializedStore;
use crate::serde_inf;
use crate::tensor::Matrix;

/// Slack when turning `r·n` into a quantile index, so that products like
/// `0.6 · 5` that land a hair above an integer do not skip a rank.
const QUANTILE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    Immediate,
    PreviousResidual,
}

/// Which earlier vector stands in for the immediate input of a residual-fed
/// layer under asynchronous estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsyncSource {
    /// The same layer's input at the previous position.
    #[default]
    PreviousToken,
    /// The current position's input to the same layer kind one block earlier.
    PrecedingBlock,
}

/// Q, K, V and Up read the residual stream and may be estimated from an
/// earlier vector; everything else, and every layer of block 0, uses its
/// immediate input.
pub fn resolve_input_source(id: LayerId) -> InputSource {
    if id.is_residual_fed() && id.block > 0 {
        InputSource::PreviousResidual
    } else {
        InputSource::Immediate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

impl LinearFit {
    pub fn accepted(&self, gate: f64) -> bool {
        self.r2 > gate
    }

    pub fn predict(&self, norm: f64) -> f64 {
        self.slope * norm + self.intercept
    }
}

/// Least-squares `error ≈ slope·‖x‖ + intercept`. `None` with fewer than
/// three samples or when every norm is the same.
pub fn fit_linear(errors: &[f64], norms: &[f64]) -> Option<LinearFit> {
    assert_eq!(errors.len(), norms.len());
    let n = errors.len();
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let mx = norms.iter().sum::<f64>() / nf;
    let my = errors.iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in norms.iter().zip(errors) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = norms
        .iter()
        .zip(errors)
        .map(|(&x, &y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let r2 = if syy > 0.0 {
        1.0 - ss_res / syy
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Some(LinearFit {
        slope,
        intercept,
        r2,
    })
}

/// `k × rows` sketch with i.i.d. `N(0, 1/k)` entries.
pub fn sketch_matrix(k: usize, rows: usize, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (k as f64).sqrt();
    Matrix::from_fn(k, rows, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

/// `A · ΔW`.
pub fn project(a: &Matrix<f64>, delta: &Matrix<f64>) -> Matrix<f64> {
    assert_eq!(a.cols(), delta.rows(), "sketch width must equal ΔW rows");
    let mut g = Matrix::zeros(a.rows(), delta.cols());
    for i in 0..a.rows() {
        let out = g.row_mut(i);
        for (r, &air) in a.row(i).iter().enumerate() {
            for (o, &d) in out.iter_mut().zip(delta.row(r)) {
                *o += air * d;
            }
        }
    }
    g
}

pub fn build_projection(delta: &Matrix<f64>, k: usize, seed: u64) -> Result<Matrix<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("projection width k must be at least 1".into()));
    }
    Ok(project(&sketch_matrix(k, delta.rows(), seed), delta))
}

pub fn exact_error(delta: &Matrix<f64>, x: &[f64]) -> f64 {
    norm2(&delta.matvec(x))
}

pub fn mean_relative_error(estimates: &[f64], exact: &[f64]) -> f64 {
    let terms: Vec<f64> = estimates
        .iter()
        .zip(exact)
        .filter(|(_, &e)| e > 0.0)
        .map(|(&a, &e)| (a - e).abs() / e)
        .collect();
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub epochs: usize,
    /// Initial step, relative to `‖G‖_F`.
    pub step: f64,
    /// Halvings tried per epoch before the epoch is skipped.
    pub max_halvings: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            epochs: 200,
            step: 1e-3,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub g: Matrix<f64>,
    pub mre_before: f64,
    pub mre_after: f64,
    /// Mean relative error after every epoch.
    pub history: Vec<f64>,
    /// Set when the descent produced non-finite values and `G` was reverted.
    pub warning: Option<String>,
}

/// Gradient descent on `G` to match `‖G x‖` to the exact errors over the
/// calibration inputs (rows of `xs`). Each epoch takes one normalized step
/// and halves it until both the squared-error loss decreases and the mean
/// relative error does not increase; an epoch with no acceptable step leaves
/// `G` unchanged.
pub fn calibrate_projection(
    g0: &Matrix<f64>,
    xs: &Matrix<f64>,
    exact: &[f64],
    settings: &CalibrationSettings,
) -> CalibrationReport {
    assert_eq!(xs.rows(), exact.len());
    assert_eq!(xs.cols(), g0.cols());
    let evaluate = |g: &Matrix<f64>| -> (f64, f64, Vec<Vec<f64>>) {
        let mut est = Vec::with_capacity(xs.rows());
        let mut proj = Vec::with_capacity(xs.rows());
        for t in 0..xs.rows() {
            let gx = g.matvec(xs.row(t));
            est.push(norm2(&gx));
            proj.push(gx);
        }
        let mse = est
            .iter()
            .zip(exact)
            .map(|(a, e)| (a - e) * (a - e))
            .sum::<f64>()
            / exact.len().max(1) as f64;
        (mse, mean_relative_error(&est, exact), proj)
    };
    let (mut mse, mre_before, mut proj) = evaluate(g0);
    let mut g = g0.clone();
    let mut mre = mre_before;
    let mut history = Vec::with_capacity(settings.epochs);
    let mut step = settings.step;
    let n = xs.rows().max(1) as f64;
    for _ in 0..settings.epochs {
        // ∇_G mean (‖Gx‖ − e)² = mean 2(‖Gx‖ − e)·(Gx/‖Gx‖)·xᵀ
        let mut grad = Matrix::<f64>::zeros(g.rows(), g.cols());
        for t in 0..xs.rows() {
            let gx = &proj[t];
            let nrm = norm2(gx);
            if nrm == 0.0 {
                continue;
            }
            let coef = 2.0 * (nrm - exact[t]) / (nrm * n);
            let x = xs.row(t);
            for (i, &gi) in gx.iter().enumerate() {
                let c = coef * gi;
                for (dst, &xv) in grad.row_mut(i).iter_mut().zip(x) {
                    *dst += c * xv;
                }
            }
        }
        let gnorm = grad.frobenius_sq().sqrt();
        if gnorm == 0.0 || !gnorm.is_finite() {
            history.push(mre);
            if !gnorm.is_finite() {
                return reverted(g0, mre_before, history);
            }
            continue;
        }
        let scale = g.frobenius_sq().sqrt();
        let mut accepted = false;
        for _ in 0..=settings.max_halvings {
            let mut trial = g.clone();
            let f = step * scale / gnorm;
            for (w, &d) in trial.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *w -= f * d;
            }
            let (t_mse, t_mre, t_proj) = evaluate(&trial);
            if !t_mse.is_finite() {
                return reverted(g0, mre_before, history);
            }
            if t_mse < mse && t_mre <= mre {
                g = trial;
                mse = t_mse;
                mre = t_mre;
                proj = t_proj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if accepted {
            // Let the step recover after a run of halvings.
            step = (step * 2.0).min(settings.step);
        }
        history.push(mre);
    }
    CalibrationReport {
        g,
        mre_before,
        mre_after: mre,
        history,
        warning: None,
    }
}

fn reverted(g0: &Matrix<f64>, mre: f64, history: Vec<f64>) -> CalibrationReport {
    let warning = "projection calibration diverged; kept the uncalibrated sketch".to_string();
    log::warn!("{warning}");
    CalibrationReport {
        g: g0.clone(),
        mre_before: mre,
        mre_after: mre,
        history,
        warning: Some(warning),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorKind {
    Exact,
    Linear {
        slope: f64,
        intercept: f64,
        r2: f64,
    },
    Projection {
        k: usize,
        seed: u64,
        calibrated: bool,
        g: Matrix<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimator {
    #[serde(flatten)]
    pub kind: EstimatorKind,
    pub input_source: InputSource,
    pub pair: (u8, u8),
    /// Mean relative error on the calibration set when the estimator was chosen.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib_mre: Option<f64>,
}

impl ErrorEstimator {
    /// `delta` is `W_h − W_l` of the estimator's pair; only the exact kind reads it.
    pub fn estimate(&self, x: &[f64], delta: &Matrix<f64>) -> f64 {
        match &self.kind {
            EstimatorKind::Exact => exact_error(delta, x),
            EstimatorKind::Linear {
                slope, intercept, ..
            } => slope * norm2(x) + intercept,
            EstimatorKind::Projection { g, .. } => norm2(&g.matvec(x)),
        }
    }

    /// Multiply-adds per estimate for an input of width `cols` against a
    /// `rows × cols` layer.
    pub fn op_count(&self, rows: usize, cols: usize) -> u64 {
        match &self.kind {
            EstimatorKind::Exact => (rows * cols) as u64,
            EstimatorKind::Linear { .. } => cols as u64,
            EstimatorKind::Projection { k, .. } => (k * cols) as u64,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            EstimatorKind::Exact => "exact",
            EstimatorKind::Linear { .. } => "linear",
            EstimatorKind::Projection { .. } => "projection",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub layer: LayerId,
    #[serde(with = "serde_inf")]
    pub t: f64,
    pub r_quantile: f64,
    pub pair: (u8, u8),
}

impl ThresholdEntry {
    /// Sentinel entry that always serves `l` (`T = +∞`) or `h` (`T = −∞`).
    pub fn forced(layer: LayerId, pair: (u8, u8), high: bool) -> Self {
        Self {
            layer,
            t: if high { f64::NEG_INFINITY } else { f64::INFINITY },
            r_quantile: if high { 0.0 } else { 1.0 },
            pair,
        }
    }

    /// `h` iff `estimate > T`.
    pub fn select(&self, estimate: f64) -> u8 {
        if estimate > self.t {
            self.pair.1
        } else {
            self.pair.0
        }
    }

    pub fn is_sentinel(&self) -> bool {
        self.t.is_infinite()
    }
}

/// Index of the empirical `r`-quantile in a sorted list of `n` values:
/// `ceil(r·n) − 1`, clamped into range.
pub fn quantile_index(r: f64, n: usize) -> usize {
    let k = (r * n as f64 - QUANTILE_SLACK).ceil() as i64 - 1;
    k.clamp(0, n as i64 - 1) as usize
}

/// Threshold for average precision `p` within the pair `(l, l+1)`.
pub fn translate_threshold(layer: LayerId, sorted_errors: &[f64], p: f64, l: u8) -> Result<ThresholdEntry> {
    let lf = l as f64;
    if !(p >= lf && p <= lf + 1.0) {
        return Err(Error::InvalidArgument(format!(
            "p = {p} outside the cell [{l}, {}]",
            l + 1
        )));
    }
    let r = 1.0 - (p - lf);
    let pair = (l, l + 1);
    if r >= 1.0 {
        return Ok(ThresholdEntry::forced(layer, pair, false));
    }
    if r <= 0.0 {
        return Ok(ThresholdEntry::forced(layer, pair, true));
    }
    if sorted_errors.is_empty() {
        return Err(Error::Empty(format!("no calibration errors for {layer}")));
    }
    let t = sorted_errors[quantile_index(r, sorted_errors.len())];
    Ok(ThresholdEntry {
        layer,
        t,
        r_quantile: r,
        pair,
    })
}

/// Calibration statistics of one layer: every captured input with its exact
/// error and norm, plus the errors sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSamples {
    pub pair: (u8, u8),
    pub inputs: Matrix<f64>,
    /// Aligned with the rows of `inputs`.
    pub errors: Vec<f64>,
    pub norms: Vec<f64>,
}

impl ErrorSamples {
    pub fn sorted_errors(&self) -> Vec<f64> {
        let mut v = self.errors.clone();
        v.sort_by(f64::total_cmp);
        v
    }

    /// `(error, norm)` pairs sorted by error.
    pub fn sorted_pairs(&self) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = self.errors.iter().copied().zip(self.norms.iter().copied()).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }
}

/// Run every calibration sample with each layer at `max_bits[layer]`,
/// capture layer inputs, and record `‖ΔW x‖` for the pair chosen per layer.
pub fn collect_error_samples(
    model: &ModelWeights<f64>,
    weights: &MaterializedStore<f64>,
    max_bits: &BTreeMap<LayerId, u8>,
    pairs: &BTreeMap<LayerId, (u8, u8)>,
    samples: &[Vec<u32>],
) -> Result<BTreeMap<LayerId, ErrorSamples>> {
    if samples.is_empty() {
        return Err(Error::Empty("calibration set has no samples".into()));
    }
    let sites = capture_sites(model, weights, max_bits, samples)?;
    let mut out = BTreeMap::new();
    for (&id, &(l, h)) in pairs {
        let inputs = sites[&(id.block, id.kind.site())].clone();
        let delta = weights.delta(id, l, h)?;
        let errors: Vec<f64> = (0..inputs.rows()).map(|t| exact_error(&delta, inputs.row(t))).collect();
        let norms: Vec<f64> = (0..inputs.rows()).map(|t| norm2(inputs.row(t))).collect();
        out.insert(
            id,
            ErrorSamples {
                pair: (l, h),
                inputs,
                errors,
                norms,
            },
        );
    }
    Ok(out)
}

/// Inputs of every layer site over all calibration tokens, stacked in sample
/// order.
pub fn capture_sites(
    model: &ModelWeights<f64>,
    weights: &MaterializedStore<f64>,
    max_bits: &BTreeMap<LayerId, u8>,
    samples: &[Vec<u32>],
) -> Result<BTreeMap<(usize, InputSite), Matrix<f64>>> {
    use rayon::prelude::*;
    let base = MatrixProvider::static_bits(weights, max_bits)?;
    let per_sample = samples
        .par_iter()
        .map(|s| {
            let mut cap = CapturingProvider::new(base.clone());
            forward(model, s, &mut cap)?;
            Ok(cap.into_captured())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stacked: BTreeMap<(usize, InputSite), Vec<f64>> = BTreeMap::new();
    let mut widths = BTreeMap::new();
    for cap in per_sample {
        for (key, m) in cap {
            widths.insert(key, m.cols());
            stacked.entry(key).or_default().extend_from_slice(m.as_slice());
        }
    }
    Ok(stacked
        .into_iter()
        .map(|(key, data)| {
            let w = widths[&key];
            (key, Matrix::from_vec(data.len() / w, w, data))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    /// `‖ΔW x‖` without approximation.
    Exact,
    /// Linear fit when its R² clears the gate, otherwise calibrated
    /// projection; the one with lower calibration error wins.
    #[default]
    Hybrid,
    Projection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSettings {
    pub mode: EstimatorMode,
    pub k: usize,
    pub r2_gate: f64,
    pub asynchronous: bool,
    pub async_source: AsyncSource,
    pub calibration: CalibrationSettings,
    /// Inputs used for projection calibration, subsampled evenly.
    pub calib_inputs: usize,
    pub seed: u64,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            mode: EstimatorMode::Hybrid,
            k: 64,
            r2_gate: 0.9,
            asynchronous: true,
            async_source: AsyncSource::PreviousToken,
            calibration: CalibrationSettings::default(),
            calib_inputs: 128,
            seed: 0,
        }
    }
}

fn layer_seed(seed: u64, id: LayerId) -> u64 {
    seed ^ ((id.block as u64) << 8 | id.kind.index() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Evenly spaced subset of row indices.
fn subsample(n: usize, m: usize) -> Vec<usize> {
    if n <= m {
        return (0..n).collect();
    }
    (0..m).map(|i| i * n / m).collect()
}

/// Choose and build the estimator of one layer from its calibration data.
pub fn build_estimator(
    id: LayerId,
    samples: &ErrorSamples,
    delta: &Matrix<f64>,
    settings: &EstimatorSettings,
) -> Result<ErrorEstimator> {
    let input_source = if settings.asynchronous {
        resolve_input_source(id)
    } else {
        InputSource::Immediate
    };
    let pair = samples.pair;
    if settings.mode == EstimatorMode::Exact {
        return Ok(ErrorEstimator {
            kind: EstimatorKind::Exact,
            input_source,
            pair,
            calib_mre: Some(0.0),
        });
    }
    let seed = layer_seed(settings.seed, id);
    let g0 = build_projection(delta, settings.k, seed)?;
    let idx = subsample(samples.inputs.rows(), settings.calib_inputs);
    let xs = Matrix::from_fn(idx.len(), samples.inputs.cols(), |i, c| samples.inputs.get(idx[i], c));
    let exact: Vec<f64> = idx.iter().map(|&i| samples.errors[i]).collect();
    let report = calibrate_projection(&g0, &xs, &exact, &settings.calibration);
    let proj_est: Vec<f64> = (0..samples.inputs.rows())
        .map(|t| norm2(&report.g.matvec(samples.inputs.row(t))))
        .collect();
    let proj_mre = mean_relative_error(&proj_est, &samples.errors);
    let projection = ErrorEstimator {
        kind: EstimatorKind::Projection {
            k: settings.k,
            seed,
            calibrated: settings.calibration.epochs > 0 && report.warning.is_none(),
            g: report.g,
        },
        input_source,
        pair,
        calib_mre: Some(proj_mre),
    };
    if settings.mode == EstimatorMode::Projection {
        return Ok(projection);
    }
    if let Some(fit) = fit_linear(&samples.errors, &samples.norms) {
        if fit.accepted(settings.r2_gate) {
            let lin_est: Vec<f64> = samples.norms.iter().map(|&n| fit.predict(n)).collect();
            let lin_mre = mean_relative_error(&lin_est, &samples.errors);
            if lin_mre <= proj_mre {
                return Ok(ErrorEstimator {
                    kind: EstimatorKind::Linear {
                        slope: fit.slope,
                        intercept: fit.intercept,
                        r2: fit.r2,
                    },
                    input_source,
                    pair,
                    calib_mre: Some(lin_mre),
                });
            }
        }
    }
    Ok(projection)
}

/// Layers whose asynchronous source under `PrecedingBlock` exists.
pub fn preceding_block_source(id: LayerId) -> Option<LayerId> {
    (id.block > 0).then(|| LayerId::new(id.block - 1, id.kind))
}
