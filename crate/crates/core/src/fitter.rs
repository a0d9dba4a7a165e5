//! Learning per-layer average precisions.
//!
//! Each layer's weight is replaced by the interpolation `r·W_l + (1−r)·W_h`
//! with `l = ⌊p⌋` and `r = 1 − (p − l)`, so the loss is piecewise linear in
//! the weights along `p` and `∂y/∂p = (W_h − W_l)·x`. The precisions are
//! trained against `L + α·(Σ p_i M_i / Σ M_i − target)²` with AdamW and
//! clamped into `[b_min, B_i]` after every step.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward, BackwardOptions, LayerId, ModelWeights};
use crate::num::{dot, Scalar};
use crate::provider::MatrixProvider;
use crate::quant::MaterializedStore;
use crate::tensor::Matrix;

/// Largest acceptable gap between the fitted average precision and its target.
pub const FIT_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpCoeffs {
    pub l: u8,
    pub h: u8,
    /// Weight on the low-bit variant.
    pub r: f64,
}

impl InterpCoeffs {
    pub fn from_p(p: f64) -> Self {
        let l = p.floor();
        let h = if p == l { l } else { l + 1.0 };
        Self {
            l: l as u8,
            h: h as u8,
            r: 1.0 - (p - l),
        }
    }

    pub fn is_integral(&self) -> bool {
        self.l == self.h
    }
}

/// The neighbouring pair `(l, l+1)` whose segment carries the derivative at
/// `p`. At an integer `p` the segment above is used, except at the upper
/// bound where only the segment below exists. `None` when the bounds pin `p`.
pub fn gradient_cell(p: f64, lower: u8, upper: u8) -> Option<(u8, u8)> {
    if lower >= upper {
        return None;
    }
    let l = (p.floor() as u8).clamp(lower, upper - 1);
    Some((l, l + 1))
}

/// `r·W_l + (1−r)·W_h`. Integer `p` returns `W_l` untouched.
pub fn interpolated_weight(weights: &MaterializedStore<f64>, id: LayerId, p: f64) -> Matrix<f64> {
    let c = InterpCoeffs::from_p(p);
    let wl = weights.weight(id, c.l);
    if c.is_integral() {
        return wl.clone();
    }
    let wh = weights.weight(id, c.h);
    let mut out = wl.clone();
    for (o, (&a, &b)) in out
        .as_mut_slice()
        .iter_mut()
        .zip(wl.as_slice().iter().zip(wh.as_slice()))
    {
        *o = c.r * a + (1.0 - c.r) * b;
    }
    out
}

/// `r·(W_l x) + (1−r)·(W_h x)` for a single input vector.
pub fn interp_forward(weights: &MaterializedStore<f64>, id: LayerId, p: f64, x: &[f64]) -> Vec<f64> {
    let c = InterpCoeffs::from_p(p);
    let yl = weights.weight(id, c.l).matvec(x);
    if c.is_integral() {
        return yl;
    }
    let yh = weights.weight(id, c.h).matvec(x);
    yl.iter().zip(&yh).map(|(a, b)| c.r * a + (1.0 - c.r) * b).collect()
}

/// `Σ_t ⟨dy_t, ΔW·x_t⟩`: the derivative of the loss with respect to `p`
/// for one layer, given its output gradients and inputs.
pub fn grad_p<T: Scalar>(delta: &Matrix<T>, dys: &Matrix<T>, xs: &Matrix<T>) -> f64 {
    assert_eq!(dys.rows(), xs.rows());
    (0..xs.rows())
        .map(|t| {
            let dx = delta.matvec(xs.row(t));
            dot(dys.row(t), &dx)
        })
        .sum()
}

pub fn avg_precision(p: &BTreeMap<LayerId, f64>, params: &BTreeMap<LayerId, u64>) -> f64 {
    crate::allocator::weighted_avg(p.iter().map(|(id, &v)| (v, params[id])))
}

/// `α·(avg − target)²`.
pub fn regularizer(avg: f64, target: f64, alpha: f64) -> f64 {
    alpha * (avg - target) * (avg - target)
}

pub fn regularized_loss(loss: f64, avg: f64, target: f64, alpha: f64) -> f64 {
    loss + regularizer(avg, target, alpha)
}

/// `∂/∂p_i` of the regularizer: `2α·(avg − target)·M_i / ΣM`.
pub fn regularizer_grad(avg: f64, target: f64, alpha: f64, m_i: u64, total_m: u64) -> f64 {
    2.0 * alpha * (avg - target) * m_i as f64 / total_m as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitHyper {
    pub epochs: usize,
    pub lr: f64,
    pub alpha: f64,
    /// Regularization strength of the single retry when the first fit
    /// misses the target by more than [`FIT_TOLERANCE`].
    pub retry_alpha: Option<f64>,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FitHyper {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.01,
            alpha: 1.0,
            retry_alpha: Some(10.0),
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionParams {
    pub p: BTreeMap<LayerId, f64>,
    pub bounds: BTreeMap<LayerId, (u8, u8)>,
    pub target_bits: f64,
    pub alpha_reg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitLogRow {
    pub alpha: f64,
    pub epoch: usize,
    pub loss: f64,
    pub reg: f64,
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub params: PrecisionParams,
    pub log: Vec<FitLogRow>,
    /// True when the retry strength was needed.
    pub retried: bool,
}

impl FitOutcome {
    pub fn avg(&self, params: &BTreeMap<LayerId, u64>) -> f64 {
        avg_precision(&self.params.p, params)
    }

    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for row in &self.log {
            w.serialize(row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Loss of one sample and `∂L/∂p_i` for every layer whose bounds leave room
/// to move, under the interpolated weights for `p`.
pub fn sample_grad(
    model: &ModelWeights<f64>,
    weights: &MaterializedStore<f64>,
    effective: &BTreeMap<LayerId, Matrix<f64>>,
    p: &BTreeMap<LayerId, f64>,
    bounds: &BTreeMap<LayerId, (u8, u8)>,
    tokens: &[u32],
) -> Result<(f64, BTreeMap<LayerId, f64>)> {
    let mut provider = MatrixProvider::from_owned(effective);
    let opts = BackwardOptions {
        weight_grads: false,
        output_grads: true,
        embedding: false,
    };
    let pass = backward(model, tokens, &mut provider, opts)?;
    let mut grads = BTreeMap::new();
    for (&id, &pv) in p {
        let (lo, hi) = bounds[&id];
        let g = match gradient_cell(pv, lo, hi) {
            Some((l, _)) => grad_p(
                weights.neighbor_delta(id, l),
                pass.grads.output_grad(id).expect("output grads requested"),
                pass.input(id),
            ),
            None => 0.0,
        };
        grads.insert(id, g);
    }
    Ok((pass.loss, grads))
}

fn effective_weights(
    weights: &MaterializedStore<f64>,
    p: &BTreeMap<LayerId, f64>,
) -> BTreeMap<LayerId, Matrix<f64>> {
    p.iter()
        .map(|(&id, &v)| (id, interpolated_weight(weights, id, v)))
        .collect()
}

/// Mean teacher-forced loss over `samples` under the interpolated weights.
pub fn interpolated_loss(
    model: &ModelWeights<f64>,
    weights: &MaterializedStore<f64>,
    p: &BTreeMap<LayerId, f64>,
    samples: &[Vec<u32>],
) -> Result<f64> {
    let eff = effective_weights(weights, p);
    let losses = samples
        .par_iter()
        .map(|s| {
            crate::model::teacher_forced_loss(model, s, &mut MatrixProvider::from_owned(&eff))
                .map(|r| r.mean_loss)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Train `p` for one `target` starting from `p_i = clamp(target, b_min, B_i)`.
pub fn fit(
    model: &ModelWeights<f64>,
    weights: &MaterializedStore<f64>,
    max_bits: &BTreeMap<LayerId, u8>,
    samples: &[Vec<u32>],
    target: f64,
    hyper: &FitHyper,
) -> Result<FitOutcome> {
    if samples.is_empty() {
        return Err(Error::Empty("calibration set has no samples".into()));
    }
    if hyper.batch_size == 0 || !(hyper.lr > 0.0) || !(hyper.alpha >= 0.0) {
        return Err(Error::Config(
            "fit needs batch_size >= 1, lr > 0 and alpha >= 0".into(),
        ));
    }
    let b_min = weights.b_min();
    let params: BTreeMap<LayerId, u64> = max_bits
        .keys()
        .map(|&id| {
            let (r, c) = model.config.linear_shape(id.kind);
            (id, (r * c) as u64)
        })
        .collect();
    let ceiling = crate::allocator::weighted_avg(
        max_bits.iter().map(|(id, &b)| (b as f64, params[id])),
    );
    if !target.is_finite() || target < b_min as f64 || target > ceiling + crate::allocator::EPS_ACCT {
        return Err(Error::Infeasible(format!(
            "target {target} outside the reachable range [{b_min}, {ceiling:.4}]"
        )));
    }
    let mut outcome = fit_once(model, weights, max_bits, &params, samples, target, hyper, hyper.alpha)?;
    if let Some(retry) = hyper.retry_alpha {
        let gap = (avg_precision(&outcome.params.p, &params) - target).abs();
        if gap > FIT_TOLERANCE && retry != hyper.alpha {
            log::info!("fit missed target {target} by {gap:.4}; retrying with alpha {retry}");
            let mut second = fit_once(model, weights, max_bits, &params, samples, target, hyper, retry)?;
            let mut log = std::mem::take(&mut outcome.log);
            log.append(&mut second.log);
            second.log = log;
            second.retried = true;
            outcome = second;
        }
    }
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn fit_once(
    model: &ModelWeights<f64>,
    weights: &MaterializedStore<f64>,
    max_bits: &BTreeMap<LayerId, u8>,
    params: &BTreeMap<LayerId, u64>,
    samples: &[Vec<u32>],
    target: f64,
    hyper: &FitHyper,
    alpha: f64,
) -> Result<FitOutcome> {
    let b_min = weights.b_min();
    let total_m: u64 = params.values().sum();
    let bounds: BTreeMap<LayerId, (u8, u8)> =
        max_bits.iter().map(|(&id, &b)| (id, (b_min, b))).collect();
    let mut p: BTreeMap<LayerId, f64> = bounds
        .iter()
        .map(|(&id, &(lo, hi))| (id, target.clamp(lo as f64, hi as f64)))
        .collect();
    let ids: Vec<LayerId> = p.keys().copied().collect();
    let mut m = vec![0.0; ids.len()];
    let mut v = vec![0.0; ids.len()];
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let eff = effective_weights(weights, &p);
            let results = batch
                .par_iter()
                .map(|&i| sample_grad(model, weights, &eff, &p, &bounds, &samples[i]))
                .collect::<Result<Vec<_>>>()?;
            let n = results.len() as f64;
            epoch_loss += results.iter().map(|r| r.0).sum::<f64>();
            let avg = avg_precision(&p, params);
            step += 1;
            for (k, id) in ids.iter().enumerate() {
                let g_loss = results.iter().map(|r| r.1[id]).sum::<f64>() / n;
                let g = g_loss + regularizer_grad(avg, target, alpha, params[id], total_m);
                m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g;
                v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g * g;
                let mh = m[k] / (1.0 - hyper.beta1.powi(step));
                let vh = v[k] / (1.0 - hyper.beta2.powi(step));
                let pk = p.get_mut(id).unwrap();
                *pk -= hyper.lr * (mh / (vh.sqrt() + hyper.adam_eps) + hyper.weight_decay * *pk);
                let (lo, hi) = bounds[id];
                *pk = pk.clamp(lo as f64, hi as f64);
            }
        }
        let avg = avg_precision(&p, params);
        let row = FitLogRow {
            alpha,
            epoch,
            loss: epoch_loss / samples.len() as f64,
            reg: regularizer(avg, target, alpha),
            avg,
        };
        log::debug!("fit epoch {epoch}: loss {:.6} reg {:.3e} avg {:.4}", row.loss, row.reg, row.avg);
        log.push(row);
    }
    Ok(FitOutcome {
        params: PrecisionParams {
            p,
            bounds,
            target_bits: target,
            alpha_reg: alpha,
        },
        log,
        retried: false,
    })
}

/// Write any serializable rows as CSV with a header.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficients() {
        let c = InterpCoeffs::from_p(3.0);
        assert_eq!((c.l, c.h, c.r), (3, 3, 1.0));
        let c = InterpCoeffs::from_p(3.5);
        assert_eq!((c.l, c.h, c.r), (3, 4, 0.5));
        let c = InterpCoeffs::from_p(3.2);
        assert_eq!((c.l, c.h), (3, 4));
        assert!((c.r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn gradient_cells() {
        assert_eq!(gradient_cell(3.0, 3, 5), Some((3, 4)));
        assert_eq!(gradient_cell(4.7, 3, 5), Some((4, 5)));
        assert_eq!(gradient_cell(5.0, 3, 5), Some((4, 5)));
        assert_eq!(gradient_cell(3.0, 3, 3), None);
    }

    #[test]
    fn regularizer_closed_forms() {
        assert_eq!(regularized_loss(2.0, 4.0, 4.0, 1.0), 2.0);
        assert_eq!(regularized_loss(2.0, 4.5, 4.0, 0.0), 2.0);
        assert_eq!(regularized_loss(0.0, 4.5, 4.0, 1.0), 0.25);
        // Single layer: the gradient is the derivative of α(p − t)².
        assert_eq!(regularizer_grad(4.5, 4.0, 1.0, 7, 7), 1.0);
    }

    #[test]
    fn grad_p_vanishes_on_zero_inputs() {
        let delta = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let zero = Matrix::zeros(3, 2);
        let xs = Matrix::from_fn(3, 2, |t, c| (t + c) as f64);
        assert_eq!(grad_p(&delta, &zero, &xs), 0.0);
        assert_eq!(grad_p(&Matrix::zeros(2, 2), &xs, &xs), 0.0);
    }
}
