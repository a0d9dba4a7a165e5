use std::collections::BTreeMap;

use rayon::prelude::*;

use super::plan::{dynamic_pair, LayerPlan, PlanMethod, PrecisionPlan, Provenance, PLAN_VERSION};
use crate::error::{Error, Result};
use crate::estimator::{
    build_estimator, collect_error_samples, translate_threshold, ErrorSamples, EstimatorSettings,
};
use crate::model::{LayerId, ModelWeights};
use crate::quant::MaterializedStore;

/// A compiled plan together with the calibration statistics behind it.
pub struct CompiledPlan {
    pub plan: PrecisionPlan,
    pub calibration: BTreeMap<LayerId, ErrorSamples>,
}

/// Turn fitted precisions into a runnable plan. Integral `p` become static
/// layers; fractional ones get a threshold from the calibration errors and
/// an estimator.
pub fn compile_plan(
    model: &ModelWeights<f64>,
    weights: &MaterializedStore<f64>,
    max_bits: &BTreeMap<LayerId, u8>,
    p: &BTreeMap<LayerId, f64>,
    calib: &[Vec<u32>],
    target_bits: f64,
    settings: &EstimatorSettings,
    provenance: Provenance,
) -> Result<CompiledPlan> {
    let ids = model.config.layer_ids();
    let mut pairs = BTreeMap::new();
    for &id in &ids {
        let pi = *p.get(&id).ok_or_else(|| Error::MissingTensor(id.to_string()))?;
        let b_max = *max_bits.get(&id).ok_or_else(|| Error::MissingTensor(id.to_string()))?;
        if !(pi >= weights.b_min() as f64 && pi <= b_max as f64) {
            return Err(Error::InvalidArgument(format!(
                "{id}: p = {pi} outside [{}, {b_max}]",
                weights.b_min()
            )));
        }
        if let Some(pair) = dynamic_pair(pi) {
            pairs.insert(id, pair);
        }
    }
    let calibration = if pairs.is_empty() {
        BTreeMap::new()
    } else {
        collect_error_samples(model, weights, max_bits, &pairs, calib)?
    };
    let dynamic: BTreeMap<LayerId, LayerPlan> = calibration
        .par_iter()
        .map(|(&id, samples)| {
            let (l, _) = samples.pair;
            let threshold = translate_threshold(id, &samples.sorted_errors(), p[&id], l)?;
            let estimator = build_estimator(id, samples, weights.neighbor_delta(id, l), settings)?;
            Ok((
                id,
                LayerPlan {
                    layer: id,
                    b_max: max_bits[&id],
                    p: p[&id],
                    params: model.config.param_count(id),
                    threshold,
                    estimator: Some(estimator),
                },
            ))
        })
        .collect::<Result<_>>()?;
    let mut warnings = Vec::new();
    let layers = ids
        .iter()
        .map(|&id| match dynamic.get(&id) {
            Some(lp) => {
                if let Some(e) = &lp.estimator {
                    if let Some(mre) = e.calib_mre {
                        log::debug!("{id}: {} estimator, calibration MRE {mre:.4}", e.kind_name());
                    }
                }
                lp.clone()
            }
            None => LayerPlan::fixed(
                id,
                p[&id] as u8,
                max_bits[&id],
                weights.b_min(),
                model.config.param_count(id),
            ),
        })
        .collect();
    if calib.len() < 2 && !pairs.is_empty() {
        warnings.push("calibration set holds a single sample".to_string());
    }
    let plan = PrecisionPlan {
        version: PLAN_VERSION,
        method: PlanMethod::Dp,
        target_bits,
        n_bits: weights.n_bits(),
        b_min: weights.b_min(),
        layers,
        provenance,
        warnings,
    };
    plan.validate()?;
    Ok(CompiledPlan { plan, calibration })
}
