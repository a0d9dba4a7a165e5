use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocator::{weighted_avg, BitAssignment};
use crate::error::{Error, Result};
use crate::estimator::{ErrorEstimator, EstimatorSettings, ThresholdEntry};
use crate::fitter::{FitHyper, InterpCoeffs};
use crate::model::{model_hash, LayerId, ModelWeights};
use crate::quant::{short, QuantStore};

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMethod {
    Dp,
    LlmMq,
    HawqV2,
}

impl PlanMethod {
    pub const ALL: [PlanMethod; 3] = [PlanMethod::Dp, PlanMethod::LlmMq, PlanMethod::HawqV2];

    pub fn name(self) -> &'static str {
        match self {
            PlanMethod::Dp => "dp",
            PlanMethod::LlmMq => "llm_mq",
            PlanMethod::HawqV2 => "hawq_v2",
        }
    }
}

impl std::str::FromStr for PlanMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlanMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown plan method `{s}` (dp, llm_mq, hawq_v2)")))
    }
}

impl std::fmt::Display for PlanMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: LayerId,
    /// Highest bit the layer may use; prefill runs here.
    pub b_max: u8,
    pub p: f64,
    pub params: u64,
    pub threshold: ThresholdEntry,
    /// Absent for layers compiled as static.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<ErrorEstimator>,
}

impl LayerPlan {
    pub fn pair(&self) -> (u8, u8) {
        self.threshold.pair
    }

    pub fn is_dynamic(&self) -> bool {
        self.estimator.is_some()
    }

    /// A layer fixed at bit `b` through a sentinel threshold: `(b−1, b)` with
    /// `T = −∞` when a lower neighbour exists, otherwise `(b, b)` with `T = +∞`.
    pub fn fixed(layer: LayerId, b: u8, b_max: u8, b_min: u8, params: u64) -> Self {
        let threshold = if b > b_min {
            ThresholdEntry::forced(layer, (b - 1, b), true)
        } else {
            ThresholdEntry::forced(layer, (b, b), false)
        };
        Self {
            layer,
            b_max,
            p: b as f64,
            params,
            threshold,
            estimator: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_hash: String,
    pub store_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitHyper>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_bits: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPlan {
    pub version: u32,
    pub method: PlanMethod,
    pub target_bits: f64,
    pub n_bits: u8,
    pub b_min: u8,
    /// In layer order.
    pub layers: Vec<LayerPlan>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl PrecisionPlan {
    /// A static assignment encoded with sentinel thresholds.
    pub fn from_static(
        method: PlanMethod,
        target_bits: f64,
        assignment: &BitAssignment,
        params: &BTreeMap<LayerId, u64>,
        store: &QuantStore,
        provenance: Provenance,
    ) -> Result<Self> {
        let layers = assignment
            .bits
            .iter()
            .map(|(&id, &b)| {
                let m = *params.get(&id).ok_or_else(|| Error::MissingTensor(id.to_string()))?;
                Ok(LayerPlan::fixed(id, b, b, store.b_min, m))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            version: PLAN_VERSION,
            method,
            target_bits,
            n_bits: store.n_bits,
            b_min: store.b_min,
            layers,
            provenance,
            warnings: assignment.warning.iter().cloned().collect(),
        })
    }

    pub fn layer(&self, id: LayerId) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.layer == id)
    }

    /// `Σ p_i M_i / Σ M_i`.
    pub fn avg_p(&self) -> f64 {
        weighted_avg(self.layers.iter().map(|l| (l.p, l.params)))
    }

    /// Bits when every selection goes low, or high.
    pub fn extreme_bits(&self, high: bool) -> BTreeMap<LayerId, u8> {
        self.layers
            .iter()
            .map(|l| (l.layer, if high { l.pair().1 } else { l.pair().0 }))
            .collect()
    }

    /// The bits an all-sentinel plan always serves; `None` if any layer
    /// still selects per token.
    pub fn static_bits(&self) -> Option<BTreeMap<LayerId, u8>> {
        self.layers
            .iter()
            .map(|l| l.threshold.is_sentinel().then(|| (l.layer, l.threshold.select(0.0))))
            .collect()
    }

    /// Copy with every threshold replaced by a sentinel.
    pub fn forced(&self, high: bool) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.threshold = ThresholdEntry::forced(l.layer, l.threshold.pair, high);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != PLAN_VERSION {
            return Err(Error::Config(format!("unsupported plan version {}", self.version)));
        }
        for l in &self.layers {
            let (lo, hi) = l.pair();
            let bad = |why: &str| Err(Error::Config(format!("plan entry {}: {why}", l.layer)));
            if !(self.b_min <= lo && lo <= hi && hi <= l.b_max && l.b_max <= self.n_bits) {
                return bad("bits must satisfy b_min <= l <= h <= b_max <= n_bits");
            }
            if !(l.p >= lo as f64 && l.p <= hi as f64) {
                return bad("p lies outside its pair");
            }
            if l.threshold.layer != l.layer {
                return bad("threshold belongs to another layer");
            }
            if let Some(e) = &l.estimator {
                if e.pair != l.pair() {
                    return bad("estimator pair differs from threshold pair");
                }
                if hi != lo + 1 {
                    return bad("dynamic layers need neighbouring bits");
                }
            } else if !l.threshold.is_sentinel() {
                return bad("static layers need a sentinel threshold");
            }
        }
        Ok(())
    }

    /// Refuse to run against a model or store other than the ones the plan was
    /// built from.
    pub fn check_provenance(&self, model: &ModelWeights<f64>, store: &QuantStore) -> Result<()> {
        let mh = model_hash(model);
        if mh != self.provenance.model_hash {
            return Err(Error::Provenance(format!(
                "plan expects model {}, got {}",
                short(&self.provenance.model_hash),
                short(&mh)
            )));
        }
        let sh = store.hash();
        if sh != self.provenance.store_hash {
            return Err(Error::Provenance(format!(
                "plan expects store {}, got {}",
                short(&self.provenance.store_hash),
                short(&sh)
            )));
        }
        for id in model.config.layer_ids() {
            if self.layer(id).is_none() {
                return Err(Error::MissingTensor(id.to_string()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let text = self.to_json();
        fs::write(path, &text).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Pair used by a fractional `p`, or `None` when `p` is integral.
pub fn dynamic_pair(p: f64) -> Option<(u8, u8)> {
    let c = InterpCoeffs::from_p(p);
    (!c.is_integral()).then_some((c.l, c.h))
}
