//! Static per-layer, per-bit sensitivity scores from calibration gradients.
//!
//! Three scores estimate how much the loss moves when layer `i` is served at
//! `b` bits instead of full precision:
//!
//! * second order: `½ Σ_k F_kk (W − W_b)_k²` with the Fisher diagonal `F`,
//! * first order: `|⟨Σ g, W − W_b⟩|`,
//! * trace weighted: `mean(F over the layer) · ‖W − W_b‖²`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::samples_hash;
use crate::error::{Error, Result};
use crate::model::{backward, BackwardOptions, FullPrecision, LayerId, ModelWeights};
use crate::quant::{MaterializedStore, QuantStore};
use crate::tensor::Matrix;

const PROFILE_MAGIC: &str = "DPROFILE 1";
/// How the trace-weighted score averages the Fisher trace.
pub const HAWQ_TRACE_MODE: &str = "per_parameter_mean";
/// Samples summed sequentially at the leaves of the reduction tree.
const LEAF: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    SecondOrder,
    FirstOrder,
    Hawq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityProfile {
    pub n_samples: usize,
    pub corpus_hash: String,
    pub model_hash: String,
    pub store_hash: String,
    pub n_bits: u8,
    pub b_min: u8,
    /// `Σ_s g_s²` per weight.
    pub fisher: BTreeMap<LayerId, Matrix<f64>>,
    /// `Σ_s g_s` per weight.
    pub grad_sum: BTreeMap<LayerId, Matrix<f64>>,
    /// Indexed by `b − b_min`.
    pub second_order: BTreeMap<LayerId, Vec<f64>>,
    pub first_order: BTreeMap<LayerId, Vec<f64>>,
    pub hawq: BTreeMap<LayerId, Vec<f64>>,
}

pub fn second_order_score(fisher: &Matrix<f64>, w: &Matrix<f64>, wb: &Matrix<f64>) -> f64 {
    let terms: Vec<f64> = fisher
        .as_slice()
        .iter()
        .zip(w.as_slice().iter().zip(wb.as_slice()))
        .map(|(&f, (&a, &b))| f * (a - b) * (a - b))
        .collect();
    0.5 * crate::num::pairwise_sum(&terms)
}

pub fn first_order_score(grad_sum: &Matrix<f64>, w: &Matrix<f64>, wb: &Matrix<f64>) -> f64 {
    let terms: Vec<f64> = grad_sum
        .as_slice()
        .iter()
        .zip(w.as_slice().iter().zip(wb.as_slice()))
        .map(|(&g, (&a, &b))| g * (a - b))
        .collect();
    crate::num::pairwise_sum(&terms).abs()
}

pub fn hawq_score(fisher: &Matrix<f64>, w: &Matrix<f64>, wb: &Matrix<f64>) -> f64 {
    if fisher.is_empty() {
        return 0.0;
    }
    let mean = crate::num::pairwise_sum(fisher.as_slice()) / fisher.len() as f64;
    let sq: Vec<f64> = w
        .as_slice()
        .iter()
        .zip(wb.as_slice())
        .map(|(&a, &b)| (a - b) * (a - b))
        .collect();
    mean * crate::num::pairwise_sum(&sq)
}

type Accum = BTreeMap<LayerId, (Vec<f64>, Vec<f64>)>;

fn add_accum(mut a: Accum, b: Accum) -> Accum {
    for (id, (f, g)) in b {
        let (fa, ga) = a.get_mut(&id).expect("same layer set");
        for (x, y) in fa.iter_mut().zip(f) {
            *x += y;
        }
        for (x, y) in ga.iter_mut().zip(g) {
            *x += y;
        }
    }
    a
}

fn sample_accum(model: &ModelWeights<f64>, tokens: &[u32]) -> Result<Accum> {
    let opts = BackwardOptions {
        weight_grads: true,
        output_grads: false,
        embedding: false,
    };
    let pass = backward(model, tokens, &mut FullPrecision(model), opts)?;
    let mut out = Accum::new();
    for (id, g) in pass.grads.weight_grads {
        let g = g.into_vec();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {id}"),
            });
        }
        let sq = g.iter().map(|v| v * v).collect();
        out.insert(id, (sq, g));
    }
    Ok(out)
}

/// Fixed-shape reduction tree over sample indices: the grouping depends only
/// on the number of samples, never on thread scheduling.
fn reduce(model: &ModelWeights<f64>, samples: &[Vec<u32>]) -> Result<Accum> {
    if samples.len() <= LEAF {
        let parts = samples
            .par_iter()
            .map(|s| sample_accum(model, s))
            .collect::<Result<Vec<_>>>()?;
        let mut it = parts.into_iter();
        let first = it.next().expect("non-empty leaf");
        return Ok(it.fold(first, add_accum));
    }
    let mid = samples.len() / 2;
    let (a, b) = rayon::join(
        || reduce(model, &samples[..mid]),
        || reduce(model, &samples[mid..]),
    );
    Ok(add_accum(a?, b?))
}

/// Accumulate Fisher diagonals and gradient sums over `samples` at full
/// precision and tabulate all three scores for every served bit width.
pub fn profile(
    model: &ModelWeights<f64>,
    store: &QuantStore,
    weights: &MaterializedStore<f64>,
    samples: &[Vec<u32>],
) -> Result<SensitivityProfile> {
    if samples.is_empty() {
        return Err(Error::Empty("calibration set has no samples".into()));
    }
    store.check_model(model)?;
    let acc = reduce(model, samples)?;
    let mut fisher = BTreeMap::new();
    let mut grad_sum = BTreeMap::new();
    for (id, (f, g)) in acc {
        let (r, c) = model.config.linear_shape(id.kind);
        fisher.insert(id, Matrix::from_vec(r, c, f));
        grad_sum.insert(id, Matrix::from_vec(r, c, g));
    }
    let mut prof = SensitivityProfile {
        n_samples: samples.len(),
        corpus_hash: samples_hash(samples),
        model_hash: store.model_hash.clone(),
        store_hash: store.hash(),
        n_bits: store.n_bits,
        b_min: store.b_min,
        fisher,
        grad_sum,
        second_order: BTreeMap::new(),
        first_order: BTreeMap::new(),
        hawq: BTreeMap::new(),
    };
    prof.rescore(model, weights);
    Ok(prof)
}

impl SensitivityProfile {
    /// Recompute every score table from the accumulated statistics.
    pub fn rescore(&mut self, model: &ModelWeights<f64>, weights: &MaterializedStore<f64>) {
        for (&id, f) in &self.fisher {
            let g = &self.grad_sum[&id];
            let w = model.linear(id);
            let (mut so, mut fo, mut hw) = (Vec::new(), Vec::new(), Vec::new());
            for b in self.b_min..=self.n_bits {
                let wb = weights.weight(id, b);
                so.push(second_order_score(f, w, wb));
                fo.push(first_order_score(g, w, wb));
                hw.push(hawq_score(f, w, wb));
            }
            self.second_order.insert(id, so);
            self.first_order.insert(id, fo);
            self.hawq.insert(id, hw);
        }
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.fisher.keys().copied()
    }

    pub fn table(&self, kind: ScoreKind) -> &BTreeMap<LayerId, Vec<f64>> {
        match kind {
            ScoreKind::SecondOrder => &self.second_order,
            ScoreKind::FirstOrder => &self.first_order,
            ScoreKind::Hawq => &self.hawq,
        }
    }

    pub fn score(&self, kind: ScoreKind, id: LayerId, b: u8) -> Result<f64> {
        if b < self.b_min || b > self.n_bits {
            return Err(Error::BitOutOfRange {
                bit: b,
                min: self.b_min,
                max: self.n_bits,
            });
        }
        let row = self
            .table(kind)
            .get(&id)
            .ok_or_else(|| Error::MissingTensor(id.to_string()))?;
        Ok(row[(b - self.b_min) as usize])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ProfileHeader {
            n_samples: self.n_samples,
            corpus_hash: self.corpus_hash.clone(),
            model_hash: self.model_hash.clone(),
            store_hash: self.store_hash.clone(),
            hawq_trace: HAWQ_TRACE_MODE.into(),
            n_bits: self.n_bits,
            b_min: self.b_min,
            layers: self
                .fisher
                .iter()
                .map(|(&id, f)| LayerHeader {
                    id,
                    rows: f.rows(),
                    cols: f.cols(),
                    second_order: self.second_order[&id].clone(),
                    first_order: self.first_order[&id].clone(),
                    hawq: self.hawq[&id].clone(),
                })
                .collect(),
        };
        let mut out = Vec::new();
        writeln!(out, "{PROFILE_MAGIC}").unwrap();
        serde_json::to_writer(&mut out, &header).expect("header serializes");
        out.push(b'\n');
        for id in self.fisher.keys() {
            for v in self.fisher[id].as_slice().iter().chain(self.grad_sum[id].as_slice()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        if lines.next() != Some(PROFILE_MAGIC.as_bytes()) {
            return Err(Error::format(path, "not a sensitivity profile"));
        }
        let header: ProfileHeader = serde_json::from_slice(
            lines
                .next()
                .ok_or_else(|| Error::format(path, "missing header"))?,
        )
        .map_err(|e| Error::format(path, e.to_string()))?;
        let body = lines.next().unwrap_or(&[]);
        let total: usize = header.layers.iter().map(|l| 2 * l.rows * l.cols).sum();
        if body.len() != total * 8 {
            return Err(Error::io(
                path,
                std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    format!("expected {} bytes of arrays, found {}", total * 8, body.len()),
                ),
            ));
        }
        let mut vals = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut prof = SensitivityProfile {
            n_samples: header.n_samples,
            corpus_hash: header.corpus_hash,
            model_hash: header.model_hash,
            store_hash: header.store_hash,
            n_bits: header.n_bits,
            b_min: header.b_min,
            fisher: BTreeMap::new(),
            grad_sum: BTreeMap::new(),
            second_order: BTreeMap::new(),
            first_order: BTreeMap::new(),
            hawq: BTreeMap::new(),
        };
        let width = (header.n_bits - header.b_min + 1) as usize;
        for l in header.layers {
            if [&l.second_order, &l.first_order, &l.hawq].iter().any(|t| t.len() != width) {
                return Err(Error::format(path, format!("score table of {} has wrong length", l.id)));
            }
            let n = l.rows * l.cols;
            let f: Vec<f64> = vals.by_ref().take(n).collect();
            let g: Vec<f64> = vals.by_ref().take(n).collect();
            prof.fisher.insert(l.id, Matrix::from_vec(l.rows, l.cols, f));
            prof.grad_sum.insert(l.id, Matrix::from_vec(l.rows, l.cols, g));
            prof.second_order.insert(l.id, l.second_order);
            prof.first_order.insert(l.id, l.first_order);
            prof.hawq.insert(l.id, l.hawq);
        }
        Ok(prof)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[derive(Serialize, Deserialize)]
struct ProfileHeader {
    n_samples: usize,
    corpus_hash: String,
    model_hash: String,
    store_hash: String,
    hawq_trace: String,
    n_bits: u8,
    b_min: u8,
    layers: Vec<LayerHeader>,
}

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    id: LayerId,
    rows: usize,
    cols: usize,
    second_order: Vec<f64>,
    first_order: Vec<f64>,
    hawq: Vec<f64>,
}
