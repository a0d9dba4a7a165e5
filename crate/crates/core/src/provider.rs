//! Weight providers backed by explicit per-layer matrices.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{LayerId, TransposeProvider, WeightProvider};
use crate::num::Scalar;
use crate::quant::MaterializedStore;
use crate::tensor::Matrix;

/// Serves each linear layer from a borrowed matrix.
#[derive(Clone)]
pub struct MatrixProvider<'a, T> {
    mats: BTreeMap<LayerId, &'a Matrix<T>>,
}

impl<'a, T: Scalar> MatrixProvider<'a, T> {
    pub fn new(mats: BTreeMap<LayerId, &'a Matrix<T>>) -> Self {
        Self { mats }
    }

    pub fn from_owned(mats: &'a BTreeMap<LayerId, Matrix<T>>) -> Self {
        Self {
            mats: mats.iter().map(|(&k, v)| (k, v)).collect(),
        }
    }

    /// Every layer at the bit width given by `bits`.
    pub fn static_bits(weights: &'a MaterializedStore<T>, bits: &BTreeMap<LayerId, u8>) -> Result<Self> {
        let mut mats = BTreeMap::new();
        for id in weights.layer_ids() {
            let b = *bits
                .get(&id)
                .ok_or_else(|| Error::MissingTensor(id.to_string()))?;
            if b < weights.b_min() || b > weights.n_bits() {
                return Err(Error::BitOutOfRange {
                    bit: b,
                    min: weights.b_min(),
                    max: weights.n_bits(),
                });
            }
            mats.insert(id, weights.weight(id, b));
        }
        Ok(Self { mats })
    }

    pub fn matrix(&self, id: LayerId) -> &'a Matrix<T> {
        self.mats[&id]
    }
}

impl<T: Scalar> WeightProvider<T> for MatrixProvider<'_, T> {
    fn apply(&mut self, id: LayerId, _pos0: usize, xs: &Matrix<T>) -> Matrix<T> {
        self.mats[&id].apply_rows(xs)
    }
}

impl<T: Scalar> TransposeProvider<T> for MatrixProvider<'_, T> {
    fn apply_transpose(&self, id: LayerId, dys: &Matrix<T>) -> Matrix<T> {
        self.mats[&id].apply_rows_t(dys)
    }
}
