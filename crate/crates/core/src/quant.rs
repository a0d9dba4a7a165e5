//! Nested multi-scale quantization.
//!
//! Each output row is quantized affinely onto `2^n` cells between its min and
//! max. A `b`-bit variant keeps the top `b` bits of every code and
//! reconstructs at the midpoint of the coarser cell, so one code array serves
//! every bit width from `b_min` to `n_bits`.
//!
//! Row bounds are stored as `f32` (rounded outward), and reconstruction is
//! `lo + (2c + 1)·(hi − lo) / 2^(b+1)` evaluated in `f64`. For ordinary weight
//! ranges every term is exact, so `ΔW + W_l == W_h` holds bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{model_hash, LayerId, LayerKind, ModelWeights};
use crate::num::{f32_round_down, f32_round_up, Scalar};
use crate::tensor::Matrix;

pub const STORE_MAGIC: &[u8; 8] = b"NQSTORE\0";
pub const STORE_VERSION: u32 = 1;
/// Codes are packed least-significant bit first within each byte.
pub const BIT_ORDER_LSB_FIRST: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    rows: usize,
    cols: usize,
    n_bits: u8,
    b_min: u8,
    lo: Vec<f32>,
    hi: Vec<f32>,
    /// One full-width code per weight, row-major.
    codes: Vec<u8>,
}

fn check_bits(n_bits: u8, b_min: u8) -> Result<()> {
    if !(1..=8).contains(&n_bits) || b_min == 0 || b_min > n_bits {
        return Err(Error::Config(format!(
            "quantization needs 1 <= b_min <= n_bits <= 8, got b_min={b_min}, n_bits={n_bits}"
        )));
    }
    Ok(())
}

/// Midpoint reconstruction of truncated code `c` at `b` bits.
#[inline]
fn reconstruct(lo: f32, hi: f32, c: u32, b: u8) -> f64 {
    let (lo, hi) = (lo as f64, hi as f64);
    if hi == lo {
        return lo;
    }
    let span = hi - lo;
    lo + ((2 * c + 1) as f64 * span) / (1u64 << (b + 1)) as f64
}

pub fn quantize_layer<T: Scalar>(w: &Matrix<T>, n_bits: u8, b_min: u8) -> Result<QuantizedLayer> {
    check_bits(n_bits, b_min)?;
    if w.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "weight matrix".into(),
        });
    }
    let (rows, cols) = w.shape();
    let levels = 1u32 << n_bits;
    let mut lo = Vec::with_capacity(rows);
    let mut hi = Vec::with_capacity(rows);
    let mut codes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = w.row(r);
        let min = row.iter().map(|v| v.as_f64()).fold(f64::INFINITY, f64::min);
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let (l, h) = if cols == 0 {
            (0.0, 0.0)
        } else {
            (f32_round_down(min), f32_round_up(max))
        };
        lo.push(l);
        hi.push(h);
        if l == h {
            codes.extend(std::iter::repeat_n(0u8, cols));
            continue;
        }
        let (lf, step) = (l as f64, (h as f64 - l as f64) / levels as f64);
        for &v in row {
            let v = v.as_f64();
            let mut c = ((v - lf) / step).floor().clamp(0.0, (levels - 1) as f64) as u32;
            // Division may land one cell off near a boundary; settle on the
            // cell whose midpoint is nearest.
            let err = |c: u32| (v - reconstruct(l, h, c, n_bits)).abs();
            if c > 0 && err(c - 1) < err(c) {
                c -= 1;
            } else if c + 1 < levels && err(c + 1) < err(c) {
                c += 1;
            }
            codes.push(c as u8);
        }
    }
    Ok(QuantizedLayer {
        rows,
        cols,
        n_bits,
        b_min,
        lo,
        hi,
        codes,
    })
}

impl QuantizedLayer {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn n_bits(&self) -> u8 {
        self.n_bits
    }

    pub fn b_min(&self) -> u8 {
        self.b_min
    }

    pub fn lo(&self) -> &[f32] {
        &self.lo
    }

    pub fn hi(&self) -> &[f32] {
        &self.hi
    }

    /// Full-width codes, row-major.
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn check_bit(&self, b: u8) -> Result<()> {
        if b < self.b_min || b > self.n_bits {
            return Err(Error::BitOutOfRange {
                bit: b,
                min: self.b_min,
                max: self.n_bits,
            });
        }
        Ok(())
    }

    /// Codes truncated to their top `b` bits.
    pub fn codes_at(&self, b: u8) -> Result<Vec<u8>> {
        self.check_bit(b)?;
        let shift = self.n_bits - b;
        Ok(self.codes.iter().map(|&c| c >> shift).collect())
    }

    pub fn dequantize<T: Scalar>(&self, b: u8) -> Result<Matrix<T>> {
        self.check_bit(b)?;
        let shift = self.n_bits - b;
        Ok(Matrix::from_fn(self.rows, self.cols, |r, c| {
            let code = (self.codes[r * self.cols + c] >> shift) as u32;
            T::from_f64_lossy(reconstruct(self.lo[r], self.hi[r], code, b))
        }))
    }

    /// `W_h − W_l`.
    pub fn delta<T: Scalar>(&self, l: u8, h: u8) -> Result<Matrix<T>> {
        if l >= h {
            return Err(Error::InvalidArgument(format!(
                "delta needs l < h, got l={l}, h={h}"
            )));
        }
        let wl = self.dequantize::<f64>(l)?;
        let wh = self.dequantize::<f64>(h)?;
        Ok(wh.sub(&wl).cast())
    }

    /// `dequantize(b) · x` without materializing the matrix.
    pub fn gemv<T: Scalar>(&self, b: u8, x: &[T]) -> Result<Vec<T>> {
        self.check_bit(b)?;
        if x.len() != self.cols {
            return Err(Error::Dimension {
                expected: self.cols,
                found: x.len(),
            });
        }
        let shift = self.n_bits - b;
        let denom = (1u64 << (b + 1)) as f64;
        let sum_x: f64 = x.iter().map(|v| v.as_f64()).sum();
        Ok((0..self.rows)
            .map(|r| {
                let (lo, hi) = (self.lo[r] as f64, self.hi[r] as f64);
                if hi == lo {
                    return T::from_f64_lossy(lo * sum_x);
                }
                let codes = &self.codes[r * self.cols..(r + 1) * self.cols];
                let mut acc = 0.0;
                for (&c, &xv) in codes.iter().zip(x) {
                    acc += (2 * (c >> shift) as u32 + 1) as f64 * xv.as_f64();
                }
                T::from_f64_lossy(lo * sum_x + (hi - lo) / denom * acc)
            })
            .collect())
    }

    /// Bytes needed for the packed code array.
    pub fn packed_code_bytes(&self) -> usize {
        (self.codes.len() * self.n_bits as usize).div_ceil(8)
    }
}

fn pack_codes(codes: &[u8], n_bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; (codes.len() * n_bits as usize).div_ceil(8)];
    let mut bit = 0usize;
    for &c in codes {
        for k in 0..n_bits {
            if (c >> k) & 1 == 1 {
                out[bit / 8] |= 1 << (bit % 8);
            }
            bit += 1;
        }
    }
    out
}

fn unpack_codes(packed: &[u8], count: usize, n_bits: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(count);
    let mut bit = 0usize;
    for _ in 0..count {
        let mut c = 0u8;
        for k in 0..n_bits {
            if (packed[bit / 8] >> (bit % 8)) & 1 == 1 {
                c |= 1 << k;
            }
            bit += 1;
        }
        out.push(c);
    }
    out
}

/// Every linear layer of one model quantized with shared `(n_bits, b_min)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantStore {
    pub n_bits: u8,
    pub b_min: u8,
    /// Hex SHA-256 of the source model.
    pub model_hash: String,
    pub layers: BTreeMap<LayerId, QuantizedLayer>,
}

impl QuantStore {
    pub fn quantize_model<T: Scalar>(model: &ModelWeights<T>, n_bits: u8, b_min: u8) -> Result<Self> {
        check_bits(n_bits, b_min)?;
        let mut layers = BTreeMap::new();
        for id in model.config.layer_ids() {
            layers.insert(id, quantize_layer(model.linear(id), n_bits, b_min)?);
        }
        Ok(Self {
            n_bits,
            b_min,
            model_hash: model_hash(model),
            layers,
        })
    }

    pub fn layer(&self, id: LayerId) -> Result<&QuantizedLayer> {
        self.layers
            .get(&id)
            .ok_or_else(|| Error::MissingTensor(id.to_string()))
    }

    pub fn bits(&self) -> std::ops::RangeInclusive<u8> {
        self.b_min..=self.n_bits
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&[self.n_bits, self.b_min, BIT_ORDER_LSB_FIRST, 0]);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        let mut hash = [0u8; 32];
        if let Ok(raw) = hex::decode(&self.model_hash) {
            if raw.len() == 32 {
                hash.copy_from_slice(&raw);
            }
        }
        out.extend_from_slice(&hash);
        for (id, layer) in &self.layers {
            out.extend_from_slice(&(id.block as u32).to_le_bytes());
            out.push(id.kind.index() as u8);
            out.extend_from_slice(&(layer.rows as u32).to_le_bytes());
            out.extend_from_slice(&(layer.cols as u32).to_le_bytes());
            for v in layer.lo.iter().chain(&layer.hi) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let packed = pack_codes(&layer.codes, self.n_bits);
            out.extend_from_slice(&(packed.len() as u64).to_le_bytes());
            out.extend_from_slice(&packed);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0, path };
        if rd.take(8)? != STORE_MAGIC {
            return Err(Error::format(path, "not a quantized store (bad magic)"));
        }
        let version = rd.u32()?;
        if version != STORE_VERSION {
            return Err(Error::format(path, format!("unsupported store version {version}")));
        }
        let head = rd.take(4)?;
        let (n_bits, b_min, order) = (head[0], head[1], head[2]);
        check_bits(n_bits, b_min)?;
        if order != BIT_ORDER_LSB_FIRST {
            return Err(Error::format(path, format!("unknown bit order {order}")));
        }
        let count = rd.u32()? as usize;
        let model_hash = hex::encode(rd.take(32)?);
        let mut layers = BTreeMap::new();
        for _ in 0..count {
            let block = rd.u32()? as usize;
            let kind_idx = rd.take(1)?[0] as usize;
            let kind = *LayerKind::ALL
                .get(kind_idx)
                .ok_or_else(|| Error::format(path, format!("unknown layer kind {kind_idx}")))?;
            let rows = rd.u32()? as usize;
            let cols = rd.u32()? as usize;
            let mut bounds = Vec::with_capacity(2 * rows);
            for _ in 0..2 * rows {
                bounds.push(f32::from_le_bytes(rd.take(4)?.try_into().unwrap()));
            }
            let hi = bounds.split_off(rows);
            let lo = bounds;
            let n_packed = rd.u64()? as usize;
            if n_packed != (rows * cols * n_bits as usize).div_ceil(8) {
                return Err(Error::format(path, "packed code length does not match shape"));
            }
            let codes = unpack_codes(rd.take(n_packed)?, rows * cols, n_bits);
            layers.insert(
                LayerId::new(block, kind),
                QuantizedLayer {
                    rows,
                    cols,
                    n_bits,
                    b_min,
                    lo,
                    hi,
                    codes,
                },
            );
        }
        if rd.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last layer"));
        }
        Ok(Self {
            n_bits,
            b_min,
            model_hash,
            layers,
        })
    }

    /// Hex SHA-256 of the serialized store.
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

    /// Check that this store was built from `model` and covers its layers.
    pub fn check_model<T: Scalar>(&self, model: &ModelWeights<T>) -> Result<()> {
        let hash = model_hash(model);
        if hash != self.model_hash {
            return Err(Error::Provenance(format!(
                "store was built from model {}, loaded model is {}",
                short(&self.model_hash),
                short(&hash)
            )));
        }
        for id in model.config.layer_ids() {
            let layer = self.layer(id)?;
            let expected = model.config.linear_shape(id.kind);
            if layer.shape() != expected {
                return Err(Error::Shape {
                    tensor: id.to_string(),
                    expected: vec![expected.0, expected.1],
                    found: vec![layer.rows, layer.cols],
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::io(
                self.path,
                std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "store file is truncated"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Dequantized matrices for every layer at every served bit width, plus the
/// neighbouring-pair deltas, materialized once.
pub struct MaterializedStore<T> {
    n_bits: u8,
    b_min: u8,
    weights: BTreeMap<LayerId, Vec<Matrix<T>>>,
    deltas: BTreeMap<LayerId, Vec<Matrix<T>>>,
}

impl<T: Scalar> MaterializedStore<T> {
    pub fn new(store: &QuantStore) -> Result<Self> {
        let mut weights = BTreeMap::new();
        let mut deltas = BTreeMap::new();
        for (&id, layer) in &store.layers {
            let ws = store
                .bits()
                .map(|b| layer.dequantize::<f64>(b))
                .collect::<Result<Vec<_>>>()?;
            let ds = ws.windows(2).map(|w| w[1].sub(&w[0]).cast()).collect();
            weights.insert(id, ws.iter().map(Matrix::cast).collect());
            deltas.insert(id, ds);
        }
        Ok(Self {
            n_bits: store.n_bits,
            b_min: store.b_min,
            weights,
            deltas,
        })
    }

    pub fn n_bits(&self) -> u8 {
        self.n_bits
    }

    pub fn b_min(&self) -> u8 {
        self.b_min
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.weights.keys().copied()
    }

    pub fn weight(&self, id: LayerId, b: u8) -> &Matrix<T> {
        assert!(
            (self.b_min..=self.n_bits).contains(&b),
            "bit {b} outside served range"
        );
        &self.weights[&id][(b - self.b_min) as usize]
    }

    /// `W_h − W_l` for `h = l + 1`.
    pub fn neighbor_delta(&self, id: LayerId, l: u8) -> &Matrix<T> {
        assert!(
            l >= self.b_min && l < self.n_bits,
            "no neighbouring pair starts at bit {l}"
        );
        &self.deltas[&id][(l - self.b_min) as usize]
    }

    /// `W_h − W_l` for any `l < h`.
    pub fn delta(&self, id: LayerId, l: u8, h: u8) -> Result<Matrix<T>> {
        if l >= h {
            return Err(Error::InvalidArgument(format!(
                "delta needs l < h, got l={l}, h={h}"
            )));
        }
        if h == l + 1 {
            return Ok(self.neighbor_delta(id, l).clone());
        }
        Ok(self.weight(id, h).sub(self.weight(id, l)))
    }
}
