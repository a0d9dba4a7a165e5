use std::collections::BTreeMap;

use super::{InputSite, LayerId, LayerKind, ModelWeights};
use crate::error::{Error, Result};
use crate::num::{dot, Scalar};
use crate::tensor::Matrix;

/// Source of the seven linear maps of every block.
///
/// `xs` holds one row per token; row `t` belongs to absolute position
/// `pos0 + t`. Implementations may pick a different weight matrix per row,
/// which is how dynamic precision selection plugs into the forward pass.
pub trait WeightProvider<T: Scalar> {
    fn apply(&mut self, id: LayerId, pos0: usize, xs: &Matrix<T>) -> Matrix<T>;
}

/// Providers whose linear maps are fixed for the whole sequence and can
/// therefore be differentiated through.
pub trait TransposeProvider<T: Scalar>: WeightProvider<T> {
    fn apply_transpose(&self, id: LayerId, dys: &Matrix<T>) -> Matrix<T>;
}

impl<T: Scalar, P: WeightProvider<T> + ?Sized> WeightProvider<T> for &mut P {
    fn apply(&mut self, id: LayerId, pos0: usize, xs: &Matrix<T>) -> Matrix<T> {
        (**self).apply(id, pos0, xs)
    }
}

/// The model's own unquantized weights.
#[derive(Clone, Copy)]
pub struct FullPrecision<'a, T>(pub &'a ModelWeights<T>);

impl<T: Scalar> WeightProvider<T> for FullPrecision<'_, T> {
    fn apply(&mut self, id: LayerId, _pos0: usize, xs: &Matrix<T>) -> Matrix<T> {
        self.0.linear(id).apply_rows(xs)
    }
}

impl<T: Scalar> TransposeProvider<T> for FullPrecision<'_, T> {
    fn apply_transpose(&self, id: LayerId, dys: &Matrix<T>) -> Matrix<T> {
        self.0.linear(id).apply_rows_t(dys)
    }
}

/// Wraps a provider and records the input rows seen at every
/// `(block, InputSite)`, in call order.
pub struct CapturingProvider<P, T> {
    pub inner: P,
    captured: BTreeMap<(usize, InputSite), (usize, Vec<T>)>,
}

impl<P, T: Scalar> CapturingProvider<P, T> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            captured: BTreeMap::new(),
        }
    }

    pub fn into_captured(self) -> BTreeMap<(usize, InputSite), Matrix<T>> {
        self.captured
            .into_iter()
            .map(|(k, (cols, data))| (k, Matrix::from_vec(data.len() / cols, cols, data)))
            .collect()
    }
}

impl<P: WeightProvider<T>, T: Scalar> WeightProvider<T> for CapturingProvider<P, T> {
    fn apply(&mut self, id: LayerId, pos0: usize, xs: &Matrix<T>) -> Matrix<T> {
        // Q/K/V and Up/Gate share an input; record it once, on the first kind.
        if matches!(id.kind, LayerKind::Q | LayerKind::O | LayerKind::Up | LayerKind::Down) {
            let entry = self
                .captured
                .entry((id.block, id.kind.site()))
                .or_insert_with(|| (xs.cols(), Vec::new()));
            entry.1.extend_from_slice(xs.as_slice());
        }
        self.inner.apply(id, pos0, xs)
    }
}

pub(crate) fn rmsnorm<T: Scalar>(xs: &Matrix<T>, gain: &[T], eps: f64) -> (Matrix<T>, Vec<f64>) {
    let d = xs.cols();
    let mut out = Matrix::zeros(xs.rows(), d);
    let mut rms = Vec::with_capacity(xs.rows());
    for t in 0..xs.rows() {
        let x = xs.row(t);
        let r = (dot(x, x) / d as f64 + eps).sqrt();
        for (o, (&xv, &g)) in out.row_mut(t).iter_mut().zip(x.iter().zip(gain)) {
            *o = T::from_f64_lossy(g.as_f64() * xv.as_f64() / r);
        }
        rms.push(r);
    }
    (out, rms)
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub(crate) struct BlockTape<T> {
    pub x_in: Matrix<T>,
    pub a: Matrix<T>,
    pub rms_a: Vec<f64>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Per head, row-major `n × n` causal attention probabilities.
    pub probs: Vec<Vec<f64>>,
    pub attn: Matrix<T>,
    pub h_mid: Matrix<T>,
    pub m: Matrix<T>,
    pub rms_m: Vec<f64>,
    pub u: Matrix<T>,
    pub g: Matrix<T>,
    pub z: Matrix<T>,
}

pub(crate) struct Tape<T> {
    pub blocks: Vec<BlockTape<T>>,
    pub h_final: Matrix<T>,
    pub rms_f: Vec<f64>,
    pub logits: Matrix<T>,
}

/// Incremental decoding state: the key/value cache of every block.
pub struct Session<'m, T> {
    model: &'m ModelWeights<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<'m, T: Scalar> Session<'m, T> {
    pub fn new(model: &'m ModelWeights<T>) -> Self {
        let n = model.config.n_blocks;
        Self {
            model,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Number of positions already in the cache.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Run `tokens` at the next positions and return their logits.
    pub fn extend<P: WeightProvider<T> + ?Sized>(
        &mut self,
        tokens: &[u32],
        provider: &mut P,
    ) -> Result<Matrix<T>> {
        self.run(tokens, provider, None)
    }

    pub(crate) fn run<P: WeightProvider<T> + ?Sized>(
        &mut self,
        tokens: &[u32],
        provider: &mut P,
        mut tape: Option<&mut Tape<T>>,
    ) -> Result<Matrix<T>> {
        let cfg = &self.model.config;
        let pos0 = self.len;
        let n = tokens.len();
        if pos0 + n > cfg.seq_cap {
            return Err(Error::SequenceTooLong {
                len: pos0 + n,
                cap: cfg.seq_cap,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::InvalidArgument(format!(
                "token {bad} outside vocabulary of {}",
                cfg.vocab
            )));
        }
        let d = cfg.d_model;
        let mut h = Matrix::from_fn(n, d, |t, c| {
            self.model.embed.get(tokens[t] as usize, c) + self.model.pos_embed.get(pos0 + t, c)
        });

        for b in 0..cfg.n_blocks {
            let blk = &self.model.blocks[b];
            let id = |kind| LayerId::new(b, kind);
            let x_in = h.clone();
            let (a, rms_a) = rmsnorm(&h, &blk.attn_norm, cfg.norm_eps);
            let q = provider.apply(id(LayerKind::Q), pos0, &a);
            let k = provider.apply(id(LayerKind::K), pos0, &a);
            let v = provider.apply(id(LayerKind::V), pos0, &a);
            self.keys[b].extend_from_slice(k.as_slice());
            self.values[b].extend_from_slice(v.as_slice());
            let (attn, probs) = self.attend(b, pos0, &q, tape.is_some());
            let o = provider.apply(id(LayerKind::O), pos0, &attn);
            h.add_assign(&o);
            let h_mid = h.clone();

            let (m, rms_m) = rmsnorm(&h, &blk.mlp_norm, cfg.norm_eps);
            let u = provider.apply(id(LayerKind::Up), pos0, &m);
            let g = provider.apply(id(LayerKind::Gate), pos0, &m);
            let mut z = Matrix::zeros(n, cfg.d_ff);
            for ((zv, &uv), &gv) in z
                .as_mut_slice()
                .iter_mut()
                .zip(u.as_slice())
                .zip(g.as_slice())
            {
                let gf = gv.as_f64();
                *zv = T::from_f64_lossy(gf * sigmoid(gf) * uv.as_f64());
            }
            let down = provider.apply(id(LayerKind::Down), pos0, &z);
            h.add_assign(&down);

            if let Some(t) = tape.as_deref_mut() {
                t.blocks.push(BlockTape {
                    x_in,
                    a,
                    rms_a,
                    q,
                    k,
                    v,
                    probs,
                    attn,
                    h_mid,
                    m,
                    rms_m,
                    u,
                    g,
                    z,
                });
            }
        }
        self.len += n;

        let (f, rms_f) = rmsnorm(&h, &self.model.final_norm, cfg.norm_eps);
        let logits = self.model.lm_head.apply_rows(&f);
        if let Some(t) = tape {
            t.h_final = h;
            t.rms_f = rms_f;
            t.logits = logits.clone();
        }
        Ok(logits)
    }

    /// Causal attention of the new query rows over the full cache.
    fn attend(
        &self,
        block: usize,
        pos0: usize,
        q: &Matrix<T>,
        keep_probs: bool,
    ) -> (Matrix<T>, Vec<Vec<f64>>) {
        let cfg = &self.model.config;
        let (d, nh, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let n = q.rows();
        let total = pos0 + n;
        let scale = 1.0 / (dh as f64).sqrt();
        let keys = &self.keys[block];
        let values = &self.values[block];
        let mut out = Matrix::zeros(n, d);
        let mut probs = if keep_probs {
            vec![vec![0.0; n * total]; nh]
        } else {
            Vec::new()
        };
        let mut scores = vec![0.0f64; total];
        for i in 0..n {
            let span = pos0 + i + 1;
            for hd in 0..nh {
                let qs = &q.row(i)[hd * dh..(hd + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate().take(span) {
                    let ks = &keys[j * d + hd * dh..j * d + (hd + 1) * dh];
                    *s = dot(qs, ks) * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut().take(span) {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let mut acc = vec![0.0f64; dh];
                for (j, s) in scores.iter_mut().enumerate().take(span) {
                    *s /= z;
                    let vs = &values[j * d + hd * dh..j * d + (hd + 1) * dh];
                    for (a, &vv) in acc.iter_mut().zip(vs) {
                        *a += *s * vv.as_f64();
                    }
                }
                if keep_probs {
                    probs[hd][i * total..i * total + span].copy_from_slice(&scores[..span]);
                }
                for (o, a) in out.row_mut(i)[hd * dh..(hd + 1) * dh].iter_mut().zip(acc) {
                    *o = T::from_f64_lossy(a);
                }
            }
        }
        (out, probs)
    }
}

pub(crate) fn forward_with_tape<T: Scalar, P: WeightProvider<T> + ?Sized>(
    model: &ModelWeights<T>,
    tokens: &[u32],
    provider: &mut P,
) -> Result<Tape<T>> {
    let mut tape = Tape {
        blocks: Vec::with_capacity(model.config.n_blocks),
        h_final: Matrix::zeros(0, 0),
        rms_f: Vec::new(),
        logits: Matrix::zeros(0, 0),
    };
    Session::new(model).run(tokens, provider, Some(&mut tape))?;
    Ok(tape)
}

/// Logits for every position of `tokens`, starting from an empty cache.
pub fn forward<T: Scalar, P: WeightProvider<T> + ?Sized>(
    model: &ModelWeights<T>,
    tokens: &[u32],
    provider: &mut P,
) -> Result<Matrix<T>> {
    Session::new(model).extend(tokens, provider)
}

/// Next-token cross-entropy (nats) of every row of `logits` against the
/// following token. `logits.rows()` predictions consume `targets`.
pub fn token_losses<T: Scalar>(logits: &Matrix<T>, targets: &[u32]) -> Vec<f64> {
    targets
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            let row = logits.row(t);
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            lse - row[tok as usize].as_f64()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub mean_loss: f64,
    pub perplexity: f64,
    pub n_predictions: usize,
}

impl LossReport {
    pub fn from_sum(sum: f64, n: usize) -> Self {
        let mean_loss = sum / n as f64;
        Self {
            mean_loss,
            perplexity: mean_loss.exp(),
            n_predictions: n,
        }
    }
}

pub fn teacher_forced_loss<T: Scalar, P: WeightProvider<T> + ?Sized>(
    model: &ModelWeights<T>,
    tokens: &[u32],
    provider: &mut P,
) -> Result<LossReport> {
    if tokens.len() < 2 {
        return Err(Error::Empty("teacher forcing needs at least two tokens".into()));
    }
    let logits = forward(model, &tokens[..tokens.len() - 1], provider)?;
    let losses = token_losses(&logits, &tokens[1..]);
    Ok(LossReport::from_sum(losses.iter().sum(), losses.len()))
}

/// Same quantity as [`teacher_forced_loss`], fed through the cache in chunks.
pub fn teacher_forced_loss_chunked<T: Scalar, P: WeightProvider<T> + ?Sized>(
    model: &ModelWeights<T>,
    tokens: &[u32],
    chunk: usize,
    provider: &mut P,
) -> Result<LossReport> {
    if tokens.len() < 2 {
        return Err(Error::Empty("teacher forcing needs at least two tokens".into()));
    }
    if chunk == 0 {
        return Err(Error::InvalidArgument("chunk size must be positive".into()));
    }
    let inputs = &tokens[..tokens.len() - 1];
    let mut session = Session::new(model);
    let mut losses = Vec::with_capacity(inputs.len());
    for (c, piece) in inputs.chunks(chunk).enumerate() {
        let logits = session.extend(piece, provider)?;
        let start = c * chunk + 1;
        losses.extend(token_losses(&logits, &tokens[start..start + piece.len()]));
    }
    Ok(LossReport::from_sum(losses.iter().sum(), losses.len()))
}
