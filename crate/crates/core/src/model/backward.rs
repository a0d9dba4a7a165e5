use std::collections::BTreeMap;

use super::forward::{forward_with_tape, sigmoid, token_losses, TransposeProvider};
use super::{InputSite, LayerId, LayerKind, ModelWeights};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy)]
pub struct BackwardOptions {
    /// `∂L/∂W` for every linear layer.
    pub weight_grads: bool,
    /// `∂L/∂y` per token for every linear layer.
    pub output_grads: bool,
    /// Include the token-embedding gradient in the bundle.
    pub embedding: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            weight_grads: true,
            output_grads: true,
            embedding: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradientBundle<T> {
    pub weight_grads: BTreeMap<LayerId, Matrix<T>>,
    pub output_grads: BTreeMap<LayerId, Matrix<T>>,
    /// `None` when embeddings are excluded, never a zero matrix.
    pub embedding: Option<Matrix<T>>,
}

impl<T> GradientBundle<T> {
    pub fn weight_grad(&self, id: LayerId) -> Option<&Matrix<T>> {
        self.weight_grads.get(&id)
    }

    pub fn output_grad(&self, id: LayerId) -> Option<&Matrix<T>> {
        self.output_grads.get(&id)
    }
}

pub struct BackwardPass<T> {
    /// Mean next-token loss of the sequence, in nats.
    pub loss: f64,
    pub grads: GradientBundle<T>,
    site_inputs: BTreeMap<(usize, InputSite), Matrix<T>>,
}

impl<T: Scalar> BackwardPass<T> {
    /// Per-token inputs that layer `id` received during the forward pass.
    pub fn input(&self, id: LayerId) -> &Matrix<T> {
        &self.site_inputs[&(id.block, id.kind.site())]
    }
}

fn rmsnorm_backward<T: Scalar>(xs: &Matrix<T>, gain: &[T], rms: &[f64], dys: &Matrix<T>) -> Matrix<T> {
    let d = xs.cols() as f64;
    let mut out = Matrix::zeros(xs.rows(), xs.cols());
    for t in 0..xs.rows() {
        let r = rms[t];
        let x = xs.row(t);
        let dy = dys.row(t);
        let proj: f64 = x
            .iter()
            .zip(dy.iter().zip(gain))
            .map(|(&xv, (&dv, &g))| xv.as_f64() * dv.as_f64() * g.as_f64())
            .sum();
        let coef = proj / (d * r * r * r);
        for (o, (&xv, (&dv, &g))) in out.row_mut(t).iter_mut().zip(x.iter().zip(dy.iter().zip(gain))) {
            *o = T::from_f64_lossy(g.as_f64() * dv.as_f64() / r - xv.as_f64() * coef);
        }
    }
    out
}

fn add<T: Scalar>(mut a: Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    a.add_assign(b);
    a
}

/// Forward with a tape, then reverse-mode differentiation of the mean
/// next-token loss over `tokens` (the last token is only a target).
pub fn backward<T: Scalar, P: TransposeProvider<T>>(
    model: &ModelWeights<T>,
    tokens: &[u32],
    provider: &mut P,
    opts: BackwardOptions,
) -> Result<BackwardPass<T>> {
    if tokens.len() < 2 {
        return Err(Error::Empty("backward needs at least two tokens".into()));
    }
    let cfg = &model.config;
    let inputs = &tokens[..tokens.len() - 1];
    let targets = &tokens[1..];
    let tape = forward_with_tape(model, inputs, &mut *provider)?;
    let n = inputs.len();
    let losses = token_losses(&tape.logits, targets);
    let loss = losses.iter().sum::<f64>() / n as f64;

    // ∂L/∂logits = (softmax − onehot) / n.
    let mut dlogits = Matrix::zeros(n, cfg.vocab);
    for t in 0..n {
        let row = tape.logits.row(t);
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        for (c, dst) in dlogits.row_mut(t).iter_mut().enumerate() {
            let mut p = (row[c].as_f64() - max).exp() / z;
            if c == targets[t] as usize {
                p -= 1.0;
            }
            *dst = T::from_f64_lossy(p / n as f64);
        }
    }
    let df = model.lm_head.apply_rows_t(&dlogits);
    let mut dh = rmsnorm_backward(&tape.h_final, &model.final_norm, &tape.rms_f, &df);

    let mut grads = GradientBundle {
        weight_grads: BTreeMap::new(),
        output_grads: BTreeMap::new(),
        embedding: None,
    };
    let record = |id: LayerId, dy: &Matrix<T>, x: &Matrix<T>, grads: &mut GradientBundle<T>| {
        if opts.weight_grads {
            grads.weight_grads.insert(id, Matrix::outer_accumulate(dy, x));
        }
        if opts.output_grads {
            grads.output_grads.insert(id, dy.clone());
        }
    };

    let (nh, dh_head) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (dh_head as f64).sqrt();
    for b in (0..cfg.n_blocks).rev() {
        let bt = &tape.blocks[b];
        let blk = &model.blocks[b];
        let id = |kind| LayerId::new(b, kind);

        // MLP: h_out = h_mid + Down(silu(Gate m) ⊙ Up m)
        record(id(LayerKind::Down), &dh, &bt.z, &mut grads);
        let dz = provider.apply_transpose(id(LayerKind::Down), &dh);
        let mut du = Matrix::zeros(n, cfg.d_ff);
        let mut dg = Matrix::zeros(n, cfg.d_ff);
        for i in 0..n * cfg.d_ff {
            let g = bt.g.as_slice()[i].as_f64();
            let u = bt.u.as_slice()[i].as_f64();
            let dzv = dz.as_slice()[i].as_f64();
            let s = sigmoid(g);
            du.as_mut_slice()[i] = T::from_f64_lossy(dzv * g * s);
            dg.as_mut_slice()[i] = T::from_f64_lossy(dzv * u * s * (1.0 + g * (1.0 - s)));
        }
        record(id(LayerKind::Up), &du, &bt.m, &mut grads);
        record(id(LayerKind::Gate), &dg, &bt.m, &mut grads);
        let dm = add(
            provider.apply_transpose(id(LayerKind::Up), &du),
            &provider.apply_transpose(id(LayerKind::Gate), &dg),
        );
        let dh_mid = add(dh, &rmsnorm_backward(&bt.h_mid, &blk.mlp_norm, &bt.rms_m, &dm));

        // Attention: h_mid = x_in + O(attn(Q a, K a, V a))
        record(id(LayerKind::O), &dh_mid, &bt.attn, &mut grads);
        let dattn = provider.apply_transpose(id(LayerKind::O), &dh_mid);
        let d = cfg.d_model;
        let mut dq = vec![0.0f64; n * d];
        let mut dk = vec![0.0f64; n * d];
        let mut dv = vec![0.0f64; n * d];
        let mut dp = vec![0.0f64; n];
        for hd in 0..nh {
            let probs = &bt.probs[hd];
            let cols = hd * dh_head..(hd + 1) * dh_head;
            for i in 0..n {
                let prow = &probs[i * n..i * n + i + 1];
                let doi = &dattn.row(i)[cols.clone()];
                let mut weighted = 0.0;
                for j in 0..=i {
                    let vj = &bt.v.row(j)[cols.clone()];
                    let dpij: f64 = doi.iter().zip(vj).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    dp[j] = dpij;
                    weighted += prow[j] * dpij;
                    for (c, &dov) in cols.clone().zip(doi) {
                        dv[j * d + c] += prow[j] * dov.as_f64();
                    }
                }
                let qi = &bt.q.row(i)[cols.clone()];
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &bt.k.row(j)[cols.clone()];
                    for ((c, &kv), &qv) in cols.clone().zip(kj).zip(qi) {
                        dq[i * d + c] += ds * kv.as_f64();
                        dk[j * d + c] += ds * qv.as_f64();
                    }
                }
            }
        }
        let to_t = |v: Vec<f64>| Matrix::from_vec(n, d, v.into_iter().map(T::from_f64_lossy).collect());
        let (dq, dk, dv) = (to_t(dq), to_t(dk), to_t(dv));
        record(id(LayerKind::Q), &dq, &bt.a, &mut grads);
        record(id(LayerKind::K), &dk, &bt.a, &mut grads);
        record(id(LayerKind::V), &dv, &bt.a, &mut grads);
        let da = add(
            add(
                provider.apply_transpose(id(LayerKind::Q), &dq),
                &provider.apply_transpose(id(LayerKind::K), &dk),
            ),
            &provider.apply_transpose(id(LayerKind::V), &dv),
        );
        dh = add(dh_mid, &rmsnorm_backward(&bt.x_in, &blk.attn_norm, &bt.rms_a, &da));
    }

    if opts.embedding {
        let mut de = Matrix::zeros(cfg.vocab, cfg.d_model);
        for (t, &tok) in inputs.iter().enumerate() {
            for (dst, &g) in de.row_mut(tok as usize).iter_mut().zip(dh.row(t)) {
                *dst += g;
            }
        }
        grads.embedding = Some(de);
    }

    let mut site_inputs = BTreeMap::new();
    for (b, bt) in tape.blocks.into_iter().enumerate() {
        site_inputs.insert((b, InputSite::AttnIn), bt.a);
        site_inputs.insert((b, InputSite::AttnOut), bt.attn);
        site_inputs.insert((b, InputSite::MlpIn), bt.m);
        site_inputs.insert((b, InputSite::MlpHidden), bt.z);
    }
    Ok(BackwardPass {
        loss,
        grads,
        site_inputs,
    })
}
