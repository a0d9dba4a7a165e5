//! Desk-scale decoder-only transformer.
//!
//! Pre-norm blocks with RMSNorm, causal multi-head attention (Q, K, V, O) and
//! a gated MLP (Up, Gate, Down), learned absolute position embeddings and an
//! untied output head over a byte vocabulary. Only the seven linear layers of
//! each block are quantized; the forward pass obtains them through a
//! [`WeightProvider`] so full-precision, quantized, interpolated and
//! dynamically selected weights all share one execution path.

mod backward;
mod forward;
mod io;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::tensor::Matrix;

pub use backward::{backward, BackwardOptions, BackwardPass, GradientBundle};
pub use forward::{
    forward, teacher_forced_loss, teacher_forced_loss_chunked, token_losses, CapturingProvider,
    FullPrecision, LossReport, Session, TransposeProvider, WeightProvider,
};
pub use io::{export_weights, load_weights, model_hash, TensorEntry, WeightManifest};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub seq_cap: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// The bundled toy model used by the CLI defaults and the acceptance suite.
    pub fn toy() -> Self {
        Self {
            n_blocks: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab: 256,
            seq_cap: 128,
            norm_eps: 1e-6,
        }
    }

    /// Two blocks of width 16, small enough for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            n_blocks: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab: 256,
            seq_cap: 32,
            norm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_blocks", self.n_blocks),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("seq_cap", self.seq_cap),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.norm_eps > 0.0) || !self.norm_eps.is_finite() {
            return Err(Error::Config("norm_eps must be a positive real".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(rows, cols)` of a linear layer, i.e. `(out_features, in_features)`.
    pub fn linear_shape(&self, kind: LayerKind) -> (usize, usize) {
        let (d, f) = (self.d_model, self.d_ff);
        match kind {
            LayerKind::Q | LayerKind::K | LayerKind::V | LayerKind::O => (d, d),
            LayerKind::Up | LayerKind::Gate => (f, d),
            LayerKind::Down => (d, f),
        }
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        (0..self.n_blocks)
            .flat_map(|block| LayerKind::ALL.iter().map(move |&kind| LayerId { block, kind }))
            .collect()
    }

    pub fn param_count(&self, id: LayerId) -> u64 {
        let (r, c) = self.linear_shape(id.kind);
        (r * c) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

/// Where a linear layer reads its input from inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InputSite {
    /// Normalized residual stream before attention (Q, K, V).
    AttnIn,
    /// Concatenated attention heads (O).
    AttnOut,
    /// Normalized residual stream before the MLP (Up, Gate).
    MlpIn,
    /// Gated MLP hidden activation (Down).
    MlpHidden,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Q,
        LayerKind::K,
        LayerKind::V,
        LayerKind::O,
        LayerKind::Up,
        LayerKind::Gate,
        LayerKind::Down,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Q => "q",
            LayerKind::K => "k",
            LayerKind::V => "v",
            LayerKind::O => "o",
            LayerKind::Up => "up",
            LayerKind::Gate => "gate",
            LayerKind::Down => "down",
        }
    }

    pub fn site(self) -> InputSite {
        match self {
            LayerKind::Q | LayerKind::K | LayerKind::V => InputSite::AttnIn,
            LayerKind::O => InputSite::AttnOut,
            LayerKind::Up | LayerKind::Gate => InputSite::MlpIn,
            LayerKind::Down => InputSite::MlpHidden,
        }
    }

    /// Q, K, V and Up are the layers eligible for asynchronous estimation.
    /// Gate reads the same normalized vector as Up but is not in that set.
    pub fn is_residual_fed(self) -> bool {
        matches!(self, LayerKind::Q | LayerKind::K | LayerKind::V | LayerKind::Up)
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown layer kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub block: usize,
    pub kind: LayerKind,
}

impl LayerId {
    pub fn new(block: usize, kind: LayerKind) -> Self {
        Self { block, kind }
    }

    pub fn is_residual_fed(self) -> bool {
        self.kind.is_residual_fed()
    }

    pub fn tensor_name(self) -> String {
        self.to_string()
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.block, self.kind.name())
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed layer id `{s}`"));
        let rest = s.strip_prefix("blocks.").ok_or_else(bad)?;
        let (block, kind) = rest.split_once('.').ok_or_else(bad)?;
        Ok(LayerId {
            block: block.parse().map_err(|_| bad())?,
            kind: kind.parse()?,
        })
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub attn_norm: Vec<T>,
    pub mlp_norm: Vec<T>,
    /// Indexed by [`LayerKind::index`].
    pub linears: Vec<Matrix<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    pub embed: Matrix<T>,
    pub pos_embed: Matrix<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Matrix<T>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn linear(&self, id: LayerId) -> &Matrix<T> {
        &self.blocks[id.block].linears[id.kind.index()]
    }

    pub fn linear_mut(&mut self, id: LayerId) -> &mut Matrix<T> {
        &mut self.blocks[id.block].linears[id.kind.index()]
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        let v = |x: &Vec<T>| x.iter().map(|&e| U::from_f64_lossy(e.as_f64())).collect();
        ModelWeights {
            config: self.config,
            embed: self.embed.cast(),
            pos_embed: self.pos_embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    attn_norm: v(&b.attn_norm),
                    mlp_norm: v(&b.mlp_norm),
                    linears: b.linears.iter().map(Matrix::cast).collect(),
                })
                .collect(),
            final_norm: v(&self.final_norm),
            lm_head: self.lm_head.cast(),
        }
    }

    /// Visit every tensor in canonical manifest order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &[usize], &[T])) {
        let c = &self.config;
        f("embed", &[c.vocab, c.d_model], self.embed.as_slice());
        f("pos_embed", &[c.seq_cap, c.d_model], self.pos_embed.as_slice());
        for (b, blk) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{b}.attn_norm"), &[c.d_model], &blk.attn_norm);
            f(&format!("blocks.{b}.mlp_norm"), &[c.d_model], &blk.mlp_norm);
            for kind in LayerKind::ALL {
                let m = &blk.linears[kind.index()];
                let id = LayerId::new(b, kind);
                f(&id.tensor_name(), &[m.rows(), m.cols()], m.as_slice());
            }
        }
        f("final_norm", &[c.d_model], &self.final_norm);
        f("lm_head", &[c.vocab, c.d_model], self.lm_head.as_slice());
    }

    /// Order-sensitive FNV-style checksum over the bit patterns of every tensor.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.for_each_tensor(|_, _, data| {
            for v in data {
                h ^= v.as_f64().to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        });
        h
    }
}

/// Deterministic random initialization. Every value is representable in
/// `f32` so exporting and reloading is lossless for any scalar type.
pub fn init_model<T: Scalar>(seed: u64, config: ModelConfig) -> Result<ModelWeights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |rows: usize, cols: usize, std: f64| {
        Matrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64_lossy((z * std) as f32 as f64)
        })
    };
    let d = config.d_model;
    let embed = gauss(config.vocab, d, 1.0);
    let pos_embed = gauss(config.seq_cap, d, 0.1);
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for _ in 0..config.n_blocks {
        let linears = LayerKind::ALL
            .iter()
            .map(|&k| {
                let (r, c) = config.linear_shape(k);
                gauss(r, c, 1.0 / (c as f64).sqrt())
            })
            .collect();
        blocks.push(BlockWeights {
            attn_norm: vec![T::one(); d],
            mlp_norm: vec![T::one(); d],
            linears,
        });
    }
    // Small output head keeps a fresh model's predictive distribution close
    // to uniform over the vocabulary.
    let lm_head = gauss(config.vocab, d, 0.1 / (d as f64).sqrt());
    Ok(ModelWeights {
        config,
        embed,
        pos_embed,
        blocks,
        final_norm: vec![T::one(); d],
        lm_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let a = init_model::<f64>(1, cfg).unwrap();
        let b = init_model::<f64>(1, cfg).unwrap();
        let c = init_model::<f64>(2, cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a, b);
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::tiny();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny();
        cfg.norm_eps = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny();
        cfg.vocab = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn layer_ids_cover_seven_per_block() {
        let cfg = ModelConfig::toy();
        let ids = cfg.layer_ids();
        assert_eq!(ids.len(), 7 * cfg.n_blocks);
        let fed: Vec<_> = LayerKind::ALL.iter().filter(|k| k.is_residual_fed()).collect();
        assert_eq!(
            fed,
            vec![&LayerKind::Q, &LayerKind::K, &LayerKind::V, &LayerKind::Up]
        );
    }

    #[test]
    fn layer_id_text_round_trip() {
        let id = LayerId::new(3, LayerKind::Gate);
        assert_eq!(id.to_string(), "blocks.3.gate");
        assert_eq!("blocks.3.gate".parse::<LayerId>().unwrap(), id);
        assert!("blocks.x.q".parse::<LayerId>().is_err());
        assert!("blocks.1.w".parse::<LayerId>().is_err());
    }
}
