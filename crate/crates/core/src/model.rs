//! Transformer architecture, synthetic weights and the single-device
//! reference forward pass.
//!
//! Block layout (pre-norm):
//!
//! ```text
//! h   = x + concat_h(attn_h(LN1(x))) · W_o
//! out = h + gelu(LN2(h) · W_1) · W_2
//! ```
//!
//! followed by a closing layer norm after the last block. The causal mask is
//! applied in every block of a decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_reference, HeadWeights};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{add, concat_cols, gelu, layernorm, matmul, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Bidirectional attention (ViT / BERT style).
    Encoder,
    /// Causal attention (GPT style).
    Decoder,
}

impl ModelKind {
    pub fn is_causal(self) -> bool {
        matches!(self, ModelKind::Decoder)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub n_tokens: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_blocks: usize,
    pub kind: ModelKind,
    pub n_partitions: usize,
    /// Landmarks each partition is compressed to.
    pub landmarks: usize,
    pub ln_eps: f64,
}

impl TransformerConfig {
    /// ViT-Base/16 at 224²: 196 patches plus the class token.
    pub fn vit_base() -> Self {
        Self {
            n_tokens: 197,
            embed_dim: 768,
            head_dim: 64,
            n_heads: 12,
            ffn_dim: 3072,
            n_blocks: 12,
            kind: ModelKind::Encoder,
            n_partitions: 1,
            landmarks: 1,
            ln_eps: 1e-6,
        }
    }

    /// BERT-Base; the 256-token sequence length is inferred from the
    /// reported per-device token counts.
    pub fn bert_base() -> Self {
        Self {
            n_tokens: 256,
            ln_eps: 1e-12,
            ..Self::vit_base()
        }
    }

    /// GPT-2 small; 256 tokens inferred from reported FLOP differences.
    pub fn gpt2_base() -> Self {
        Self {
            n_tokens: 256,
            kind: ModelKind::Decoder,
            ln_eps: 1e-5,
            ..Self::vit_base()
        }
    }

    pub fn with_partitions(mut self, n_partitions: usize, landmarks: usize) -> Self {
        self.n_partitions = n_partitions;
        self.landmarks = landmarks;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_tokens == 0 || self.embed_dim == 0 || self.ffn_dim == 0 || self.n_blocks == 0 {
            return bad("dimensions and block count must be positive".into());
        }
        if self.n_heads == 0 || self.n_heads * self.head_dim != self.embed_dim {
            return bad(format!(
                "n_heads ({}) x head_dim ({}) must equal embed_dim ({})",
                self.n_heads, self.head_dim, self.embed_dim
            ));
        }
        if self.n_partitions == 0 || self.n_partitions > self.n_tokens {
            return bad(format!(
                "need 1 <= P <= N, got P={} N={}",
                self.n_partitions, self.n_tokens
            ));
        }
        let max_l = self.n_tokens / self.n_partitions;
        if self.landmarks == 0 || self.landmarks > max_l {
            return Err(Error::InvalidLandmarkCount {
                landmarks: self.landmarks,
                rows: max_l,
            });
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}

/// Weights of one Transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    pub heads: Vec<HeadWeights<T>>,
    /// `D × D` output projection applied to concatenated heads.
    pub w_o: Matrix<T>,
    pub w_ff1: Matrix<T>,
    pub w_ff2: Matrix<T>,
    pub ln1_gain: Vec<T>,
    pub ln1_bias: Vec<T>,
    pub ln2_gain: Vec<T>,
    pub ln2_bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet<T> {
    pub blocks: Vec<BlockWeights<T>>,
    pub final_gain: Vec<T>,
    pub final_bias: Vec<T>,
    pub ln_eps: T,
}

/// Draws every tensor from its own ChaCha8 stream (`seed`, stream = tensor
/// index), uniformly in `[-√3, √3) / √D`. Layer norm gains are
/// `1 + 0.1·u` and biases `0.1·u` with `u` uniform in `[-1, 1)`.
pub fn generate_weights<T: Scalar>(config: &TransformerConfig, seed: u64) -> Result<WeightSet<T>> {
    config.validate()?;
    let d_model = config.embed_dim;
    let amp = 3f64.sqrt() / (d_model as f64).sqrt();
    let mut stream = 0u64;
    let mut next_rng = || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        stream += 1;
        rng
    };
    let mut dense = |rows: usize, cols: usize| {
        let mut rng = next_rng();
        Matrix::from_fn(rows, cols, |_, _| T::lit(rng.gen_range(-amp..amp)))
    };
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for _ in 0..config.n_blocks {
        let heads = (0..config.n_heads)
            .map(|_| HeadWeights {
                w_q: dense(d_model, config.head_dim),
                w_k: dense(d_model, config.head_dim),
                w_v: dense(d_model, config.head_dim),
            })
            .collect();
        let w_o = dense(d_model, d_model);
        let w_ff1 = dense(d_model, config.ffn_dim);
        let w_ff2 = dense(config.ffn_dim, d_model);
        let [ln1_gain, ln1_bias, ln2_gain, ln2_bias] = ln_params(&mut dense, d_model);
        blocks.push(BlockWeights {
            heads,
            w_o,
            w_ff1,
            w_ff2,
            ln1_gain,
            ln1_bias,
            ln2_gain,
            ln2_bias,
        });
    }
    let [final_gain, final_bias, _, _] = ln_params(&mut dense, d_model);
    Ok(WeightSet {
        blocks,
        final_gain,
        final_bias,
        ln_eps: T::lit(config.ln_eps),
    })
}

fn ln_params<T: Scalar>(dense: &mut impl FnMut(usize, usize) -> Matrix<T>, d_model: usize) -> [Vec<T>; 4] {
    // reuse the dense generator and rescale its [-amp, amp) draws to [-1, 1)
    let amp = 3f64.sqrt() / (d_model as f64).sqrt();
    let raw = dense(4, d_model);
    let u = |i: usize| -> Vec<f64> { raw.row(i).iter().map(|v| v.to_f64_lossy() / amp).collect() };
    [
        u(0).into_iter().map(|v| T::lit(1.0 + 0.1 * v)).collect(),
        u(1).into_iter().map(|v| T::lit(0.1 * v)).collect(),
        u(2).into_iter().map(|v| T::lit(1.0 + 0.1 * v)).collect(),
        u(3).into_iter().map(|v| T::lit(0.1 * v)).collect(),
    ]
}

/// Synthetic embedded sequence: uniform noise in `[-1, 1)` plus sinusoidal
/// positional encodings, so `|x| <= 2`.
pub fn synthetic_input<T: Scalar>(config: &TransformerConfig, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let d = config.embed_dim;
    Matrix::from_fn(config.n_tokens, d, |pos, i| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        T::lit(rng.gen_range(-1.0..1.0) + pe)
    })
}

impl<T: Scalar> BlockWeights<T> {
    pub fn ln1(&self, x: &Matrix<T>, eps: T) -> Result<Matrix<T>> {
        layernorm(x, &self.ln1_gain, &self.ln1_bias, eps)
    }

    /// Everything after the per-head attention outputs: output projection,
    /// residual, second norm, feed-forward and residual. Position-wise, so
    /// it runs on any subset of rows.
    pub fn finish(&self, x: &Matrix<T>, heads: &[Matrix<T>], eps: T) -> Result<Matrix<T>> {
        let attn = matmul(&concat_cols(heads)?, &self.w_o)?;
        let h = add(x, &attn)?;
        let n = layernorm(&h, &self.ln2_gain, &self.ln2_bias, eps)?;
        let f = matmul(&gelu(&matmul(&n, &self.w_ff1)?), &self.w_ff2)?;
        add(&h, &f)
    }
}

impl<T: Scalar> WeightSet<T> {
    pub fn final_norm(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        layernorm(x, &self.final_gain, &self.final_bias, self.ln_eps)
    }

    pub fn check_config(&self, config: &TransformerConfig) -> Result<()> {
        let ok = self.blocks.len() == config.n_blocks
            && self.blocks.iter().all(|b| {
                b.heads.len() == config.n_heads
                    && b.w_o.shape() == (config.embed_dim, config.embed_dim)
                    && b.w_ff1.shape() == (config.embed_dim, config.ffn_dim)
                    && b.heads.iter().all(|h| {
                        h.w_q.shape() == (config.embed_dim, config.head_dim)
                            && h.w_k.shape() == h.w_q.shape()
                            && h.w_v.shape() == h.w_q.shape()
                    })
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Config("weight shapes do not match the config".into()))
        }
    }
}

/// Ground-truth single-device forward pass.
pub fn reference_forward<T: Scalar>(
    x: &Matrix<T>,
    w: &WeightSet<T>,
    config: &TransformerConfig,
) -> Result<Matrix<T>> {
    w.check_config(config)?;
    if x.shape() != (config.n_tokens, config.embed_dim) {
        return Err(Error::Shape {
            op: "reference_forward",
            left: x.shape(),
            right: (config.n_tokens, config.embed_dim),
        });
    }
    let causal = config.kind.is_causal();
    let mut h = x.clone();
    for block in &w.blocks {
        let normed = block.ln1(&h, w.ln_eps)?;
        let heads = block
            .heads
            .iter()
            .map(|hw| attention_reference(&normed, hw, causal))
            .collect::<Result<Vec<_>>>()?;
        h = block.finish(&h, &heads, w.ln_eps)?;
    }
    w.final_norm(&h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::row_softmax;

    fn small(kind: ModelKind) -> TransformerConfig {
        TransformerConfig {
            n_tokens: 6,
            embed_dim: 8,
            head_dim: 4,
            n_heads: 2,
            ffn_dim: 16,
            n_blocks: 2,
            kind,
            n_partitions: 2,
            landmarks: 2,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn weights_are_deterministic_in_seed() {
        let cfg = small(ModelKind::Encoder);
        let a: WeightSet<f64> = generate_weights(&cfg, 7).unwrap();
        let b: WeightSet<f64> = generate_weights(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.blocks[0].w_o.bit_eq(&b.blocks[0].w_o));
        let c: WeightSet<f64> = generate_weights(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn weight_magnitude_bound() {
        let cfg = TransformerConfig {
            embed_dim: 64,
            head_dim: 16,
            n_heads: 4,
            ffn_dim: 128,
            ..small(ModelKind::Encoder)
        };
        let w: WeightSet<f64> = generate_weights(&cfg, 3).unwrap();
        let bound = 6.0 / 8.0;
        let mut max = 0.0f64;
        for b in &w.blocks {
            for m in [&b.w_o, &b.w_ff1, &b.w_ff2] {
                max = max.max(m.as_slice().iter().fold(0.0, |a, v| a.max(v.abs())));
            }
            for h in &b.heads {
                for m in [&h.w_q, &h.w_k, &h.w_v] {
                    max = max.max(m.as_slice().iter().fold(0.0, |a, v| a.max(v.abs())));
                }
            }
        }
        assert!(max <= bound, "max {max}");
        assert!(max > 0.1);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(ModelKind::Encoder);
        assert!(cfg.validate().is_ok());
        cfg.head_dim = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small(ModelKind::Encoder);
        cfg.landmarks = 4;
        assert!(cfg.validate().is_err());
        cfg.landmarks = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = small(ModelKind::Encoder);
        cfg.n_partitions = 7;
        assert!(cfg.validate().is_err());
        for preset in [
            TransformerConfig::vit_base(),
            TransformerConfig::bert_base(),
            TransformerConfig::gpt2_base(),
        ] {
            assert!(preset.validate().is_ok());
        }
    }

    #[test]
    fn one_block_composition_oracle() {
        // one head, zero FFN, identity-like output projection: the block is
        // x + softmax(QKᵀ/√d)·LN1(x)·W_v·W_o
        let cfg = TransformerConfig {
            n_tokens: 4,
            embed_dim: 4,
            head_dim: 4,
            n_heads: 1,
            ffn_dim: 4,
            n_blocks: 1,
            kind: ModelKind::Encoder,
            n_partitions: 1,
            landmarks: 1,
            ln_eps: 1e-5,
        };
        let mut w: WeightSet<f64> = generate_weights(&cfg, 1).unwrap();
        let b = &mut w.blocks[0];
        b.heads[0].w_v = Matrix::identity(4);
        b.w_o = Matrix::identity(4);
        b.w_ff1 = Matrix::zeros(4, 4);
        b.w_ff2 = Matrix::zeros(4, 4);
        let x = synthetic_input::<f64>(&cfg, 2);

        let b = &w.blocks[0];
        let n = layernorm(&x, &b.ln1_gain, &b.ln1_bias, 1e-5).unwrap();
        let q = matmul(&n, &b.heads[0].w_q).unwrap();
        let k = matmul(&n, &b.heads[0].w_k).unwrap();
        let s = row_softmax(&matmul(&q, &k.transpose()).unwrap().map(|v| v / 2.0));
        let expect_h = add(&x, &matmul(&s, &n).unwrap()).unwrap();
        let expect = w.final_norm(&expect_h).unwrap();

        let out = reference_forward(&x, &w, &cfg).unwrap();
        assert!(out.max_abs_diff(&expect) <= 1e-12);
    }

    #[test]
    fn decoder_row_zero_ignores_future() {
        let mut cfg = small(ModelKind::Decoder);
        cfg.n_tokens = 3;
        cfg.n_partitions = 1;
        cfg.landmarks = 1;
        let w: WeightSet<f64> = generate_weights(&cfg, 5).unwrap();
        let x = synthetic_input::<f64>(&cfg, 1);
        let mut y = x.clone();
        for i in 1..3 {
            for j in 0..cfg.embed_dim {
                y.set(i, j, y.get(i, j) + 3.0);
            }
        }
        let a = reference_forward(&x, &w, &cfg).unwrap();
        let b = reference_forward(&y, &w, &cfg).unwrap();
        assert!(a.slice_rows(0, 1).unwrap().bit_eq(&b.slice_rows(0, 1).unwrap()));
        assert!(!a.slice_rows(1, 2).unwrap().bit_eq(&b.slice_rows(1, 2).unwrap()));
    }

    #[test]
    fn encoder_blocks_are_row_equivariant() {
        // positions only enter through the input, so permuting token rows
        // permutes the output rows; the output is not invariant to it
        let cfg = small(ModelKind::Encoder);
        let w: WeightSet<f64> = generate_weights(&cfg, 5).unwrap();
        let x = synthetic_input::<f64>(&cfg, 1);
        let perm = [5, 4, 3, 2, 1, 0];
        let out = reference_forward(&x, &w, &cfg).unwrap();
        let out_p = reference_forward(&x.select_rows(&perm).unwrap(), &w, &cfg).unwrap();
        assert!(out.max_abs_diff(&out_p) > 1e-3);
        assert!(out.select_rows(&perm).unwrap().max_abs_diff(&out_p) <= 1e-12);
    }

    #[test]
    fn forward_is_finite_and_deterministic() {
        let cfg = small(ModelKind::Encoder);
        let w: WeightSet<f64> = generate_weights(&cfg, 9).unwrap();
        let x = synthetic_input::<f64>(&cfg, 4);
        assert!(x.as_slice().iter().all(|v| v.abs() <= 10.0));
        let a = reference_forward(&x, &w, &cfg).unwrap();
        assert!(a.is_finite());
        assert!(a.bit_eq(&reference_forward(&x, &w, &cfg).unwrap()));
        assert!(reference_forward(&x.slice_rows(0, 5).unwrap(), &w, &cfg).is_err());
    }
}
