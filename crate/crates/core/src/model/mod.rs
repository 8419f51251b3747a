//! Decoder-only transformer with an instrumented forward pass.
//!
//! Architecture: pre-norm RMSNorm blocks without biases, learned absolute
//! position embeddings added into the initial residual state, and
//! squared-ReLU MLPs. Attention and MLP inside a block both read the block's
//! input residual (parallel residual form), so a layer writes
//! `x_l = x_{l-1} + a_l + m_l`.

mod backward;
mod forward;
pub mod io;

pub use backward::{AdamState, LabelTarget};
pub use forward::{ComponentMask, ForwardTrace, LayerTrace, ResidualWrites};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tensor2D, DEFAULT_EPS};
use crate::seed;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub eps: f32,
}

impl ModelConfig {
    /// `d_head` is derived as `d_model / n_heads`.
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        d_mlp: usize,
        vocab_size: usize,
        max_seq: usize,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Input(format!(
                "d_model {d_model} not divisible by n_heads {n_heads}"
            )));
        }
        let cfg = Self {
            n_layers,
            n_heads,
            d_model,
            d_head: d_model / n_heads,
            d_mlp,
            vocab_size,
            max_seq,
            eps: DEFAULT_EPS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.n_layers < 1 {
            return bad("n_layers must be >= 1".into());
        }
        if self.n_heads < 1 {
            return bad("n_heads must be >= 1".into());
        }
        if self.n_heads * self.d_head != self.d_model {
            return bad(format!(
                "n_heads {} x d_head {} != d_model {}",
                self.n_heads, self.d_head, self.d_model
            ));
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2".into());
        }
        if self.d_mlp < 1 || self.max_seq < 1 {
            return bad("d_mlp and max_seq must be >= 1".into());
        }
        if !(self.eps >= 0.0) {
            return bad(format!("eps {} must be >= 0", self.eps));
        }
        Ok(())
    }

    /// `1 + L·n + L`: embedding state, every head, every MLP.
    pub fn n_writes(&self) -> usize {
        1 + self.n_layers * self.n_heads + self.n_layers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Vec<f32>,
    /// `d x d`, rows are output features.
    pub w_q: Tensor2D,
    pub w_k: Tensor2D,
    pub w_v: Tensor2D,
    /// `d x (n·d_head)`; column block `i` is head `i`'s output projection.
    pub w_o: Tensor2D,
    pub ln2_gamma: Vec<f32>,
    /// `d_mlp x d`.
    pub w_up: Tensor2D,
    /// `d x d_mlp`.
    pub w_down: Tensor2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    pub token_embedding: Tensor2D,
    pub position_embedding: Tensor2D,
    pub layers: Vec<LayerWeights>,
    pub final_gamma: Vec<f32>,
    /// `U`, `vocab x d`.
    pub output_embedding: Tensor2D,
}

impl TransformerWeights {
    /// All-zero weights (gammas included) with the shapes of `config`.
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.d_model;
        let layer = LayerWeights {
            ln1_gamma: vec![0.0; d],
            w_q: Tensor2D::zeros(d, d),
            w_k: Tensor2D::zeros(d, d),
            w_v: Tensor2D::zeros(d, d),
            w_o: Tensor2D::zeros(d, config.n_heads * config.d_head),
            ln2_gamma: vec![0.0; d],
            w_up: Tensor2D::zeros(config.d_mlp, d),
            w_down: Tensor2D::zeros(d, config.d_mlp),
        };
        Self {
            config,
            token_embedding: Tensor2D::zeros(config.vocab_size, d),
            position_embedding: Tensor2D::zeros(config.max_seq, d),
            layers: vec![layer; config.n_layers],
            final_gamma: vec![0.0; d],
            output_embedding: Tensor2D::zeros(config.vocab_size, d),
        }
    }

    /// Gaussian entries scaled by `1/sqrt(d_model)`, unit norm gains.
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::substream(seed, "init");
        let scale = 1.0 / (config.d_model as f32).sqrt();
        let mut w = Self::zeros(config);
        for (name, buf) in w.named_params_mut() {
            if name.ends_with("gamma") {
                buf.iter_mut().for_each(|x| *x = 1.0);
            } else {
                for x in buf.iter_mut() {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    *x = z * scale;
                }
            }
        }
        Ok(w)
    }

    /// Parameter buffers in canonical order, paired with their container names.
    pub fn named_params(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = vec![
            ("token_embedding".into(), self.token_embedding.data()),
            ("position_embedding".into(), self.position_embedding.data()),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.ln1_gamma"), &layer.ln1_gamma));
            out.push((format!("layers.{l}.w_q"), layer.w_q.data()));
            out.push((format!("layers.{l}.w_k"), layer.w_k.data()));
            out.push((format!("layers.{l}.w_v"), layer.w_v.data()));
            out.push((format!("layers.{l}.w_o"), layer.w_o.data()));
            out.push((format!("layers.{l}.ln2_gamma"), &layer.ln2_gamma));
            out.push((format!("layers.{l}.w_up"), layer.w_up.data()));
            out.push((format!("layers.{l}.w_down"), layer.w_down.data()));
        }
        out.push(("final_gamma".into(), &self.final_gamma));
        out.push(("output_embedding".into(), self.output_embedding.data()));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut [f32])> {
        let mut out: Vec<(String, &mut [f32])> = vec![
            ("token_embedding".into(), self.token_embedding.data_mut()),
            ("position_embedding".into(), self.position_embedding.data_mut()),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.ln1_gamma"), &mut layer.ln1_gamma));
            out.push((format!("layers.{l}.w_q"), layer.w_q.data_mut()));
            out.push((format!("layers.{l}.w_k"), layer.w_k.data_mut()));
            out.push((format!("layers.{l}.w_v"), layer.w_v.data_mut()));
            out.push((format!("layers.{l}.w_o"), layer.w_o.data_mut()));
            out.push((format!("layers.{l}.ln2_gamma"), &mut layer.ln2_gamma));
            out.push((format!("layers.{l}.w_up"), layer.w_up.data_mut()));
            out.push((format!("layers.{l}.w_down"), layer.w_down.data_mut()));
        }
        out.push(("final_gamma".into(), &mut self.final_gamma));
        out.push(("output_embedding".into(), self.output_embedding.data_mut()));
        out
    }

    /// Expected `(rows, cols)` of every named tensor; vectors are `(len, 1)`.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let d = config.d_model;
        let mut out = vec![
            ("token_embedding".to_string(), (config.vocab_size, d)),
            ("position_embedding".to_string(), (config.max_seq, d)),
        ];
        for l in 0..config.n_layers {
            out.push((format!("layers.{l}.ln1_gamma"), (d, 1)));
            out.push((format!("layers.{l}.w_q"), (d, d)));
            out.push((format!("layers.{l}.w_k"), (d, d)));
            out.push((format!("layers.{l}.w_v"), (d, d)));
            out.push((format!("layers.{l}.w_o"), (d, config.n_heads * config.d_head)));
            out.push((format!("layers.{l}.ln2_gamma"), (d, 1)));
            out.push((format!("layers.{l}.w_up"), (config.d_mlp, d)));
            out.push((format!("layers.{l}.w_down"), (d, config.d_mlp)));
        }
        out.push(("final_gamma".to_string(), (d, 1)));
        out.push(("output_embedding".to_string(), (config.vocab_size, d)));
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, p)| p.iter().all(|x| x.is_finite()))
    }

    /// Order-sensitive FNV-1a over the little-endian bytes of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, p) in self.named_params() {
            for x in p {
                for b in x.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::Length { len: tokens.len(), max_seq: self.config.max_seq });
        }
        if let Some(bad) = tokens.iter().find(|t| **t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }
}
