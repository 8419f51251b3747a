//! `TDW1` weight files.

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use super::{LayerWeights, ModelConfig, TransformerWeights};
use crate::container::{self, TensorRef};
use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"TDW1";

/// Optional training metadata stored next to the weights.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CheckpointMeta {
    pub step: Option<u64>,
    pub train_loss: Option<f64>,
}

pub fn encode_weights(w: &TransformerWeights, meta: CheckpointMeta) -> Result<Vec<u8>> {
    let mut header = Map::new();
    header.insert("config".into(), serde_json::to_value(w.config)?);
    if let Some(step) = meta.step {
        header.insert("step".into(), Value::from(step));
    }
    if let Some(loss) = meta.train_loss {
        header.insert("train_loss".into(), Value::from(loss));
    }
    let shapes = TransformerWeights::expected_shapes(&w.config);
    let tensors: Vec<TensorRef<'_>> = w
        .named_params()
        .into_iter()
        .zip(shapes)
        .map(|((name, data), (_, (r, c)))| TensorRef {
            name,
            shape: if c == 1 { vec![r] } else { vec![r, c] },
            data,
        })
        .collect();
    container::encode(WEIGHTS_MAGIC, header, &tensors)
}

pub fn decode_weights(bytes: &[u8]) -> Result<(TransformerWeights, CheckpointMeta)> {
    let mut d = container::decode(WEIGHTS_MAGIC, bytes)?;
    let config: ModelConfig = serde_json::from_value(
        d.meta.remove("config").ok_or_else(|| Error::Format("header lacks config".into()))?,
    )?;
    config.validate()?;
    let meta = CheckpointMeta {
        step: d.meta.get("step").and_then(Value::as_u64),
        train_loss: d.meta.get("train_loss").and_then(Value::as_f64),
    };
    let mut take = |name: &str, rows: usize, cols: usize| -> Result<Vec<f32>> {
        let (shape, data) = d.take(name)?;
        if shape.iter().product::<usize>() != rows * cols || shape[0] != rows {
            return Err(Error::Format(format!(
                "tensor {name} has shape {shape:?}, expected {rows}x{cols}"
            )));
        }
        Ok(data)
    };
    let mat = |data: Vec<f32>, r: usize, c: usize| Tensor2D::from_vec(r, c, data);
    let (d_model, v) = (config.d_model, config.vocab_size);
    let token_embedding = mat(take("token_embedding", v, d_model)?, v, d_model)?;
    let position_embedding =
        mat(take("position_embedding", config.max_seq, d_model)?, config.max_seq, d_model)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    let hd = config.n_heads * config.d_head;
    for l in 0..config.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        layers.push(LayerWeights {
            ln1_gamma: take(&p("ln1_gamma"), d_model, 1)?,
            w_q: mat(take(&p("w_q"), d_model, d_model)?, d_model, d_model)?,
            w_k: mat(take(&p("w_k"), d_model, d_model)?, d_model, d_model)?,
            w_v: mat(take(&p("w_v"), d_model, d_model)?, d_model, d_model)?,
            w_o: mat(take(&p("w_o"), d_model, hd)?, d_model, hd)?,
            ln2_gamma: take(&p("ln2_gamma"), d_model, 1)?,
            w_up: mat(take(&p("w_up"), config.d_mlp, d_model)?, config.d_mlp, d_model)?,
            w_down: mat(take(&p("w_down"), d_model, config.d_mlp)?, d_model, config.d_mlp)?,
        });
    }
    let final_gamma = take("final_gamma", d_model, 1)?;
    let output_embedding = mat(take("output_embedding", v, d_model)?, v, d_model)?;
    let w = TransformerWeights {
        config,
        token_embedding,
        position_embedding,
        layers,
        final_gamma,
        output_embedding,
    };
    Ok((w, meta))
}

pub fn save_weights(path: &Path, w: &TransformerWeights, meta: CheckpointMeta) -> Result<()> {
    fs::write(path, encode_weights(w, meta)?)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(TransformerWeights, CheckpointMeta)> {
    decode_weights(&fs::read(path)?)
}
