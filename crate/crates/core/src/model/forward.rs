use crate::decomposition::ComponentId;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, matmul_nt, matvec, rms, softmax_f64, Tensor2D};

use super::{TokenId, TransformerWeights};

/// Every residual-stream write at the final position.
///
/// `x0 + Σ heads + Σ mlps` reconstructs the final residual state.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualWrites {
    pub x0: Vec<f32>,
    /// Layer-major: index `l * n_heads + h`.
    pub heads: Vec<Vec<f32>>,
    pub mlps: Vec<Vec<f32>>,
}

impl ResidualWrites {
    pub fn len(&self) -> usize {
        1 + self.heads.len() + self.mlps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Writes in component order: embedding, heads by (layer, head), MLPs.
    pub fn iter(&self) -> impl Iterator<Item = &Vec<f32>> {
        std::iter::once(&self.x0).chain(self.heads.iter()).chain(self.mlps.iter())
    }

    /// Elementwise sum in `f64`.
    pub fn sum(&self) -> Vec<f64> {
        let mut acc = vec![0f64; self.x0.len()];
        for z in self.iter() {
            for (a, v) in acc.iter_mut().zip(z) {
                *a += *v as f64;
            }
        }
        acc
    }
}

/// Components whose writes are forced to zero at every position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMask {
    n_heads: usize,
    heads: Vec<bool>,
    mlps: Vec<bool>,
}

impl ComponentMask {
    pub fn none(n_layers: usize, n_heads: usize) -> Self {
        Self { n_heads, heads: vec![false; n_layers * n_heads], mlps: vec![false; n_layers] }
    }

    pub fn from_ids(n_layers: usize, n_heads: usize, ids: &[ComponentId]) -> Result<Self> {
        let mut mask = Self::none(n_layers, n_heads);
        for id in ids {
            match *id {
                ComponentId::Embedding => {
                    return Err(Error::Input("the embedding state cannot be pruned".into()))
                }
                ComponentId::Head { layer, head } => {
                    if layer >= n_layers || head >= n_heads {
                        return Err(Error::Index(format!("{id} outside {n_layers}x{n_heads}")));
                    }
                    mask.heads[layer * n_heads + head] = true;
                }
                ComponentId::Mlp { layer } => {
                    if layer >= n_layers {
                        return Err(Error::Index(format!("{id} outside {n_layers} layers")));
                    }
                    mask.mlps[layer] = true;
                }
            }
        }
        Ok(mask)
    }

    pub fn head(&self, layer: usize, head: usize) -> bool {
        self.heads[layer * self.n_heads + head]
    }

    pub fn mlp(&self, layer: usize) -> bool {
        self.mlps[layer]
    }
}

/// Per-layer activations kept for decomposition and backpropagation.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub x_in: Tensor2D,
    pub rms1: Vec<f64>,
    pub h1: Tensor2D,
    pub q: Tensor2D,
    pub k: Tensor2D,
    pub v: Tensor2D,
    /// One causal `T x T` probability matrix per head.
    pub probs: Vec<Tensor2D>,
    /// Concatenated head outputs, masked heads zeroed.
    pub o: Tensor2D,
    pub attn_out: Tensor2D,
    pub rms2: Vec<f64>,
    pub h2: Tensor2D,
    pub u: Tensor2D,
    pub act: Tensor2D,
    pub mlp_out: Tensor2D,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<TokenId>,
    pub x0: Tensor2D,
    pub layers: Vec<LayerTrace>,
    pub x_final: Tensor2D,
    pub final_rms: Vec<f64>,
    pub h_final: Tensor2D,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn norm_rows(x: &Tensor2D, gamma: &[f32], eps: f32) -> (Vec<f64>, Tensor2D) {
    let mut out = Tensor2D::zeros(x.rows(), x.cols());
    let mut rs = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let r = rms(x.row(t), eps);
        rs.push(r);
        let inv = if r == 0.0 { 0.0 } else { 1.0 / r };
        for ((o, xi), g) in out.row_mut(t).iter_mut().zip(x.row(t)).zip(gamma) {
            *o = (*xi as f64 * *g as f64 * inv) as f32;
        }
    }
    (rs, out)
}

impl TransformerWeights {
    /// Full forward pass recording every intermediate at every position.
    pub fn forward_trace(
        &self,
        tokens: &[TokenId],
        mask: Option<&ComponentMask>,
    ) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (t_len, d, dh) = (tokens.len(), cfg.d_model, cfg.d_head);
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = Tensor2D::zeros(t_len, d);
        for (t, tok) in tokens.iter().enumerate() {
            let row = x.row_mut(t);
            for ((o, e), p) in row
                .iter_mut()
                .zip(self.token_embedding.row(*tok as usize))
                .zip(self.position_embedding.row(t))
            {
                *o = e + p;
            }
        }
        let x0 = x.clone();
        let mut layers = Vec::with_capacity(cfg.n_layers);

        for (l, lw) in self.layers.iter().enumerate() {
            let (rms1, h1) = norm_rows(&x, &lw.ln1_gamma, cfg.eps);
            let q = matmul_nt(&h1, &lw.w_q);
            let k = matmul_nt(&h1, &lw.w_k);
            let v = matmul_nt(&h1, &lw.w_v);
            let mut o = Tensor2D::zeros(t_len, cfg.n_heads * dh);
            let mut probs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let mut p = Tensor2D::zeros(t_len, t_len);
                let masked = mask.is_some_and(|m| m.head(l, h));
                for t in 0..t_len {
                    let qt = &q.row(t)[cols.clone()];
                    let scores: Vec<f64> =
                        (0..=t).map(|s| dot(qt, &k.row(s)[cols.clone()]) * scale).collect();
                    let pt = softmax_f64(&scores)?;
                    let prow = p.row_mut(t);
                    for (s, ps) in pt.iter().enumerate() {
                        prow[s] = *ps as f32;
                    }
                    if masked {
                        continue;
                    }
                    let mut acc = vec![0f32; dh];
                    for (s, ps) in pt.iter().enumerate() {
                        axpy(&mut acc, *ps as f32, &v.row(s)[cols.clone()]);
                    }
                    o.row_mut(t)[cols.clone()].copy_from_slice(&acc);
                }
                probs.push(p);
            }
            let attn_out = matmul_nt(&o, &lw.w_o);

            let (rms2, h2) = norm_rows(&x, &lw.ln2_gamma, cfg.eps);
            let u = matmul_nt(&h2, &lw.w_up);
            let mut act = u.clone();
            act.data_mut().iter_mut().for_each(|a| {
                let r = a.max(0.0);
                *a = r * r;
            });
            let mut mlp_out = matmul_nt(&act, &lw.w_down);
            if mask.is_some_and(|m| m.mlp(l)) {
                mlp_out.fill(0.0);
            }

            let mut next = x.clone();
            for ((n, a), m) in next.data_mut().iter_mut().zip(attn_out.data()).zip(mlp_out.data()) {
                *n = (*n + a) + m;
            }
            layers.push(LayerTrace {
                x_in: std::mem::replace(&mut x, next),
                rms1,
                h1,
                q,
                k,
                v,
                probs,
                o,
                attn_out,
                rms2,
                h2,
                u,
                act,
                mlp_out,
            });
        }

        let (final_rms, h_final) = norm_rows(&x, &self.final_gamma, cfg.eps);
        Ok(ForwardTrace { tokens: tokens.to_vec(), x0, layers, x_final: x, final_rms, h_final })
    }

    /// Full-vocabulary logits `U · LN(x_L)` at position `pos` of a trace.
    pub fn logits_at(&self, trace: &ForwardTrace, pos: usize) -> Vec<f32> {
        matvec(&self.output_embedding, trace.h_final.row(pos)).expect("shapes validated")
    }

    /// Logits at the final position.
    pub fn forward_standard(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        let trace = self.forward_trace(tokens, None)?;
        Ok(self.logits_at(&trace, tokens.len() - 1))
    }

    /// Logits at the final position with masked components zeroed everywhere.
    pub fn forward_masked(&self, tokens: &[TokenId], mask: &ComponentMask) -> Result<Vec<f32>> {
        let trace = self.forward_trace(tokens, Some(mask))?;
        Ok(self.logits_at(&trace, tokens.len() - 1))
    }

    /// Logits plus every component's write at the final position.
    pub fn forward_decomposed(&self, tokens: &[TokenId]) -> Result<(Vec<f32>, ResidualWrites)> {
        let trace = self.forward_trace(tokens, None)?;
        let logits = self.logits_at(&trace, tokens.len() - 1);
        Ok((logits, self.residual_writes(&trace)))
    }

    /// Splits each layer's attention output into per-head writes
    /// `W_o[:, block_i] · o_i` at the final position.
    pub fn residual_writes(&self, trace: &ForwardTrace) -> ResidualWrites {
        let cfg = &self.config;
        let last = trace.len() - 1;
        let dh = cfg.d_head;
        let mut heads = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
        let mut mlps = Vec::with_capacity(cfg.n_layers);
        for (lw, lt) in self.layers.iter().zip(&trace.layers) {
            let o_last = lt.o.row(last);
            for h in 0..cfg.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let oh = &o_last[cols.clone()];
                let write: Vec<f32> =
                    (0..cfg.d_model).map(|r| dot(&lw.w_o.row(r)[cols.clone()], oh) as f32).collect();
                heads.push(write);
            }
            mlps.push(lt.mlp_out.row(last).to_vec());
        }
        ResidualWrites { x0: trace.x0.row(last).to_vec(), heads, mlps }
    }

    /// Attention probabilities from the final query position over all keys.
    pub fn attention_patterns(
        &self,
        tokens: &[TokenId],
        layer: usize,
        head: usize,
    ) -> Result<Vec<f32>> {
        if layer >= self.config.n_layers || head >= self.config.n_heads {
            return Err(Error::Index(format!(
                "layer {layer} head {head} outside {}x{}",
                self.config.n_layers, self.config.n_heads
            )));
        }
        let trace = self.forward_trace(tokens, None)?;
        Ok(trace.layers[layer].probs[head].row(tokens.len() - 1).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(seed: u64) -> TransformerWeights {
        let cfg = ModelConfig::new(2, 4, 16, 32, 12, 16).unwrap();
        TransformerWeights::init_random(cfg, seed).unwrap()
    }

    #[test]
    fn zero_outputs_leave_embedding_path() {
        let mut w = model(0);
        for l in &mut w.layers {
            l.w_o.fill(0.0);
            l.w_down.fill(0.0);
        }
        let tokens = [1, 5, 7];
        let logits = w.forward_standard(&tokens).unwrap();
        let x0: Vec<f32> = (0..16)
            .map(|i| w.token_embedding.get(7, i) + w.position_embedding.get(2, i))
            .collect();
        let ln = crate::numerics::rms_norm(&x0, &w.final_gamma, w.config.eps).unwrap();
        let expect = matvec(&w.output_embedding, &ln).unwrap();
        for (a, b) in logits.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic() {
        let w = model(1);
        let a = w.forward_standard(&[1, 2, 3]).unwrap();
        let b = w.forward_standard(&[1, 2, 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decomposed_logits_and_count() {
        let w = model(2);
        let tokens = [3, 1, 4, 1, 5];
        let (logits, writes) = w.forward_decomposed(&tokens).unwrap();
        assert_eq!(logits, w.forward_standard(&tokens).unwrap());
        assert_eq!(writes.len(), 11);
        let trace = w.forward_trace(&tokens, None).unwrap();
        let sum = writes.sum();
        for (s, x) in sum.iter().zip(trace.x_final.row(tokens.len() - 1)) {
            assert!((s - *x as f64).abs() < 1e-5, "{s} vs {x}");
        }
    }

    #[test]
    fn zeroing_head_block_zeroes_only_that_write() {
        let w = model(3);
        let tokens = [2, 9, 4, 4];
        let (_, base) = w.forward_decomposed(&tokens).unwrap();
        let mut w2 = w.clone();
        // last layer, head 1: nothing downstream reads it at the final position
        let (l, h) = (1, 1);
        let dh = w.config.d_head;
        for r in 0..w.config.d_model {
            for c in h * dh..(h + 1) * dh {
                w2.layers[l].w_o.set(r, c, 0.0);
            }
        }
        let (_, cut) = w2.forward_decomposed(&tokens).unwrap();
        let idx = l * w.config.n_heads + h;
        assert!(cut.heads[idx].iter().all(|x| *x == 0.0));
        for (i, (a, b)) in base.heads.iter().zip(&cut.heads).enumerate() {
            if i != idx {
                assert_eq!(a, b);
            }
        }
        assert_eq!(base.mlps, cut.mlps);
        assert_eq!(base.x0, cut.x0);
    }

    #[test]
    fn attention_pattern_properties() {
        let mut w = model(4);
        let p = w.attention_patterns(&[1, 2, 3, 4], 0, 0).unwrap();
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(w.attention_patterns(&[5], 1, 3).unwrap(), vec![1.0]);
        assert!(matches!(w.attention_patterns(&[1], 2, 0), Err(Error::Index(_))));
        assert!(matches!(w.attention_patterns(&[1], 0, 4), Err(Error::Index(_))));
        w.layers[0].w_q.fill(0.0);
        let u = w.attention_patterns(&[1, 2, 3, 4], 0, 2).unwrap();
        for x in u {
            assert!((x - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn full_mask_collapses_to_embedding() {
        let w = model(5);
        let ids: Vec<ComponentId> = ComponentId::enumerate(&w.config, false);
        let mask = ComponentMask::from_ids(2, 4, &ids).unwrap();
        let tokens = [1, 2, 3];
        let logits = w.forward_masked(&tokens, &mask).unwrap();
        let mut w0 = w.clone();
        for l in &mut w0.layers {
            l.w_o.fill(0.0);
            l.w_down.fill(0.0);
        }
        assert_eq!(logits, w0.forward_standard(&tokens).unwrap());
        assert!(ComponentMask::from_ids(2, 4, &[ComponentId::Embedding]).is_err());
    }
}
