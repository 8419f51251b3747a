//! Closed-form gradients of next-token cross-entropy, and Adam.
//!
//! Gradients live in a [`TransformerWeights`] of the same shape as the
//! model; only the training loop in `dynamics` uses them.

use crate::error::Result;
use crate::numerics::{axpy, dot, softmax_f64, Tensor2D, PROB_FLOOR};

use super::forward::ForwardTrace;
use super::{TokenId, TransformerWeights};

/// Supervised position: the logits at `position` should predict `token`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelTarget {
    pub position: usize,
    pub token: TokenId,
}

/// `gw[r] += Σ_t dy[t][r] · x[t]`
fn accum_outer(gw: &mut Tensor2D, dy: &Tensor2D, x: &Tensor2D) {
    for t in 0..dy.rows() {
        let xr = x.row(t);
        for (r, g) in dy.row(t).iter().enumerate() {
            if *g != 0.0 {
                axpy(gw.row_mut(r), *g, xr);
            }
        }
    }
}

/// `dx[t] = Σ_r dy[t][r] · w[r]`
fn back_through(dy: &Tensor2D, w: &Tensor2D) -> Tensor2D {
    let mut dx = Tensor2D::zeros(dy.rows(), w.cols());
    for t in 0..dy.rows() {
        let out = dx.row_mut(t);
        for (r, g) in dy.row(t).iter().enumerate() {
            if *g != 0.0 {
                axpy(out, *g, w.row(r));
            }
        }
    }
    dx
}

/// Backward of row-wise RMSNorm; adds into `dx` and `dgamma`.
fn rms_backward(
    x: &Tensor2D,
    rms: &[f64],
    gamma: &[f32],
    dy: &Tensor2D,
    dx: &mut Tensor2D,
    dgamma: &mut [f32],
) {
    let d = x.cols() as f64;
    for t in 0..x.rows() {
        let r = rms[t];
        if r == 0.0 {
            continue;
        }
        let (xr, dyr) = (x.row(t), dy.row(t));
        let mut proj = 0f64;
        for ((xi, gi), dyi) in xr.iter().zip(gamma).zip(dyr) {
            proj += *dyi as f64 * *gi as f64 * *xi as f64;
        }
        let coef = proj / (d * r * r * r);
        for (i, ((xi, gi), dyi)) in xr.iter().zip(gamma).zip(dyr).enumerate() {
            dgamma[i] += (*dyi as f64 * *xi as f64 / r) as f32;
            dx.row_mut(t)[i] += (*gi as f64 * *dyi as f64 / r - *xi as f64 * coef) as f32;
        }
    }
}

impl TransformerWeights {
    /// Mean cross-entropy over `targets`.
    pub fn target_loss(&self, tokens: &[TokenId], targets: &[LabelTarget]) -> Result<f64> {
        let trace = self.forward_trace(tokens, None)?;
        let mut loss = 0f64;
        for tg in targets {
            let logits: Vec<f64> = (0..self.config.vocab_size)
                .map(|v| dot(self.output_embedding.row(v), trace.h_final.row(tg.position)))
                .collect();
            let p = softmax_f64(&logits)?;
            loss -= p[tg.token as usize].max(PROB_FLOOR).ln();
        }
        Ok(loss / targets.len().max(1) as f64)
    }

    /// Mean cross-entropy over `targets` and its gradient.
    pub fn loss_and_grad(
        &self,
        tokens: &[TokenId],
        targets: &[LabelTarget],
    ) -> Result<(f64, TransformerWeights)> {
        let trace = self.forward_trace(tokens, None)?;
        let mut grad = TransformerWeights::zeros(self.config);
        let loss = self.backward(&trace, targets, &mut grad)?;
        Ok((loss, grad))
    }

    fn backward(
        &self,
        trace: &ForwardTrace,
        targets: &[LabelTarget],
        g: &mut TransformerWeights,
    ) -> Result<f64> {
        let cfg = self.config;
        let (t_len, d, dh) = (trace.len(), cfg.d_model, cfg.d_head);
        let scale = 1.0 / (dh as f64).sqrt();
        let n = targets.len().max(1) as f64;

        let mut dh_final = Tensor2D::zeros(t_len, d);
        let mut loss = 0f64;
        for tg in targets {
            let hf = trace.h_final.row(tg.position);
            let logits: Vec<f64> =
                (0..cfg.vocab_size).map(|v| dot(self.output_embedding.row(v), hf)).collect();
            let p = softmax_f64(&logits)?;
            loss -= p[tg.token as usize].max(PROB_FLOOR).ln();
            for (v, pv) in p.iter().enumerate() {
                let dl = ((pv - if v == tg.token as usize { 1.0 } else { 0.0 }) / n) as f32;
                axpy(g.output_embedding.row_mut(v), dl, hf);
                axpy(dh_final.row_mut(tg.position), dl, self.output_embedding.row(v));
            }
        }

        let mut dx = Tensor2D::zeros(t_len, d);
        rms_backward(
            &trace.x_final,
            &trace.final_rms,
            &self.final_gamma,
            &dh_final,
            &mut dx,
            &mut g.final_gamma,
        );

        for (l, (lw, lt)) in self.layers.iter().zip(&trace.layers).enumerate().rev() {
            let gl = &mut g.layers[l];
            let mut dx_in = dx.clone();

            // MLP branch
            accum_outer(&mut gl.w_down, &dx, &lt.act);
            let mut du = back_through(&dx, &lw.w_down);
            for (dui, ui) in du.data_mut().iter_mut().zip(lt.u.data()) {
                *dui *= 2.0 * ui.max(0.0);
            }
            accum_outer(&mut gl.w_up, &du, &lt.h2);
            let dh2 = back_through(&du, &lw.w_up);
            rms_backward(&lt.x_in, &lt.rms2, &lw.ln2_gamma, &dh2, &mut dx_in, &mut gl.ln2_gamma);

            // attention branch
            accum_outer(&mut gl.w_o, &dx, &lt.o);
            let d_o = back_through(&dx, &lw.w_o);
            let mut dq = Tensor2D::zeros(t_len, d);
            let mut dk = Tensor2D::zeros(t_len, d);
            let mut dv = Tensor2D::zeros(t_len, d);
            for h in 0..cfg.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &lt.probs[h];
                for t in 0..t_len {
                    let do_t = &d_o.row(t)[cols.clone()];
                    let prow = &p.row(t)[..=t];
                    let dp: Vec<f64> =
                        (0..=t).map(|s| dot(do_t, &lt.v.row(s)[cols.clone()])).collect();
                    let mix: f64 = prow.iter().zip(&dp).map(|(a, b)| *a as f64 * b).sum();
                    for s in 0..=t {
                        let ps = prow[s];
                        axpy(&mut dv.row_mut(s)[cols.clone()], ps, do_t);
                        let ds = (ps as f64 * (dp[s] - mix) * scale) as f32;
                        if ds != 0.0 {
                            axpy(&mut dq.row_mut(t)[cols.clone()], ds, &lt.k.row(s)[cols.clone()]);
                            axpy(&mut dk.row_mut(s)[cols.clone()], ds, &lt.q.row(t)[cols.clone()]);
                        }
                    }
                }
            }
            accum_outer(&mut gl.w_q, &dq, &lt.h1);
            accum_outer(&mut gl.w_k, &dk, &lt.h1);
            accum_outer(&mut gl.w_v, &dv, &lt.h1);
            let mut dh1 = back_through(&dq, &lw.w_q);
            for (a, b) in dh1.data_mut().iter_mut().zip(back_through(&dk, &lw.w_k).data()) {
                *a += b;
            }
            for (a, b) in dh1.data_mut().iter_mut().zip(back_through(&dv, &lw.w_v).data()) {
                *a += b;
            }
            rms_backward(&lt.x_in, &lt.rms1, &lw.ln1_gamma, &dh1, &mut dx_in, &mut gl.ln1_gamma);
            dx = dx_in;
        }

        for (t, tok) in trace.tokens.iter().enumerate() {
            axpy(g.token_embedding.row_mut(*tok as usize), 1.0, dx.row(t));
            axpy(g.position_embedding.row_mut(t), 1.0, dx.row(t));
        }
        Ok(loss / n)
    }

    /// `self += scale · other`, parameter by parameter.
    pub fn add_scaled(&mut self, other: &TransformerWeights, scale: f32) {
        for ((_, a), (_, b)) in self.named_params_mut().into_iter().zip(other.named_params()) {
            axpy(a, scale, b);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.named_params().iter().map(|(_, p)| dot(p, p)).sum::<f64>().sqrt()
    }
}

/// Adam moments for every parameter buffer.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(w: &TransformerWeights) -> Self {
        let zeros: Vec<Vec<f32>> = w.named_params().iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0, beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }

    pub fn update(&mut self, w: &mut TransformerWeights, grad: &TransformerWeights, lr: f32) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((_, p), (_, g)), (m, v)) in w
            .named_params_mut()
            .into_iter()
            .zip(grad.named_params())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
