//! Plain f64 reimplementation of the forward pass, written from the
//! architecture description rather than from the library code.

use proptest::prelude::*;
use resdecomp::model::{ModelConfig, TokenId, TransformerWeights};
use resdecomp::numerics::Tensor2D;

type M = Vec<Vec<f64>>;

fn mat(t: &Tensor2D) -> M {
    (0..t.rows()).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect()
}

fn mv(w: &M, x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn norm(x: &[f64], gamma: &[f32], eps: f32) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = (ms + eps as f64).sqrt();
    x.iter().zip(gamma).map(|(v, g)| v * *g as f64 / r).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Returns final-position logits and the final residual stream.
fn naive_forward(w: &TransformerWeights, tokens: &[TokenId]) -> (Vec<f64>, Vec<f64>) {
    let c = w.config;
    let (tok, pos) = (mat(&w.token_embedding), mat(&w.position_embedding));
    let mut xs: Vec<Vec<f64>> = tokens.iter().enumerate().map(|(t, &id)| add(&tok[id as usize], &pos[t])).collect();
    for lw in &w.layers {
        let (wq, wk, wv, wo) = (mat(&lw.w_q), mat(&lw.w_k), mat(&lw.w_v), mat(&lw.w_o));
        let (wup, wdown) = (mat(&lw.w_up), mat(&lw.w_down));
        let h1: M = xs.iter().map(|x| norm(x, &lw.ln1_gamma, c.eps)).collect();
        let q: M = h1.iter().map(|h| mv(&wq, h)).collect();
        let k: M = h1.iter().map(|h| mv(&wk, h)).collect();
        let v: M = h1.iter().map(|h| mv(&wv, h)).collect();
        let mut next = Vec::with_capacity(xs.len());
        for t in 0..xs.len() {
            let mut concat = vec![0.0; c.n_heads * c.d_head];
            for h in 0..c.n_heads {
                let b = h * c.d_head;
                let scores: Vec<f64> = (0..=t)
                    .map(|s| (0..c.d_head).map(|i| q[t][b + i] * k[s][b + i]).sum::<f64>() / (c.d_head as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for s in 0..=t {
                    for i in 0..c.d_head {
                        concat[b + i] += e[s] / z * v[s][b + i];
                    }
                }
            }
            let attn = mv(&wo, &concat);
            let h2 = norm(&xs[t], &lw.ln2_gamma, c.eps);
            let act: Vec<f64> = mv(&wup, &h2).into_iter().map(|u| u.max(0.0).powi(2)).collect();
            let mlp = mv(&wdown, &act);
            next.push(add(&add(&xs[t], &attn), &mlp));
        }
        xs = next;
    }
    let last = xs.last().unwrap().clone();
    let logits = mv(&mat(&w.output_embedding), &norm(&last, &w.final_gamma, c.eps));
    (logits, last)
}

fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max)
}

#[test]
fn forward_matches_naive_reimplementation() {
    let cfg = ModelConfig::new(2, 4, 32, 64, 16, 16).unwrap();
    let w = TransformerWeights::init_random(cfg, 0).unwrap();
    let tokens = [1, 2, 3];
    let (want, x_last) = naive_forward(&w, &tokens);
    assert!(max_diff(&w.forward_standard(&tokens).unwrap(), &want) < 1e-4);
    let trace = w.forward_trace(&tokens, None).unwrap();
    assert!(max_diff(trace.x_final.row(2), &x_last) < 1e-5);
}

#[test]
fn residual_writes_sum_to_final_state() {
    let cfg = ModelConfig::new(2, 4, 32, 64, 16, 16).unwrap();
    let w = TransformerWeights::init_random(cfg, 0).unwrap();
    let tokens = [5, 1, 9, 9, 2, 7];
    let trace = w.forward_trace(&tokens, None).unwrap();
    let writes = w.residual_writes(&trace);
    assert_eq!(writes.len(), cfg.n_writes());
    assert!(max_diff(trace.x_final.row(tokens.len() - 1), &writes.sum()) < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn naive_oracle_agrees_on_random_models(
        layers in 1usize..=3,
        heads in 1usize..=4,
        d_head in 2usize..=8,
        seed in any::<u64>(),
        tokens in prop::collection::vec(0u32..20, 1..12),
    ) {
        let cfg = ModelConfig::new(layers, heads, heads * d_head, 24, 20, 12).unwrap();
        let w = TransformerWeights::init_random(cfg, seed).unwrap();
        let (want, x_last) = naive_forward(&w, &tokens);
        let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(max_diff(&w.forward_standard(&tokens).unwrap(), &want) / scale < 1e-4);
        let trace = w.forward_trace(&tokens, None).unwrap();
        let xs = x_last.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(max_diff(trace.x_final.row(tokens.len() - 1), &x_last) / xs < 1e-5);
    }
}
