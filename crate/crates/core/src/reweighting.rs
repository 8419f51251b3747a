//! Component reweighting, Calib+ and nearest-neighbour prompt selection.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decomposition::{build_cache, CacheInput, CacheRow, ComponentId, ContributionCache};
use crate::error::{Error, Result};
use crate::model::{TokenId, TransformerWeights};
use crate::numerics::{argmax, softmax_f64, Tensor2D, PROB_FLOOR};
use crate::par::{self, Execution};
use crate::tasks::{assemble_prompt, PromptSpec, Task};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub l1_lambda: f64,
    pub max_epochs: usize,
    /// Stop once the loss improved by less than `min_improvement` over the
    /// last `patience` epochs.
    pub patience: usize,
    pub min_improvement: f64,
    /// Also stop as soon as every training row is classified correctly.
    pub stop_on_perfect_accuracy: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            l1_lambda: 0.1,
            max_epochs: 1000,
            patience: 10,
            min_improvement: 1e-4,
            stop_on_perfect_accuracy: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.l1_lambda >= 0.0) || self.patience == 0 {
            return Err(Error::Input(format!(
                "need lr > 0, lambda >= 0, patience > 0 (got {}, {}, {})",
                self.lr, self.l1_lambda, self.patience
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Plateau,
    PerfectAccuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub stop: StopReason,
    /// Every training row has the same gold label.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentWeights {
    pub components: Vec<ComponentId>,
    pub w: Vec<f64>,
}

impl ComponentWeights {
    pub fn ones(components: Vec<ComponentId>) -> Self {
        let w = vec![1.0; components.len()];
        Self { components, w }
    }

    pub fn l1(&self) -> f64 {
        self.w.iter().map(|x| x.abs()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationWeights {
    pub v: Vec<f64>,
}

/// One K'-shot decomposed forward per training example, rows in the order of
/// `indices`.
pub fn cache_train_contributions(
    model: &TransformerWeights,
    task: &Task,
    spec: &PromptSpec,
    indices: &[usize],
    include_embedding: bool,
    exec: Execution,
) -> Result<ContributionCache> {
    let inputs = indices
        .iter()
        .map(|&i| {
            let ex = task
                .examples
                .get(i)
                .ok_or_else(|| Error::Index(format!("example {i} of {}", task.examples.len())))?;
            let prompt = assemble_prompt(spec, &ex.input, task.layout.bos, model.config.max_seq)?;
            Ok(CacheInput { example_id: i, tokens: prompt.tokens, gold: ex.label })
        })
        .collect::<Result<Vec<_>>>()?;
    build_cache(model, &inputs, &spec.template.label_words, include_embedding, exec)
}

/// Argmax of `offset + Σ_j w_j g_j`; ties go to the lowest label.
pub fn reweighted_predict(row: CacheRow<'_>, w: &[f64]) -> Result<usize> {
    if w.len() != row.n_components() {
        return Err(Error::Dimension(format!("{} weights for {} components", w.len(), row.n_components())));
    }
    Ok(argmax(&row.weighted_logits(Some(w))))
}

/// Predictions for every cache row, in row order.
pub fn predict_all(cache: &ContributionCache, w: &[f64], exec: Execution) -> Result<Vec<usize>> {
    let rows: Vec<usize> = (0..cache.n_examples()).collect();
    par::try_map(exec, &rows, |e| reweighted_predict(cache.row(*e), w))
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gold).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Summed cross-entropy of the reweighted logits and its exact gradient in `w`.
pub fn ce_loss_and_grad(cache: &ContributionCache, w: &[f64]) -> Result<(f64, Vec<f64>)> {
    if w.len() != cache.n_components() {
        return Err(Error::Dimension(format!("{} weights for {} components", w.len(), cache.n_components())));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; w.len()];
    for e in 0..cache.n_examples() {
        let row = cache.row(e);
        let gold = cache.gold[e];
        let p = softmax_f64(&row.weighted_logits(Some(w)))?;
        loss -= p[gold].max(PROB_FLOOR).ln();
        for (j, gj) in grad.iter_mut().enumerate() {
            let g = row.component(j);
            *gj += p
                .iter()
                .enumerate()
                .map(|(y, py)| (py - f64::from(y == gold)) * g[y] as f64)
                .sum::<f64>();
        }
    }
    Ok((loss, grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct Stopper {
    history: Vec<f64>,
}

impl Stopper {
    fn plateaued(&mut self, loss: f64, cfg: &TrainConfig) -> bool {
        self.history.push(loss);
        let n = self.history.len();
        n > cfg.patience && self.history[n - 1 - cfg.patience] - loss < cfg.min_improvement
    }
}

fn all_one_class(gold: &[usize]) -> bool {
    gold.windows(2).all(|w| w[0] == w[1])
}

/// Full-batch subgradient descent on `Σ CE + λ‖w‖₁` starting from `w = 1`.
pub fn train_component_weights(
    cache: &ContributionCache,
    cfg: &TrainConfig,
) -> Result<(ComponentWeights, TrainReport)> {
    cfg.validate()?;
    if cache.is_empty() {
        return Err(Error::Input("cannot train on an empty cache".into()));
    }
    let degenerate = all_one_class(&cache.gold);
    if degenerate {
        log::warn!("all training rows share one label; reweighting will only boost that class");
    }
    let mut weights = ComponentWeights::ones(cache.components.clone());
    let mut stopper = Stopper { history: vec![] };
    let objective = |w: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (ce, grad) = ce_loss_and_grad(cache, w)?;
        Ok((ce + cfg.l1_lambda * w.iter().map(|x| x.abs()).sum::<f64>(), grad))
    };
    let train_acc = |w: &[f64]| -> Result<f64> {
        Ok(accuracy(&predict_all(cache, w, Execution::Sequential)?, &cache.gold))
    };
    let mut epoch = 0;
    let (mut loss, mut grad) = objective(&weights.w)?;
    let stop = loop {
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        if cfg.stop_on_perfect_accuracy && train_acc(&weights.w)? == 1.0 {
            break StopReason::PerfectAccuracy;
        }
        if stopper.plateaued(loss, cfg) {
            break StopReason::Plateau;
        }
        if epoch == cfg.max_epochs {
            break StopReason::MaxEpochs;
        }
        for (w, g) in weights.w.iter_mut().zip(&grad) {
            *w -= cfg.lr * (g + cfg.l1_lambda * sign(*w));
        }
        epoch += 1;
        (loss, grad) = objective(&weights.w)?;
    };
    let report = TrainReport {
        epochs: epoch,
        final_loss: loss,
        train_accuracy: train_acc(&weights.w)?,
        stop,
        degenerate,
    };
    Ok((weights, report))
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|x| !(*x >= 0.0)) || (s - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!("not a probability distribution: {p:?}")));
    }
    Ok(())
}

/// `softmax(v ⊙ p)`.
pub fn calibrated_probs(v: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    if v.len() != p.len() {
        return Err(Error::Dimension(format!("{} calibration weights for {} labels", v.len(), p.len())));
    }
    let z: Vec<f64> = v.iter().zip(p).map(|(a, b)| a * b).collect();
    softmax_f64(&z)
}

pub fn calibrated_predict(v: &[f64], p: &[f64]) -> Result<usize> {
    Ok(argmax(&calibrated_probs(v, p)?))
}

fn calib_loss_and_grad(v: &[f64], probs: &[Vec<f64>], gold: &[usize]) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; v.len()];
    for (p, g) in probs.iter().zip(gold) {
        let q = calibrated_probs(v, p)?;
        loss -= q[*g].max(PROB_FLOOR).ln();
        for y in 0..v.len() {
            grad[y] += (q[y] - f64::from(y == *g)) * p[y];
        }
    }
    Ok((loss, grad))
}

/// Gradient descent on the cross-entropy of `softmax(v ⊙ p)` from `v = 1`.
pub fn train_calibration(
    probs: &[Vec<f64>],
    gold: &[usize],
    cfg: &TrainConfig,
) -> Result<(CalibrationWeights, TrainReport)> {
    cfg.validate()?;
    if probs.is_empty() || probs.len() != gold.len() {
        return Err(Error::Input(format!("{} distributions for {} labels", probs.len(), gold.len())));
    }
    let n = probs[0].len();
    for p in probs {
        if p.len() != n {
            return Err(Error::Dimension(format!("distribution over {} labels, expected {n}", p.len())));
        }
        check_distribution(p)?;
    }
    if let Some(g) = gold.iter().find(|g| **g >= n) {
        return Err(Error::Index(format!("gold label {g} with {n} labels")));
    }
    let degenerate = all_one_class(gold);
    if degenerate {
        log::warn!("all calibration rows share one label; calibration will only boost that class");
    }
    let acc = |v: &[f64]| -> Result<f64> {
        let pred = probs.iter().map(|p| calibrated_predict(v, p)).collect::<Result<Vec<_>>>()?;
        Ok(accuracy(&pred, gold))
    };
    let mut v = vec![1.0; n];
    let mut stopper = Stopper { history: vec![] };
    let mut epoch = 0;
    let (mut loss, mut grad) = calib_loss_and_grad(&v, probs, gold)?;
    let stop = loop {
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        if cfg.stop_on_perfect_accuracy && acc(&v)? == 1.0 {
            break StopReason::PerfectAccuracy;
        }
        if stopper.plateaued(loss, cfg) {
            break StopReason::Plateau;
        }
        if epoch == cfg.max_epochs {
            break StopReason::MaxEpochs;
        }
        for (x, g) in v.iter_mut().zip(&grad) {
            *x -= cfg.lr * g;
        }
        epoch += 1;
        (loss, grad) = calib_loss_and_grad(&v, probs, gold)?;
    };
    let report = TrainReport { epochs: epoch, final_loss: loss, train_accuracy: acc(&v)?, stop, degenerate };
    Ok((CalibrationWeights { v }, report))
}

/// Label-restricted probabilities of the full model for every cache row.
pub fn label_probabilities(cache: &ContributionCache) -> Result<Vec<Vec<f64>>> {
    (0..cache.n_examples()).map(|e| softmax_f64(&cache.full_logits(e))).collect()
}

/// Mean of the input's token-embedding rows.
pub fn mean_embedding(table: &Tensor2D, tokens: &[TokenId]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::Input("cannot embed an empty input".into()));
    }
    let mut out = vec![0.0; table.cols()];
    for t in tokens {
        if *t as usize >= table.rows() {
            return Err(Error::Index(format!("token {t} outside embedding table of {}", table.rows())));
        }
        for (o, x) in out.iter_mut().zip(table.row(*t as usize)) {
            *o += *x as f64;
        }
    }
    out.iter_mut().for_each(|o| *o /= tokens.len() as f64);
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Similarity(if na == 0.0 { "left" } else { "right" }.into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Positions of the `k` pool inputs most cosine-similar to `query`, most
/// similar first; equal similarities keep pool order.
pub fn prompt_selection(
    table: &Tensor2D,
    pool: &[Vec<TokenId>],
    query: &[TokenId],
    k: usize,
) -> Result<Vec<usize>> {
    if pool.len() < k {
        return Err(Error::Input(format!("pool of {} cannot supply {k} demonstrations", pool.len())));
    }
    let q = mean_embedding(table, query)?;
    let mut scored = pool
        .iter()
        .enumerate()
        .map(|(i, x)| Ok((cosine(&q, &mean_embedding(table, x)?)?, i)))
        .collect::<Result<Vec<(f64, usize)>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedWeights {
    pub components: Vec<ComponentId>,
    pub w: Vec<f64>,
    pub config: TrainConfig,
    pub report: TrainReport,
}

impl SavedWeights {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: SavedWeights = serde_json::from_slice(&fs::read(path)?)?;
        if s.components.len() != s.w.len() {
            return Err(Error::Format("weights and component list differ in length".into()));
        }
        Ok(s)
    }
}


#[cfg(test)]
mod oracle_tests {
    use super::tests::heads;
    use super::*;
    use crate::seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Component 0 adds +2 to the gold logit; components 1..20 are noise.
    fn informative_cache(seed: u64, name: &str, e: usize) -> ContributionCache {
        let mut rng = seed::substream(seed, name);
        let (n, y) = (20, 2);
        let mut values = Vec::with_capacity(e * n * y);
        let mut gold = Vec::with_capacity(e);
        for i in 0..e {
            let g = i % y;
            gold.push(g);
            values.extend((0..y).map(|k| if k == g { 2.0 } else { 0.0 }));
            values.extend((0..(n - 1) * y).map(|_| rng.sample::<f32, _>(StandardNormal)));
        }
        ContributionCache::new(heads(n), vec![0, 1], (0..e).collect(), gold, values, vec![0.0; e * y]).unwrap()
    }

    #[test]
    fn informative_component_is_recovered() {
        let mut top = 0;
        for s in 0..10 {
            let train = informative_cache(s, "train", 16);
            let test = informative_cache(s, "test", 200);
            let mut alone = vec![0.0; 20];
            alone[0] = 1.0;
            assert_eq!(accuracy(&predict_all(&test, &alone, Execution::Sequential).unwrap(), &test.gold), 1.0);
            let (w, _) = train_component_weights(&train, &TrainConfig::default()).unwrap();
            let acc = accuracy(&predict_all(&test, &w.w, Execution::Sequential).unwrap(), &test.gold);
            assert!(acc >= 0.95, "seed {s}: {acc}");
            top += usize::from(argmax(&w.w) == 0);
        }
        assert!(top >= 9);
    }
}
