//! Toy pretraining with checkpoints, and accuracy curves over checkpoints.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::report_from_cache;
use crate::decomposition::ComponentId;
use crate::error::{Error, Result};
use crate::model::io::{load_weights, save_weights, CheckpointMeta};
use crate::model::{AdamState, LabelTarget, ModelConfig, TokenId, TransformerWeights};
use crate::numerics::mean_sd;
use crate::par::{self, Execution};
use crate::reweighting::cache_train_contributions;
use crate::seed;
use crate::tasks::{
    assemble_prompt, eval_split, majority_subvocab, prompt_spec, LabeledExample, PromptSpec, Task, TaskKind,
    Template,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub model: ModelConfig,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup: u64,
    pub grad_clip: f64,
    /// Demonstrations per training sequence are drawn from this range.
    pub min_demos: usize,
    pub max_demos: usize,
    pub episodes: EpisodeMix,
    /// Multiplier on the initial attention and MLP output projections.
    pub branch_init_scale: f32,
    pub seed: u64,
}

impl ToyTrainConfig {
    /// Two layers, four heads, width 64, sized for `task`'s vocabulary.
    pub fn for_task(task: &Task, seed: u64) -> Result<Self> {
        Ok(Self {
            model: ModelConfig::new(2, 4, 64, 256, task.layout.vocab_size(), 128)?,
            steps: 300,
            checkpoint_every: 25,
            batch_size: 16,
            lr: 1e-3,
            warmup: 100,
            grad_clip: 1.0,
            min_demos: 2,
            max_demos: 8,
            episodes: EpisodeMix::default(),
            branch_init_scale: 0.1,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.checkpoint_every == 0 || self.steps < self.checkpoint_every {
            return Err(Error::Input(format!(
                "need steps >= checkpoint_every >= 1 (got {} and {})",
                self.steps, self.checkpoint_every
            )));
        }
        if self.batch_size == 0
            || self.min_demos == 0
            || self.min_demos > self.max_demos
            || !(self.lr > 0.0)
            || !(0.0..=1.0).contains(&self.episodes.base_template_prob)
            || !(0.0..=1.0).contains(&self.episodes.relabel_prob)
        {
            return Err(Error::Input("invalid batch size, demonstration range or learning rate".into()));
        }
        Ok(())
    }
}

/// How training sequences vary around the task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMix {
    /// Probability of the base template rather than a freshly sampled one.
    pub base_template_prob: f64,
    /// Share of sequences with a fresh random labelling, which can only be
    /// solved from context.
    pub relabel_prob: f64,
    /// Relabelled pattern-task sequences draw between the task's label count
    /// and this many labels (bounded by the label-word pool).
    pub max_labels: usize,
}

impl Default for EpisodeMix {
    fn default() -> Self {
        Self { base_template_prob: 0.5, relabel_prob: 0.0, max_labels: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub weights: TransformerWeights,
    /// Loss on a fixed held-out batch of training sequences.
    pub train_loss: f64,
}

/// Training stopped early; the checkpoints written before the failure are kept.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub checkpoints: Vec<Checkpoint>,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} checkpoints kept)", self.error, self.checkpoints.len())
    }
}

impl std::error::Error for TrainFailure {}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self { error, checkpoints: vec![] }
    }
}

/// A training sequence with its supervised label positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub tokens: Vec<TokenId>,
    pub targets: Vec<LabelTarget>,
}

/// Pattern tokens of each class, in first-seen order.
fn patterns_by_label(task: &Task) -> Vec<Vec<TokenId>> {
    let mut groups = vec![vec![]; task.n_labels];
    for e in &task.examples {
        if !groups[e.label].contains(&e.input[0]) {
            groups[e.label].push(e.input[0]);
        }
    }
    groups
}

/// A training sequence of freshly sampled demonstrations with a random
/// template and no query. By default it uses the task's own verbalizer and
/// input-to-label rule, and every label slot is supervised. With probability
/// `mix.relabel_prob` it instead draws new label words (and, for the pattern
/// task, a new pattern assignment), supervising only slots whose label is
/// inferable from earlier demonstrations.
pub fn sample_episode(task: &Task, n_demos: usize, mix: &EpisodeMix, rng: &mut ChaCha8Rng) -> Result<Episode> {
    let layout = &task.layout;
    let relabel = mix.relabel_prob > 0.0 && rng.random_bool(mix.relabel_prob);
    let (words, groups) = if relabel {
        let n = match task.kind {
            TaskKind::Pattern { n_patterns, .. } => {
                let extra = layout.n_patterns - n_patterns;
                let hi = mix.max_labels.min(layout.n_label_words).min(task.n_labels + extra).max(task.n_labels);
                rng.random_range(task.n_labels..=hi)
            }
            TaskKind::Majority { .. } => task.n_labels,
        };
        let mut words: Vec<TokenId> = (0..layout.n_label_words).map(|i| layout.label_word(i)).collect();
        words.shuffle(rng);
        words.truncate(n);
        let mut groups = vec![vec![]; n];
        if let TaskKind::Pattern { n_patterns, .. } = task.kind {
            let mut pool: Vec<usize> = (0..layout.n_patterns).collect();
            pool.shuffle(rng);
            for (i, p) in pool[..n_patterns + n - task.n_labels].iter().enumerate() {
                groups[i % n].push(layout.pattern(*p));
            }
        }
        (words, groups)
    } else {
        (task.verbalizer.clone(), patterns_by_label(task))
    };
    let n = words.len();
    let template = if rng.random_bool(mix.base_template_prob) {
        Template::base(layout, words)
    } else {
        Template::sample(layout, words, rng)
    };
    let mut demos: Vec<LabeledExample> = Vec::with_capacity(n_demos);
    let mut inferable = Vec::with_capacity(n_demos);
    for _ in 0..n_demos {
        let label = rng.random_range(0..n);
        let input = match task.kind {
            TaskKind::Pattern { input_len, .. } => {
                let mut input = vec![*groups[label].choose(rng).expect("every class has a pattern")];
                input.extend((1..input_len).map(|_| layout.filler(rng.random_range(0..layout.n_fillers))));
                input
            }
            TaskKind::Majority { seq_len } => {
                let subs: Vec<Vec<TokenId>> = (0..n).map(|c| majority_subvocab(layout, n, c)).collect();
                let m = rng.random_range(seq_len / 2 + 1..=seq_len);
                let mut input: Vec<TokenId> = (0..m).map(|_| *subs[label].choose(rng).expect("nonempty")).collect();
                for _ in m..seq_len {
                    let other = (label + rng.random_range(1..n)) % n;
                    input.push(*subs[other].choose(rng).expect("nonempty"));
                }
                input.shuffle(rng);
                input
            }
        };
        inferable.push(!relabel || demos.iter().any(|d| match task.kind {
            TaskKind::Pattern { .. } => d.input[0] == input[0],
            TaskKind::Majority { .. } => d.label == label,
        }));
        demos.push(LabeledExample { input, label });
    }
    let spec = PromptSpec { demos, template };
    let prompt = assemble_prompt(&spec, &[], layout.bos, usize::MAX)?;
    let targets = prompt
        .label_slots
        .iter()
        .zip(&inferable)
        .filter(|(_, ok)| **ok)
        .map(|((pos, label), _)| LabelTarget { position: pos - 1, token: spec.template.label_words[*label] })
        .collect();
    // the trailing query-infix is not part of a training sequence
    let mut tokens = prompt.tokens;
    tokens.truncate(tokens.len() - spec.template.infix.len());
    Ok(Episode { tokens, targets })
}

fn sample_batch(task: &Task, cfg: &ToyTrainConfig, rng: &mut ChaCha8Rng, size: usize) -> Result<Vec<Episode>> {
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let k = rng.random_range(cfg.min_demos..=cfg.max_demos);
        let ep = sample_episode(task, k, &cfg.episodes, rng)?;
        if !ep.targets.is_empty() && ep.tokens.len() <= cfg.model.max_seq {
            out.push(ep);
        }
    }
    Ok(out)
}

fn batch_loss(w: &TransformerWeights, batch: &[Episode], exec: Execution) -> Result<f64> {
    let per = par::try_map(exec, batch, |ep| Ok::<_, Error>((w.target_loss(&ep.tokens, &ep.targets)?, ep.targets.len())))?;
    let n: usize = per.iter().map(|p| p.1).sum();
    Ok(per.iter().map(|(l, k)| l * *k as f64).sum::<f64>() / n as f64)
}

/// Adam on next-token cross-entropy at the supervised label slots of streamed
/// episodes. Checkpoints at step 0, every `checkpoint_every` steps, and the
/// final step.
pub fn train_toy_lm(
    cfg: &ToyTrainConfig,
    task: &Task,
    exec: Execution,
) -> std::result::Result<Vec<Checkpoint>, TrainFailure> {
    cfg.validate()?;
    if cfg.model.vocab_size < task.layout.vocab_size() {
        return Err(Error::Input(format!(
            "model vocabulary {} is smaller than the task's {}",
            cfg.model.vocab_size,
            task.layout.vocab_size()
        ))
        .into());
    }
    let mut w = TransformerWeights::init_random(cfg.model, seed::derive_seed(cfg.seed, "init"))?;
    for lw in &mut w.layers {
        lw.w_o.data_mut().iter_mut().chain(lw.w_down.data_mut()).for_each(|x| *x *= cfg.branch_init_scale);
    }
    let mut adam = AdamState::new(&w);
    let mut rng = seed::substream(cfg.seed, "train-stream");
    let held_out = sample_batch(task, cfg, &mut seed::substream(cfg.seed, "train-eval"), 64)?;
    let mut checkpoints = vec![Checkpoint { step: 0, train_loss: batch_loss(&w, &held_out, exec)?, weights: w.clone() }];
    for step in 1..=cfg.steps {
        let batch = sample_batch(task, cfg, &mut rng, cfg.batch_size)?;
        let total: usize = batch.iter().map(|e| e.targets.len()).sum();
        let grads = par::try_map(exec, &batch, |ep| w.loss_and_grad(&ep.tokens, &ep.targets));
        let grads = match grads {
            Ok(g) => g,
            Err(error) => return Err(TrainFailure { error, checkpoints }),
        };
        let mut grad = TransformerWeights::zeros(cfg.model);
        let mut loss = 0.0;
        for ((l, g), ep) in grads.iter().zip(&batch) {
            let share = ep.targets.len() as f64 / total as f64;
            loss += l * share;
            grad.add_scaled(g, share as f32);
        }
        let norm = grad.global_norm();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(TrainFailure { error: Error::TrainingDiverged { epoch: step as usize }, checkpoints });
        }
        if norm > cfg.grad_clip {
            let clip = (cfg.grad_clip / norm) as f32;
            grad.named_params_mut().into_iter().for_each(|(_, b)| b.iter_mut().for_each(|x| *x *= clip));
        }
        let warm = (step as f32 / cfg.warmup.max(1) as f32).min(1.0);
        adam.update(&mut w, &grad, cfg.lr * warm);
        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            let held = match batch_loss(&w, &held_out, exec) {
                Ok(l) if l.is_finite() && w.is_finite() => l,
                Ok(_) => {
                    return Err(TrainFailure { error: Error::TrainingDiverged { epoch: step as usize }, checkpoints })
                }
                Err(error) => return Err(TrainFailure { error, checkpoints }),
            };
            log::info!("step {step}: held-out loss {held:.4}");
            checkpoints.push(Checkpoint { step, weights: w.clone(), train_loss: held });
        }
    }
    Ok(checkpoints)
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:07}.tdw"))
}

pub fn save_checkpoints(dir: &Path, checkpoints: &[Checkpoint]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    checkpoints
        .iter()
        .map(|c| {
            let p = checkpoint_path(dir, c.step);
            save_weights(&p, &c.weights, CheckpointMeta { step: Some(c.step), train_loss: Some(c.train_loss) })?;
            Ok(p)
        })
        .collect()
}

/// Every `ckpt-*.tdw` in `dir`, ordered by step.
pub fn load_checkpoints(dir: &Path) -> Result<Vec<Checkpoint>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".tdw"))
        })
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let (weights, meta) = load_weights(&p)?;
        let step = meta.step.ok_or_else(|| Error::Format(format!("{} has no step", p.display())))?;
        out.push(Checkpoint { step, weights, train_loss: meta.train_loss.unwrap_or(f64::NAN) });
    }
    out.sort_by_key(|c| c.step);
    if out.windows(2).any(|w| w[0].step == w[1].step) {
        return Err(Error::Format("duplicate checkpoint steps".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub sd: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let (mean, sd) = mean_sd(values);
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub full: Stat,
    pub t1: Stat,
    pub b1: Stat,
    pub last_t1: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsCurve {
    pub n_runs: usize,
    /// Top-1 component of each run at the final checkpoint.
    pub last_t1_ids: Vec<ComponentId>,
    pub points: Vec<CurvePoint>,
}

impl DynamicsCurve {
    /// `step,metric,mean,sd` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record(["step", "metric", "mean", "sd"]).map_err(csv_err)?;
        for p in &self.points {
            for (name, s) in [("full", p.full), ("t1", p.t1), ("b1", p.b1), ("last_t1", p.last_t1)] {
                let sd = s.sd.map(|x| x.to_string()).unwrap_or_default();
                w.write_record([p.step.to_string(), name.into(), s.mean.to_string(), sd]).map_err(csv_err)?;
            }
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub n_demo_sets: usize,
    pub n_templates: usize,
    pub k_prime: usize,
    pub test_size: usize,
    pub include_embedding: bool,
    pub seed: u64,
}

/// Evaluates every (demonstration set, template) run at every checkpoint.
pub fn sweep_dynamics(
    checkpoints: &[Checkpoint],
    task: &Task,
    cfg: &SweepConfig,
    exec: Execution,
) -> Result<DynamicsCurve> {
    if checkpoints.is_empty() {
        return Err(Error::Input("no checkpoints to sweep".into()));
    }
    if cfg.n_templates == 0 || cfg.n_templates > task.templates.len() {
        return Err(Error::Input(format!("{} templates requested, task has {}", cfg.n_templates, task.templates.len())));
    }
    let split = eval_split(task, cfg.n_demo_sets, cfg.k_prime, cfg.test_size, cfg.seed)?;
    let specs: Vec<PromptSpec> = split
        .demo_sets
        .iter()
        .flat_map(|d| task.templates[..cfg.n_templates].iter().map(|t| prompt_spec(task, d, t)))
        .collect();
    if specs.is_empty() {
        return Err(Error::Input("sweep needs at least one demonstration set".into()));
    }
    let jobs: Vec<(usize, usize)> =
        (0..checkpoints.len()).flat_map(|c| (0..specs.len()).map(move |r| (c, r))).collect();
    let reports = par::try_map(exec, &jobs, |&(c, r)| {
        let cache = cache_train_contributions(
            &checkpoints[c].weights,
            task,
            &specs[r],
            &split.test,
            cfg.include_embedding,
            Execution::Sequential,
        )?;
        report_from_cache(&cache, 1.0)
    })?;
    let n_runs = specs.len();
    let at = |c: usize, r: usize| &reports[c * n_runs + r];
    let last = checkpoints.len() - 1;
    let last_t1_ids: Vec<ComponentId> = (0..n_runs).map(|r| at(last, r).oracle_t1.id).collect();
    let mut points = Vec::with_capacity(checkpoints.len());
    for (c, ck) in checkpoints.iter().enumerate() {
        let col = |f: &dyn Fn(usize) -> f64| Stat::of(&(0..n_runs).map(f).collect::<Vec<_>>());
        points.push(CurvePoint {
            step: ck.step,
            full: col(&|r| at(c, r).full_accuracy),
            t1: col(&|r| at(c, r).oracle_t1.accuracy),
            b1: col(&|r| at(c, r).oracle_b1.accuracy),
            last_t1: col(&|r| at(c, r).get(last_t1_ids[r]).map_or(0.0, |s| s.accuracy)),
        });
    }
    Ok(DynamicsCurve { n_runs, last_t1_ids, points })
}
