//! Per-component accuracy, label bias, agreement, transfer, pruning and
//! attention attribution.

mod stats;

pub use stats::{paired_t_test_one_tailed, pearson, top_k, top_k_iou, TTest};

use serde::{Deserialize, Serialize};

use crate::decomposition::{early_decode, fold_final_layernorm, label_rows, ComponentId, ContributionCache};
use crate::error::{Error, Result};
use crate::model::{ComponentMask, TokenId, TransformerWeights};
use crate::numerics::argmax;
use crate::par::{self, Execution};
use crate::reweighting::cache_train_contributions;
use crate::tasks::{assemble_prompt, eval_split, prompt_spec, Prompt, PromptSpec, Task, Template};

pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub id: ComponentId,
    pub accuracy: f64,
    /// How often the component predicts each label.
    pub label_freq: Vec<f64>,
    pub biased: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub id: ComponentId,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub n_examples: usize,
    pub label_words: Vec<TokenId>,
    pub full_accuracy: f64,
    pub components: Vec<ComponentStats>,
    pub oracle_t1: Oracle,
    pub oracle_b1: Oracle,
    /// Fraction of identical predictions at which a component counts as biased.
    pub bias_threshold: f64,
}

impl ComponentReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.accuracy).collect()
    }

    pub fn ids(&self) -> Vec<ComponentId> {
        self.components.iter().map(|c| c.id).collect()
    }

    pub fn get(&self, id: ComponentId) -> Option<&ComponentStats> {
        self.components.iter().find(|c| c.id == id)
    }

    pub fn n_biased(&self) -> usize {
        self.components.iter().filter(|c| c.biased).count()
    }
}

/// Summarizes a cache: argmax of each `g_j` against the gold labels.
pub fn report_from_cache(cache: &ContributionCache, bias_threshold: f64) -> Result<ComponentReport> {
    let (e, n, y) = cache.shape();
    if e == 0 {
        return Err(Error::Input("empty test set".into()));
    }
    if n == 0 {
        return Err(Error::Input("no components to report".into()));
    }
    let mut components = Vec::with_capacity(n);
    for (j, id) in cache.components.iter().enumerate() {
        let mut counts = vec![0usize; y];
        let mut correct = 0usize;
        for r in 0..e {
            let p = argmax(cache.row(r).component(j));
            counts[p] += 1;
            correct += usize::from(p == cache.gold[r]);
        }
        let label_freq: Vec<f64> = counts.iter().map(|c| *c as f64 / e as f64).collect();
        let biased = label_freq.iter().any(|f| *f >= bias_threshold);
        components.push(ComponentStats { id: *id, accuracy: correct as f64 / e as f64, label_freq, biased });
    }
    let full_correct = (0..e).filter(|r| cache.full_prediction(*r) == cache.gold[*r]).count();
    let accs: Vec<f64> = components.iter().map(|c| c.accuracy).collect();
    let (t1, b1) = (argmax(&accs), crate::numerics::argmin(&accs));
    Ok(ComponentReport {
        n_examples: e,
        label_words: cache.label_words.clone(),
        full_accuracy: full_correct as f64 / e as f64,
        oracle_t1: Oracle { id: components[t1].id, accuracy: accs[t1] },
        oracle_b1: Oracle { id: components[b1].id, accuracy: accs[b1] },
        components,
        bias_threshold,
    })
}

/// Decomposed forward over every test example, then [`report_from_cache`].
pub fn evaluate_components(
    model: &TransformerWeights,
    task: &Task,
    spec: &PromptSpec,
    test: &[usize],
    include_embedding: bool,
    exec: Execution,
) -> Result<(ComponentReport, ContributionCache)> {
    if test.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let cache = cache_train_contributions(model, task, spec, test, include_embedding, exec)?;
    Ok((report_from_cache(&cache, 1.0)?, cache))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    Best,
    Worst,
}

/// Highest (best) or lowest (worst) accuracy component; ties go to the
/// earlier component.
pub fn transfer_select(report: &ComponentReport, mode: TransferMode) -> ComponentId {
    let accs = report.accuracies();
    let i = match mode {
        TransferMode::Best => argmax(&accs),
        TransferMode::Worst => crate::numerics::argmin(&accs),
    };
    report.components[i].id
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    pub masked: Vec<ComponentId>,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

fn label_argmax(logits: &[f32], words: &[TokenId]) -> usize {
    let restricted: Vec<f32> = words.iter().map(|w| logits[*w as usize]).collect();
    argmax(&restricted)
}

/// Accuracy with the masked components' writes zeroed at every position.
pub fn prune_forward(
    model: &TransformerWeights,
    task: &Task,
    spec: &PromptSpec,
    test: &[usize],
    mask: &[ComponentId],
    exec: Execution,
) -> Result<PruneResult> {
    let cfg = &model.config;
    let m = ComponentMask::from_ids(cfg.n_layers, cfg.n_heads, mask)?;
    let words = &spec.template.label_words;
    if let Some(w) = words.iter().find(|w| **w as usize >= cfg.vocab_size) {
        return Err(Error::Index(format!("label word {w} outside vocabulary")));
    }
    let preds = par::try_map(exec, test, |&i| -> Result<(usize, usize)> {
        let ex = task.examples.get(i).ok_or_else(|| Error::Index(format!("example {i}")))?;
        let p = assemble_prompt(spec, &ex.input, task.layout.bos, cfg.max_seq)?;
        let logits = model.forward_masked(&p.tokens, &m)?;
        Ok((label_argmax(&logits, words), ex.label))
    })?;
    let correct = preds.iter().filter(|(p, g)| p == g).count();
    Ok(PruneResult {
        masked: mask.to_vec(),
        accuracy: if preds.is_empty() { 0.0 } else { correct as f64 / preds.len() as f64 },
        predictions: preds.into_iter().map(|(p, _)| p).collect(),
    })
}

/// Label-restricted predictions of the unmodified model.
pub fn standard_predictions(
    model: &TransformerWeights,
    task: &Task,
    spec: &PromptSpec,
    test: &[usize],
    exec: Execution,
) -> Result<Vec<usize>> {
    Ok(prune_forward(model, task, spec, test, &[], exec)?.predictions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionAttribution {
    pub layer: usize,
    pub head: usize,
    /// Mean attention from the final position onto label tokens of each class.
    pub per_label_mean: Vec<f64>,
    /// Correlation between attention to a class and the head's direct
    /// contribution to that class, over all (prompt, class) pairs.
    pub r: Option<f64>,
    pub n_prompts: usize,
}

pub fn attention_label_attribution(
    model: &TransformerWeights,
    prompts: &[Prompt],
    label_words: &[TokenId],
    layer: usize,
    head: usize,
) -> Result<AttentionAttribution> {
    let cfg = &model.config;
    if layer >= cfg.n_layers || head >= cfg.n_heads {
        return Err(Error::Index(format!("layer {layer} head {head} outside {}x{}", cfg.n_layers, cfg.n_heads)));
    }
    if prompts.is_empty() || prompts.iter().any(|p| p.label_slots.is_empty()) {
        return Err(Error::Input("every prompt needs recorded label positions".into()));
    }
    let n_labels = label_words.len();
    let u_y = label_rows(&model.output_embedding, label_words)?;
    let idx = ComponentId::Head { layer, head }.write_index(cfg.n_layers, cfg.n_heads);
    let (mut sums, mut counts) = (vec![0.0; n_labels], vec![0usize; n_labels]);
    let (mut xs, mut ys) = (vec![], vec![]);
    for p in prompts {
        let trace = model.forward_trace(&p.tokens, None)?;
        let last = p.tokens.len() - 1;
        let probs = trace.layers[layer].probs[head].row(last);
        let writes = model.residual_writes(&trace);
        let folded = fold_final_layernorm(&writes, &model.final_gamma, cfg.eps)?;
        let g = early_decode(&folded.acts[idx], &u_y)?;
        for c in 0..n_labels {
            let slots: Vec<usize> = p.label_slots.iter().filter(|(_, l)| *l == c).map(|(pos, _)| *pos).collect();
            if slots.is_empty() {
                continue;
            }
            let a = slots.iter().map(|s| probs[*s] as f64).sum::<f64>() / slots.len() as f64;
            sums[c] += a;
            counts[c] += 1;
            xs.push(a);
            ys.push(g[c] as f64);
        }
    }
    let per_label_mean = sums.iter().zip(&counts).map(|(s, c)| if *c == 0 { 0.0 } else { s / *c as f64 }).collect();
    Ok(AttentionAttribution { layer, head, per_label_mean, r: pearson(&xs, &ys).ok(), n_prompts: prompts.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Variation {
    Demos,
    Templates,
    Contrast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub run_a: usize,
    pub run_b: usize,
    /// Absent when either run has constant component accuracies.
    pub pearson: Option<f64>,
    pub iou: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub full_accuracy: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub variation: Variation,
    pub components: Vec<ComponentId>,
    pub runs: Vec<RunSummary>,
    pub pairs: Vec<AgreementReport>,
    pub mean_pearson: Option<f64>,
    pub mean_iou: f64,
    pub tie_break: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgreementConfig {
    pub variation: Variation,
    pub runs: usize,
    pub k_prime: usize,
    pub test_size: usize,
    pub top_k: usize,
    pub include_embedding: bool,
    pub seed: u64,
}

/// All lexicographic pairs `(i, j)`, `i < j`.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Pairwise Pearson and top-k IoU of component accuracy vectors.
pub fn agreement_from_accuracies(
    runs: &[Vec<f64>],
    pairs: &[(usize, usize)],
    k: usize,
) -> Result<(Vec<AgreementReport>, Option<f64>, f64)> {
    if pairs.is_empty() {
        return Err(Error::Input("agreement needs at least two runs".into()));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        let (ra, rb) = (&runs[a], &runs[b]);
        let r = match pearson(ra, rb) {
            Ok(r) => Some(r),
            Err(Error::UndefinedCorrelation(_)) => None,
            Err(e) => return Err(e),
        };
        out.push(AgreementReport { run_a: a, run_b: b, pearson: r, iou: top_k_iou(ra, rb, k)?, k });
    }
    let rs: Vec<f64> = out.iter().filter_map(|p| p.pearson).collect();
    let mean_r = (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64);
    let mean_iou = out.iter().map(|p| p.iou).sum::<f64>() / out.len() as f64;
    Ok((out, mean_r, mean_iou))
}

/// Component agreement across disjoint demonstration sets, sampled templates,
/// or minimally edited templates.
///
/// Demonstration and template runs are compared over every pair; contrast
/// runs compare the base template against each of its edits.
pub fn agreement_experiment(
    model: &TransformerWeights,
    task: &Task,
    cfg: &AgreementConfig,
    exec: Execution,
) -> Result<AgreementSummary> {
    if cfg.runs < 2 {
        return Err(Error::Input(format!("agreement needs at least two runs, got {}", cfg.runs)));
    }
    let n_sets = if cfg.variation == Variation::Demos { cfg.runs } else { 1 };
    let split = eval_split(task, n_sets, cfg.k_prime, cfg.test_size, cfg.seed)?;
    let base = task.base_template();
    let specs: Vec<(String, PromptSpec)> = match cfg.variation {
        Variation::Demos => split
            .demo_sets
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("demos-{i}"), prompt_spec(task, d, base)))
            .collect(),
        Variation::Templates => {
            let mut rng = crate::seed::substream(cfg.seed, "agreement-templates");
            let mut templates: Vec<Template> = task.templates.iter().skip(1).take(cfg.runs).cloned().collect();
            while templates.len() < cfg.runs {
                templates.push(Template::sample(&task.layout, task.verbalizer.clone(), &mut rng));
            }
            templates
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("template-{i}"), prompt_spec(task, &split.demo_sets[0], t)))
                .collect()
        }
        Variation::Contrast => {
            let mut out = vec![("base".to_string(), prompt_spec(task, &split.demo_sets[0], base))];
            for e in base.contrast_edits(&task.layout).into_iter().take(cfg.runs - 1) {
                let t = base.perturb(&e, &task.layout)?;
                let label = t.tags.last().cloned().unwrap_or_default();
                out.push((label, prompt_spec(task, &split.demo_sets[0], &t)));
            }
            out
        }
    };
    let mut runs = Vec::with_capacity(specs.len());
    let mut components = vec![];
    for (label, spec) in &specs {
        let (report, _) = evaluate_components(model, task, spec, &split.test, cfg.include_embedding, exec)?;
        components = report.ids();
        runs.push(RunSummary { label: label.clone(), full_accuracy: report.full_accuracy, accuracies: report.accuracies() });
    }
    let pairs = match cfg.variation {
        Variation::Contrast => (1..runs.len()).map(|i| (0, i)).collect(),
        _ => all_pairs(runs.len()),
    };
    let k = cfg.top_k.min(components.len());
    let accs: Vec<Vec<f64>> = runs.iter().map(|r| r.accuracies.clone()).collect();
    let (pairs, mean_pearson, mean_iou) = agreement_from_accuracies(&accs, &pairs, k)?;
    Ok(AgreementSummary {
        variation: cfg.variation,
        components,
        runs,
        pairs,
        mean_pearson,
        mean_iou,
        tie_break: "descending accuracy, then ascending component order".into(),
    })
}
