//! Command-line front end. Every subcommand writes a canonical report
//! (sorted-key JSON or CSV) to `--out` or stdout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::analysis::{
    agreement_experiment, evaluate_components, paired_t_test_one_tailed, prune_forward, report_from_cache,
    standard_predictions, top_k, transfer_select, AgreementConfig, ComponentReport, TransferMode, Variation,
    DEFAULT_TOP_K,
};
use crate::decomposition::ComponentId;
use crate::dynamics::{
    csv_err, load_checkpoints, save_checkpoints, sweep_dynamics, train_toy_lm, Stat, SweepConfig, ToyTrainConfig,
};
use crate::error::{Error, Result};
use crate::model::io::{load_weights, save_weights, CheckpointMeta};
use crate::model::{ModelConfig, TransformerWeights};
use crate::par::{self, Execution};
use crate::reweighting::{
    accuracy, cache_train_contributions, calibrated_predict, label_probabilities, predict_all, prompt_selection,
    train_calibration, train_component_weights, SavedWeights, TrainConfig,
};
use crate::seed::{self, SEED_ENV};
use crate::tasks::{
    assemble_prompt, default_k_prime, eval_split, generate_majority_task, generate_pattern_task_with, prompt_spec,
    sample_demonstrations, split_examples, DemoMode, PromptSpec, Task, DEFAULT_N_EXAMPLES, DEFAULT_TEST_SIZE,
};

#[derive(Debug, Parser)]
#[command(name = "resdecomp", version, about = "Residual-stream component analysis of in-context learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskKindArg {
    Pattern,
    Majority,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run seed; the RESDECOMP_SEED environment variable takes precedence.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = all available).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub task: PathBuf,
    /// Demonstrations per prompt (defaults to 4, or 3 for three labels).
    #[arg(long)]
    pub k_prime: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TEST_SIZE)]
    pub test_size: usize,
    /// Treat the embedding state as a component instead of a fixed offset.
    #[arg(long)]
    pub include_x0: bool,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Size of the labelled pool split into demonstrations and training rows.
    #[arg(long, default_value_t = 12)]
    pub k: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Independent pools; a paired t-test is reported when at least two.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task file.
    GenTask {
        #[arg(long, value_enum, default_value_t = TaskKindArg::Pattern)]
        kind: TaskKindArg,
        #[arg(long, default_value_t = 2)]
        n_labels: usize,
        /// Pattern tokens in use (defaults to one per label).
        #[arg(long)]
        n_patterns: Option<usize>,
        #[arg(long, default_value_t = 2)]
        input_len: usize,
        #[arg(long, default_value_t = 5)]
        seq_len: usize,
        #[arg(long, default_value_t = DEFAULT_N_EXAMPLES)]
        n_examples: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Write randomly initialised weights sized for a task.
    InitModel {
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 256)]
        d_mlp: usize,
        #[arg(long, default_value_t = 128)]
        max_seq: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy model on a task and write checkpoints into `--out`.
    TrainToy {
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value_t = 300)]
        steps: u64,
        #[arg(long, default_value_t = 25)]
        checkpoint_every: u64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        train_lr: f32,
        #[command(flatten)]
        common: Common,
    },
    /// Per-component accuracy over demonstration sets x templates.
    Eval {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 5)]
        demo_sets: usize,
        #[arg(long, default_value_t = 3)]
        templates: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Component reweighting against Standard-K', Standard-K, Calib+ and PromptS.
    Reweight {
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        fit: FitArgs,
        /// Also write the learned weights of the first run here.
        #[arg(long)]
        save_weights: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Calib+ only.
    Calibrate {
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Nearest-neighbour demonstration selection.
    PromptSelect {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 12)]
        k: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Agreement of component accuracies across prompt variations.
    Agreement {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_enum, default_value_t = Variation::Demos)]
        variation: Variation,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Pick a component on one task and apply it alone to another.
    Transfer {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        target_task: PathBuf,
        #[arg(long, value_enum, default_value_t = TransferMode::Best)]
        mode: TransferMode,
        #[command(flatten)]
        common: Common,
    },
    /// Zero out the most and least accurate components in the forward pass.
    Prune {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long, default_value_t = 5)]
        bottom: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy curves over a directory of checkpoints.
    Dynamics {
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        k_prime: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_TEST_SIZE)]
        test_size: usize,
        #[arg(long, default_value_t = 3)]
        demo_sets: usize,
        #[arg(long, default_value_t = 3)]
        templates: usize,
        #[arg(long)]
        include_x0: bool,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenTask { common, .. }
            | Command::InitModel { common, .. }
            | Command::TrainToy { common, .. }
            | Command::Eval { common, .. }
            | Command::Reweight { common, .. }
            | Command::Calibrate { common, .. }
            | Command::PromptSelect { common, .. }
            | Command::Agreement { common, .. }
            | Command::Transfer { common, .. }
            | Command::Prune { common, .. }
            | Command::Dynamics { common, .. } => common,
        }
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run_from_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Input(e.to_string()))?;
    run(cli)
}

fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Input(format!("{SEED_ENV}={v:?} is not an integer"))),
        Err(_) => Ok(flag),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common().clone();
    let seed = effective_seed(common.seed)?;
    par::with_threads(common.threads, || dispatch(cli.command, seed))
}

fn dispatch(cmd: Command, seed: u64) -> Result<()> {
    let exec = Execution::Parallel;
    match cmd {
        Command::GenTask { kind, n_labels, n_patterns, input_len, seq_len, n_examples, common } => {
            let task = match kind {
                TaskKindArg::Pattern => {
                    generate_pattern_task_with(seed, n_patterns.unwrap_or(n_labels), n_labels, n_examples, input_len)?
                }
                TaskKindArg::Majority => generate_majority_task(seed, n_labels, seq_len, n_examples)?,
            };
            let out = require_out(&common)?;
            task.save(out)
        }
        Command::InitModel { task, layers, heads, d_model, d_mlp, max_seq, common } => {
            let task = Task::load(&task)?;
            let cfg = ModelConfig::new(layers, heads, d_model, d_mlp, task.layout.vocab_size(), max_seq)?;
            let w = TransformerWeights::init_random(cfg, seed)?;
            save_weights(require_out(&common)?, &w, CheckpointMeta::default())
        }
        Command::TrainToy { task, steps, checkpoint_every, batch_size, train_lr, common } => {
            let task = Task::load(&task)?;
            let cfg = ToyTrainConfig {
                steps,
                checkpoint_every,
                batch_size,
                lr: train_lr,
                ..ToyTrainConfig::for_task(&task, seed)?
            };
            let dir = require_out(&common)?;
            let checkpoints = match train_toy_lm(&cfg, &task, exec) {
                Ok(c) => c,
                Err(failure) => {
                    save_checkpoints(dir, &failure.checkpoints)?;
                    return Err(failure.error);
                }
            };
            save_checkpoints(dir, &checkpoints)?;
            let last = checkpoints.last().expect("at least two checkpoints");
            save_weights(&dir.join("model.tdw"), &last.weights, CheckpointMeta { step: Some(last.step), train_loss: Some(last.train_loss) })?;
            let summary = json!({
                "config": cfg,
                "checkpoints": checkpoints.iter().map(|c| json!({"step": c.step, "train_loss": c.train_loss})).collect::<Vec<_>>(),
            });
            fs::write(dir.join("summary.json"), canonical(&summary)?)?;
            Ok(())
        }
        Command::Eval { eval, demo_sets, templates, common } => {
            let (model, task) = load_pair(&eval)?;
            if templates == 0 || templates > task.templates.len() {
                return Err(Error::Input(format!("--templates must be in 1..={}", task.templates.len())));
            }
            let k_prime = eval.k_prime.unwrap_or_else(|| default_k_prime(task.n_labels));
            let split = eval_split(&task, demo_sets, k_prime, eval.test_size, seed)?;
            let mut runs = vec![];
            for (d, demos) in split.demo_sets.iter().enumerate() {
                for (t, tpl) in task.templates[..templates].iter().enumerate() {
                    let spec = prompt_spec(&task, demos, tpl);
                    let (report, _) = evaluate_components(&model, &task, &spec, &split.test, eval.include_x0, exec)?;
                    runs.push((d, t, report));
                }
            }
            emit(&common, &eval_report(&runs), || eval_csv(&runs))
        }
        Command::Reweight { eval, fit, save_weights, common } => {
            let (model, task) = load_pair(&eval)?;
            let rep = fit_report(&model, &task, &eval, &fit, seed, true, exec)?;
            if let (Some(path), Some(first)) = (save_weights, rep.saved.first()) {
                first.save(&path)?;
            }
            emit(&common, &rep.value, || rows_csv(&rep.rows))
        }
        Command::Calibrate { eval, fit, common } => {
            let (model, task) = load_pair(&eval)?;
            let rep = fit_report(&model, &task, &eval, &fit, seed, false, exec)?;
            emit(&common, &rep.value, || rows_csv(&rep.rows))
        }
        Command::PromptSelect { eval, k, common } => {
            let (model, task) = load_pair(&eval)?;
            let k_prime = eval.k_prime.unwrap_or_else(|| default_k_prime(task.n_labels));
            let split = eval_split(&task, 0, k_prime, eval.test_size, seed)?;
            let mut rng = seed::substream(seed, "pool");
            let pool = sample_demonstrations(&task.examples, &split.rest, task.n_labels, k, DemoMode::Balanced, &mut rng)?;
            let (acc, selections) = prompt_s(&model, &task, &pool, &split.test, k_prime, exec)?;
            let v = json!({"k": k, "k_prime": k_prime, "pool": pool, "accuracy": acc, "selections": selections});
            emit(&common, &v, || flat_csv(&v))
        }
        Command::Agreement { eval, variation, runs, top_k, common } => {
            let (model, task) = load_pair(&eval)?;
            let cfg = AgreementConfig {
                variation,
                runs,
                k_prime: eval.k_prime.unwrap_or_else(|| default_k_prime(task.n_labels)),
                test_size: eval.test_size,
                top_k,
                include_embedding: eval.include_x0,
                seed,
            };
            let summary = agreement_experiment(&model, &task, &cfg, exec)?;
            let v = serde_json::to_value(&summary)?;
            emit(&common, &v, || {
                let rows: Vec<Vec<String>> = summary
                    .pairs
                    .iter()
                    .map(|p| vec![p.run_a.to_string(), p.run_b.to_string(), opt(p.pearson), p.iou.to_string(), p.k.to_string()])
                    .collect();
                table_csv(&["run_a", "run_b", "pearson", "iou", "k"], &rows)
            })
        }
        Command::Transfer { eval, target_task, mode, common } => {
            let (model, task) = load_pair(&eval)?;
            let target = Task::load(&target_task)?;
            check_vocab(&model, &target)?;
            let k_prime = eval.k_prime.unwrap_or_else(|| default_k_prime(task.n_labels));
            let source = single_report(&model, &task, k_prime, &eval, seed, exec)?;
            let id = transfer_select(&source, mode);
            let dest = single_report(&model, &target, eval.k_prime.unwrap_or_else(|| default_k_prime(target.n_labels)), &eval, seed, exec)?;
            let on_target = dest.get(id).map(|s| s.accuracy);
            let v = json!({
                "mode": mode,
                "component": id,
                "source": {"component_accuracy": source.get(id).map(|s| s.accuracy), "full_accuracy": source.full_accuracy},
                "target": {"component_accuracy": on_target, "full_accuracy": dest.full_accuracy},
            });
            emit(&common, &v, || flat_csv(&v))
        }
        Command::Prune { eval, top, bottom, common } => {
            let (model, task) = load_pair(&eval)?;
            let k_prime = eval.k_prime.unwrap_or_else(|| default_k_prime(task.n_labels));
            let split = eval_split(&task, 1, k_prime, eval.test_size, seed)?;
            let spec = prompt_spec(&task, &split.demo_sets[0], task.base_template());
            // rank components on held-out rows, not on the test set
            let mut rng = seed::substream(seed, "prune-select");
            let n_sel = (split.rest.len() / task.n_labels).min(64) * task.n_labels;
            let sel = sample_demonstrations(&task.examples, &split.rest, task.n_labels, n_sel, DemoMode::Balanced, &mut rng)?;
            let cache = cache_train_contributions(&model, &task, &spec, &sel, false, exec)?;
            let ranking = report_from_cache(&cache, 1.0)?;
            let accs = ranking.accuracies();
            let n = accs.len();
            if top > n || bottom > n {
                return Err(Error::Input(format!("cannot prune more than {n} components")));
            }
            let top_ids: Vec<ComponentId> = top_k(&accs, top).into_iter().map(|i| ranking.components[i].id).collect();
            let neg: Vec<f64> = accs.iter().map(|a| -a).collect();
            let bottom_ids: Vec<ComponentId> = top_k(&neg, bottom).into_iter().map(|i| ranking.components[i].id).collect();
            let full = prune_forward(&model, &task, &spec, &split.test, &[], exec)?.accuracy;
            let pt = prune_forward(&model, &task, &spec, &split.test, &top_ids, exec)?;
            let pb = prune_forward(&model, &task, &spec, &split.test, &bottom_ids, exec)?;
            let v = json!({
                "full_accuracy": full,
                "prune_top": {"components": top_ids, "accuracy": pt.accuracy},
                "prune_bottom": {"components": bottom_ids, "accuracy": pb.accuracy},
            });
            emit(&common, &v, || {
                table_csv(
                    &["variant", "n_pruned", "accuracy"],
                    &[
                        vec!["none".into(), "0".into(), full.to_string()],
                        vec!["top".into(), top.to_string(), pt.accuracy.to_string()],
                        vec!["bottom".into(), bottom.to_string(), pb.accuracy.to_string()],
                    ],
                )
            })
        }
        Command::Dynamics { checkpoints, task, k_prime, test_size, demo_sets, templates, include_x0, common } => {
            let task = Task::load(&task)?;
            let ck = load_checkpoints(&checkpoints)?;
            for c in &ck {
                check_vocab(&c.weights, &task)?;
            }
            let cfg = SweepConfig {
                n_demo_sets: demo_sets,
                n_templates: templates,
                k_prime: k_prime.unwrap_or_else(|| default_k_prime(task.n_labels)),
                test_size,
                include_embedding: include_x0,
                seed,
            };
            let curve = sweep_dynamics(&ck, &task, &cfg, exec)?;
            emit(&common, &serde_json::to_value(&curve)?, || curve.to_csv())
        }
    }
}

fn require_out(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| Error::Input("--out is required for this subcommand".into()))
}

fn check_vocab(model: &TransformerWeights, task: &Task) -> Result<()> {
    if task.layout.vocab_size() > model.config.vocab_size {
        return Err(Error::Input(format!(
            "task vocabulary {} exceeds the model's {}",
            task.layout.vocab_size(),
            model.config.vocab_size
        )));
    }
    Ok(())
}

fn load_pair(eval: &EvalArgs) -> Result<(TransformerWeights, Task)> {
    let (model, _) = load_weights(&eval.model)?;
    let task = Task::load(&eval.task)?;
    check_vocab(&model, &task)?;
    Ok((model, task))
}

fn single_report(
    model: &TransformerWeights,
    task: &Task,
    k_prime: usize,
    eval: &EvalArgs,
    seed: u64,
    exec: Execution,
) -> Result<ComponentReport> {
    let split = eval_split(task, 1, k_prime, eval.test_size, seed)?;
    let spec = prompt_spec(task, &split.demo_sets[0], task.base_template());
    Ok(evaluate_components(model, task, &spec, &split.test, eval.include_x0, exec)?.0)
}

/// Sorted-key pretty JSON with a trailing newline.
pub fn canonical<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let value = serde_json::to_value(v)?;
    let mut out = serde_json::to_vec_pretty(&value)?;
    out.push(b'\n');
    Ok(out)
}

fn emit(common: &Common, value: &Value, csv: impl FnOnce() -> Result<String>) -> Result<()> {
    let bytes = match common.format {
        Format::Json => canonical(value)?,
        Format::Csv => csv()?.into_bytes(),
    };
    match &common.out {
        Some(path) => fs::write(path, bytes)?,
        None => std::io::stdout().lock().write_all(&bytes)?,
    }
    Ok(())
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn table_csv(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?).map_err(|e| Error::Format(e.to_string()))
}

/// `key,value` rows of every leaf, keys joined with dots.
fn flat_csv(v: &Value) -> Result<String> {
    fn walk(prefix: &str, v: &Value, rows: &mut Vec<Vec<String>>) {
        match v {
            Value::Object(m) => m.iter().for_each(|(k, x)| walk(&join(prefix, k), x, rows)),
            Value::Array(a) => a.iter().enumerate().for_each(|(i, x)| walk(&join(prefix, &i.to_string()), x, rows)),
            Value::String(s) => rows.push(vec![prefix.into(), s.clone()]),
            Value::Null => rows.push(vec![prefix.into(), String::new()]),
            other => rows.push(vec![prefix.into(), other.to_string()]),
        }
    }
    fn join(a: &str, b: &str) -> String {
        if a.is_empty() {
            b.into()
        } else {
            format!("{a}.{b}")
        }
    }
    let mut rows = vec![];
    walk("", v, &mut rows);
    table_csv(&["key", "value"], &rows)
}

fn stat_value(values: &[f64]) -> Value {
    let s = Stat::of(values);
    let mut m = Map::new();
    m.insert("mean".into(), json!(s.mean));
    if let Some(sd) = s.sd {
        m.insert("sd".into(), json!(sd));
    }
    Value::Object(m)
}

fn eval_report(runs: &[(usize, usize, ComponentReport)]) -> Value {
    let col = |f: &dyn Fn(&ComponentReport) -> f64| stat_value(&runs.iter().map(|r| f(&r.2)).collect::<Vec<_>>());
    json!({
        "n_runs": runs.len(),
        "full": col(&|r| r.full_accuracy),
        "oracle_t1": col(&|r| r.oracle_t1.accuracy),
        "oracle_b1": col(&|r| r.oracle_b1.accuracy),
        "n_biased": col(&|r| r.n_biased() as f64),
        "runs": runs.iter().map(|(d, t, r)| json!({"demo_set": d, "template": t, "report": r})).collect::<Vec<_>>(),
    })
}

fn eval_csv(runs: &[(usize, usize, ComponentReport)]) -> Result<String> {
    let n_labels = runs.first().map_or(0, |r| r.2.label_words.len());
    let mut header: Vec<String> = ["demo_set", "template", "component", "accuracy", "biased"].map(String::from).to_vec();
    header.extend((0..n_labels).map(|y| format!("freq_{y}")));
    let mut rows = vec![];
    for (d, t, r) in runs {
        for c in &r.components {
            let mut row = vec![d.to_string(), t.to_string(), c.id.to_string(), c.accuracy.to_string(), c.biased.to_string()];
            row.extend(c.label_freq.iter().map(|f| f.to_string()));
            rows.push(row);
        }
        rows.push(vec![d.to_string(), t.to_string(), "full".into(), r.full_accuracy.to_string(), String::new()]
            .into_iter()
            .chain((0..n_labels).map(|_| String::new()))
            .collect());
    }
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    table_csv(&h, &rows)
}

struct FitReport {
    value: Value,
    rows: Vec<(String, Vec<(String, f64)>)>,
    saved: Vec<SavedWeights>,
}

fn rows_csv(rows: &[(String, Vec<(String, f64)>)]) -> Result<String> {
    let Some((_, first)) = rows.first() else {
        return table_csv(&["run"], &[]);
    };
    let mut header = vec!["run".to_string()];
    header.extend(first.iter().map(|(k, _)| k.clone()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, vals)| std::iter::once(name.clone()).chain(vals.iter().map(|(_, v)| v.to_string())).collect())
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    table_csv(&h, &body)
}

fn accuracy_of(model: &TransformerWeights, task: &Task, spec: &PromptSpec, test: &[usize], exec: Execution) -> Result<f64> {
    let pred = standard_predictions(model, task, spec, test, exec)?;
    let gold: Vec<usize> = test.iter().map(|i| task.examples[*i].label).collect();
    Ok(accuracy(&pred, &gold))
}

/// PromptS: per test input, the `k_prime` most similar pool examples, placed
/// so the most similar one sits next to the query.
fn prompt_s(
    model: &TransformerWeights,
    task: &Task,
    pool: &[usize],
    test: &[usize],
    k_prime: usize,
    exec: Execution,
) -> Result<(f64, Vec<Vec<usize>>)> {
    let inputs: Vec<Vec<u32>> = pool.iter().map(|i| task.examples[*i].input.clone()).collect();
    let words = &task.base_template().label_words;
    let results = par::try_map(exec, test, |&q| -> Result<(bool, Vec<usize>)> {
        let ex = &task.examples[q];
        let mut chosen = prompt_selection(&model.token_embedding, &inputs, &ex.input, k_prime)?;
        chosen.reverse();
        let ids: Vec<usize> = chosen.iter().map(|p| pool[*p]).collect();
        let spec = prompt_spec(task, &ids, task.base_template());
        let prompt = assemble_prompt(&spec, &ex.input, task.layout.bos, model.config.max_seq)?;
        let logits = model.forward_standard(&prompt.tokens)?;
        let restricted: Vec<f32> = words.iter().map(|w| logits[*w as usize]).collect();
        Ok((crate::numerics::argmax(&restricted) == ex.label, ids))
    })?;
    let acc = results.iter().filter(|r| r.0).count() as f64 / results.len().max(1) as f64;
    Ok((acc, results.into_iter().map(|r| r.1).collect()))
}

fn fit_report(
    model: &TransformerWeights,
    task: &Task,
    eval: &EvalArgs,
    fit: &FitArgs,
    seed: u64,
    full: bool,
    exec: Execution,
) -> Result<FitReport> {
    let k_prime = eval.k_prime.unwrap_or_else(|| default_k_prime(task.n_labels));
    if fit.k <= k_prime {
        return Err(Error::Input(format!("--k {} must exceed --k-prime {k_prime}", fit.k)));
    }
    if fit.runs == 0 {
        return Err(Error::Input("--runs must be positive".into()));
    }
    let cfg = TrainConfig { lr: fit.lr, l1_lambda: fit.lambda, seed, ..TrainConfig::default() };
    cfg.validate()?;
    let split = eval_split(task, 0, k_prime, eval.test_size, seed)?;
    let gold: Vec<usize> = split.test.iter().map(|i| task.examples[*i].label).collect();
    let base = task.base_template();
    let mut runs = vec![];
    let mut rows = vec![];
    let mut saved = vec![];
    for r in 0..fit.runs {
        let mut rng = seed::substream(seed, &format!("fit-run-{r}"));
        let pool = sample_demonstrations(&task.examples, &split.rest, task.n_labels, fit.k, DemoMode::Balanced, &mut rng)?;
        let (demo, train) = split_examples(&task.examples, &pool, task.n_labels, k_prime, &mut rng)?;
        let spec = prompt_spec(task, &demo, base);
        let train_cache = cache_train_contributions(model, task, &spec, &train, eval.include_x0, exec)?;
        let test_cache = cache_train_contributions(model, task, &spec, &split.test, eval.include_x0, exec)?;

        let (v, calib) = train_calibration(&label_probabilities(&train_cache)?, &train_cache.gold, &cfg)?;
        let test_probs = label_probabilities(&test_cache)?;
        let calib_pred = test_probs.iter().map(|p| calibrated_predict(&v.v, p)).collect::<Result<Vec<_>>>()?;
        let mut metrics: Vec<(String, f64)> = vec![
            ("standard_kprime".into(), accuracy(&(0..test_cache.n_examples()).map(|e| test_cache.full_prediction(e)).collect::<Vec<_>>(), &gold)),
            ("calib_plus".into(), accuracy(&calib_pred, &gold)),
        ];
        let mut run = json!({"pool": pool, "demos": demo, "calibration": {"v": v.v, "report": calib}});
        if full {
            let (w, report) = train_component_weights(&train_cache, &cfg)?;
            let comp_rw = accuracy(&predict_all(&test_cache, &w.w, exec)?, &gold);
            let all = sample_demonstrations(&task.examples, &pool, task.n_labels, fit.k, DemoMode::Balanced, &mut rng)?;
            let standard_k = accuracy_of(model, task, &prompt_spec(task, &all, base), &split.test, exec)?;
            let (prompt_s_acc, _) = prompt_s(model, task, &pool, &split.test, k_prime, exec)?;
            metrics.push(("standard_k".into(), standard_k));
            metrics.push(("comp_rw".into(), comp_rw));
            metrics.push(("prompt_s".into(), prompt_s_acc));
            run["weights"] = json!({"components": w.components, "w": w.w, "report": report});
            saved.push(SavedWeights { components: w.components, w: w.w, config: cfg, report });
        }
        for (k, m) in &metrics {
            run[k.as_str()] = json!(m);
        }
        rows.push((format!("{r}"), metrics));
        runs.push(run);
    }
    let names: Vec<String> = rows[0].1.iter().map(|(k, _)| k.clone()).collect();
    let mut summary = Map::new();
    for (i, name) in names.iter().enumerate() {
        let vals: Vec<f64> = rows.iter().map(|r| r.1[i].1).collect();
        summary.insert(name.clone(), stat_value(&vals));
    }
    let mut value = json!({
        "k": fit.k,
        "k_prime": k_prime,
        "n_train": fit.k - k_prime,
        "lambda": fit.lambda,
        "lr": fit.lr,
        "summary": summary,
        "runs": runs,
    });
    if fit.runs >= 2 {
        let col = |name: &str| -> Vec<f64> {
            rows.iter().map(|r| r.1.iter().find(|(k, _)| k == name).map_or(f64::NAN, |x| x.1)).collect()
        };
        let target = if full { "comp_rw" } else { "calib_plus" };
        let t = match paired_t_test_one_tailed(&col(target), &col("standard_kprime")) {
            Ok(t) => json!(t),
            Err(e) => json!({"error": e.to_string()}),
        };
        value[format!("t_test_{target}_vs_standard_kprime")] = t;
    }
    Ok(FitReport { value, rows, saved })
}
