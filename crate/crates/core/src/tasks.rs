//! Synthetic in-context classification tasks, templates and prompt assembly.
//!
//! Tokens are abstract ids. Whitespace (space, newline) and punctuation have
//! dedicated ids, so template edits such as "add a space" are single-token
//! changes.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::seed;

pub const DEFAULT_PATTERN_POOL: usize = 16;
pub const DEFAULT_LABEL_POOL: usize = 8;
pub const DEFAULT_TEST_SIZE: usize = 512;
pub const DEFAULT_N_EXAMPLES: usize = 1024;
pub const DEFAULT_N_TEMPLATES: usize = 6;

/// Default number of demonstrations for `n_labels` classes.
pub fn default_k_prime(n_labels: usize) -> usize {
    if n_labels == 3 {
        3
    } else {
        4
    }
}

/// Contiguous id ranges of the abstract vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub bos: TokenId,
    pub space: TokenId,
    pub newline: TokenId,
    pub punct_start: TokenId,
    pub n_punct: usize,
    pub instr_start: TokenId,
    pub n_instr: usize,
    pub label_start: TokenId,
    pub n_label_words: usize,
    pub pattern_start: TokenId,
    pub n_patterns: usize,
    pub filler_start: TokenId,
    pub n_fillers: usize,
}

impl Default for VocabLayout {
    fn default() -> Self {
        Self::with_pools(DEFAULT_PATTERN_POOL, DEFAULT_LABEL_POOL)
    }
}

impl VocabLayout {
    pub fn with_pools(n_patterns: usize, n_label_words: usize) -> Self {
        let (n_punct, n_instr, n_fillers) = (6, 4, 16);
        let punct_start = 3;
        let instr_start = punct_start + n_punct as TokenId;
        let label_start = instr_start + n_instr as TokenId;
        let pattern_start = label_start + n_label_words as TokenId;
        let filler_start = pattern_start + n_patterns as TokenId;
        Self {
            bos: 0,
            space: 1,
            newline: 2,
            punct_start,
            n_punct,
            instr_start,
            n_instr,
            label_start,
            n_label_words,
            pattern_start,
            n_patterns,
            filler_start,
            n_fillers,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.filler_start as usize + self.n_fillers
    }

    pub fn punct(&self, i: usize) -> TokenId {
        self.punct_start + i as TokenId
    }

    pub fn instr(&self, i: usize) -> TokenId {
        self.instr_start + i as TokenId
    }

    pub fn label_word(&self, i: usize) -> TokenId {
        self.label_start + i as TokenId
    }

    pub fn pattern(&self, i: usize) -> TokenId {
        self.pattern_start + i as TokenId
    }

    pub fn filler(&self, i: usize) -> TokenId {
        self.filler_start + i as TokenId
    }

    pub fn is_label_word(&self, t: TokenId) -> bool {
        (self.label_start..self.label_start + self.n_label_words as TokenId).contains(&t)
    }

    pub fn is_pattern(&self, t: TokenId) -> bool {
        (self.pattern_start..self.pattern_start + self.n_patterns as TokenId).contains(&t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledExample {
    pub input: Vec<TokenId>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Each input starts with a pattern token that determines the label.
    Pattern { n_patterns: usize, input_len: usize },
    /// The label is the sub-vocabulary holding the majority of input tokens.
    Majority { seq_len: usize },
}

/// Token skeleton around each demonstration plus its verbalizer.
///
/// A demonstration renders as `input ++ infix ++ [label word] ++ separator`;
/// the whole prompt is `[BOS] ++ prefix ++ demos ++ query ++ infix`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub prefix: Vec<TokenId>,
    pub infix: Vec<TokenId>,
    pub separator: Vec<TokenId>,
    pub label_words: Vec<TokenId>,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "edit", rename_all = "snake_case")]
pub enum TemplateEdit {
    AddSpace,
    DropSpace,
    DropNewline,
    SwapLabelWord { label: usize, word: TokenId },
}

impl TemplateEdit {
    fn tag(&self) -> String {
        match self {
            TemplateEdit::AddSpace => "add_space".into(),
            TemplateEdit::DropSpace => "drop_space".into(),
            TemplateEdit::DropNewline => "drop_newline".into(),
            TemplateEdit::SwapLabelWord { label, word } => format!("swap_label_word:{label}={word}"),
        }
    }
}

impl Template {
    /// `input: label` followed by a newline, no prefix.
    pub fn base(layout: &VocabLayout, label_words: Vec<TokenId>) -> Self {
        Self {
            prefix: vec![],
            infix: vec![layout.punct(0)],
            separator: vec![layout.newline],
            label_words,
            tags: vec!["base".into()],
        }
    }

    /// A random skeleton drawn from the punctuation/instruction pools.
    pub fn sample(layout: &VocabLayout, label_words: Vec<TokenId>, rng: &mut ChaCha8Rng) -> Self {
        let prefix_len = rng.random_range(0..=2);
        let prefix = (0..prefix_len).map(|_| layout.instr(rng.random_range(0..layout.n_instr))).collect();
        let mut infix = vec![layout.punct(rng.random_range(0..layout.n_punct))];
        if rng.random_bool(0.5) {
            infix.push(layout.space);
        }
        let separator = match rng.random_range(0..3) {
            0 => vec![layout.newline],
            1 => vec![layout.newline, layout.newline],
            _ => vec![layout.punct(rng.random_range(0..layout.n_punct)), layout.newline],
        };
        Self { prefix, infix, separator, label_words, tags: vec!["sampled".into()] }
    }

    pub fn n_labels(&self) -> usize {
        self.label_words.len()
    }

    /// `prefix ++ infix ++ separator ++ label_words`: everything a template
    /// contributes to a prompt, independent of the demonstrations.
    pub fn skeleton(&self) -> Vec<TokenId> {
        let mut s = self.prefix.clone();
        s.extend(&self.infix);
        s.extend(&self.separator);
        s.extend(&self.label_words);
        s
    }

    pub fn perturb(&self, edit: &TemplateEdit, layout: &VocabLayout) -> Result<Template> {
        let mut t = self.clone();
        match edit {
            TemplateEdit::AddSpace => t.infix.insert(0, layout.space),
            TemplateEdit::DropSpace => {
                let i = t
                    .infix
                    .iter()
                    .position(|x| *x == layout.space)
                    .ok_or_else(|| Error::Edit("infix has no space".into()))?;
                t.infix.remove(i);
            }
            TemplateEdit::DropNewline => {
                let i = t
                    .separator
                    .iter()
                    .rposition(|x| *x == layout.newline)
                    .ok_or_else(|| Error::Edit("separator has no newline".into()))?;
                if t.separator.len() == 1 {
                    return Err(Error::Edit("dropping the newline leaves no separator".into()));
                }
                t.separator.remove(i);
            }
            TemplateEdit::SwapLabelWord { label, word } => {
                let slot = t
                    .label_words
                    .get_mut(*label)
                    .ok_or_else(|| Error::Edit(format!("no label {label}")))?;
                if *slot == *word {
                    return Err(Error::Edit(format!("label {label} already uses word {word}")));
                }
                if !layout.is_label_word(*word) {
                    return Err(Error::Edit(format!("token {word} is not a label word")));
                }
                *slot = *word;
                if self.label_words.contains(word) {
                    return Err(Error::Edit(format!("word {word} already names another label")));
                }
            }
        }
        t.tags.push(edit.tag());
        Ok(t)
    }

    /// Every edit applicable to this template, each as a one-token change.
    pub fn contrast_edits(&self, layout: &VocabLayout) -> Vec<TemplateEdit> {
        let mut edits = vec![TemplateEdit::AddSpace];
        if self.infix.contains(&layout.space) {
            edits.push(TemplateEdit::DropSpace);
        }
        if self.separator.len() > 1 && self.separator.contains(&layout.newline) {
            edits.push(TemplateEdit::DropNewline);
        }
        let unused = (0..layout.n_label_words)
            .map(|i| layout.label_word(i))
            .find(|w| !self.label_words.contains(w));
        if let (Some(word), false) = (unused, self.label_words.is_empty()) {
            edits.push(TemplateEdit::SwapLabelWord { label: 0, word });
        }
        edits
    }
}

/// Demonstrations plus the template that renders them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub demos: Vec<LabeledExample>,
    pub template: Template,
}

/// A rendered prompt and the positions where demonstration label words sit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<TokenId>,
    /// `(position, label)` for every demonstration label word.
    pub label_slots: Vec<(usize, usize)>,
}

/// Renders `[BOS] prefix (x infix y sep)* query infix`.
pub fn assemble_prompt(spec: &PromptSpec, query: &[TokenId], bos: TokenId, max_seq: usize) -> Result<Prompt> {
    let t = &spec.template;
    let mut tokens = vec![bos];
    tokens.extend(&t.prefix);
    let mut label_slots = Vec::with_capacity(spec.demos.len());
    for d in &spec.demos {
        let word = *t
            .label_words
            .get(d.label)
            .ok_or_else(|| Error::Index(format!("label {} without a label word", d.label)))?;
        tokens.extend(&d.input);
        tokens.extend(&t.infix);
        label_slots.push((tokens.len(), d.label));
        tokens.push(word);
        tokens.extend(&t.separator);
    }
    tokens.extend(query);
    tokens.extend(&t.infix);
    if tokens.len() > max_seq {
        return Err(Error::Length { len: tokens.len(), max_seq });
    }
    Ok(Prompt { tokens, label_slots })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub kind: TaskKind,
    pub seed: u64,
    pub n_labels: usize,
    pub layout: VocabLayout,
    pub verbalizer: Vec<TokenId>,
    pub examples: Vec<LabeledExample>,
    /// `templates[0]` is the base template.
    pub templates: Vec<Template>,
}

impl Task {
    pub fn base_template(&self) -> &Template {
        &self.templates[0]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: Task = serde_json::from_slice(&fs::read(path)?)?;
        if t.templates.is_empty() || t.verbalizer.len() != t.n_labels {
            return Err(Error::Format("task needs templates and one label word per class".into()));
        }
        let v = t.layout.vocab_size() as TokenId;
        for e in &t.examples {
            if e.label >= t.n_labels || e.input.iter().any(|x| *x >= v) {
                return Err(Error::Format("example outside the task's labels or vocabulary".into()));
            }
        }
        Ok(t)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

fn check_counts(n_labels: usize, n_examples: usize) -> Result<()> {
    if n_labels < 2 {
        return Err(Error::Input("need at least two labels".into()));
    }
    if n_examples % n_labels != 0 {
        return Err(Error::Input(format!("{n_examples} examples do not split over {n_labels} labels")));
    }
    Ok(())
}

fn finish_task(
    kind: TaskKind,
    seed: u64,
    n_labels: usize,
    layout: VocabLayout,
    mut examples: Vec<LabeledExample>,
) -> Result<Task> {
    if n_labels > layout.n_label_words {
        return Err(Error::Input(format!("{n_labels} labels but {} label words", layout.n_label_words)));
    }
    let mut rng = seed::substream(seed, "verbalizer");
    let mut words: Vec<TokenId> = (0..layout.n_label_words).map(|i| layout.label_word(i)).collect();
    words.shuffle(&mut rng);
    let verbalizer = words[..n_labels].to_vec();
    examples.shuffle(&mut seed::substream(seed, "order"));
    let mut trng = seed::substream(seed, "templates");
    let mut templates = vec![Template::base(&layout, verbalizer.clone())];
    while templates.len() < DEFAULT_N_TEMPLATES {
        let t = Template::sample(&layout, verbalizer.clone(), &mut trng);
        if !templates.iter().any(|o| o.skeleton() == t.skeleton()) {
            templates.push(t);
        }
    }
    Ok(Task { kind, seed, n_labels, layout, verbalizer, examples, templates })
}

/// Pattern-matching task. Patterns are assigned to labels round-robin after a
/// seeded shuffle, so every label owns at least one pattern and the label of
/// a query is recoverable from any demonstration sharing its pattern.
pub fn generate_pattern_task(seed: u64, n_patterns: usize, n_labels: usize, n_examples: usize) -> Result<Task> {
    generate_pattern_task_with(seed, n_patterns, n_labels, n_examples, 2)
}

pub fn generate_pattern_task_with(
    seed: u64,
    n_patterns: usize,
    n_labels: usize,
    n_examples: usize,
    input_len: usize,
) -> Result<Task> {
    check_counts(n_labels, n_examples)?;
    if n_patterns < n_labels {
        return Err(Error::Input(format!("{n_patterns} patterns cannot cover {n_labels} labels")));
    }
    if input_len == 0 {
        return Err(Error::Input("input_len must be positive".into()));
    }
    let layout = VocabLayout::with_pools(n_patterns.max(DEFAULT_PATTERN_POOL), DEFAULT_LABEL_POOL.max(n_labels));
    let mut rng = seed::substream(seed, "pattern-task");
    let mut pool: Vec<usize> = (0..layout.n_patterns).collect();
    pool.shuffle(&mut rng);
    let mut by_label: Vec<Vec<TokenId>> = vec![vec![]; n_labels];
    for (i, p) in pool[..n_patterns].iter().enumerate() {
        by_label[i % n_labels].push(layout.pattern(*p));
    }
    let per_class = n_examples / n_labels;
    let mut examples = Vec::with_capacity(n_examples);
    for (label, pats) in by_label.iter().enumerate() {
        for _ in 0..per_class {
            let mut input = vec![pats[rng.random_range(0..pats.len())]];
            input.extend((1..input_len).map(|_| layout.filler(rng.random_range(0..layout.n_fillers))));
            examples.push(LabeledExample { input, label });
        }
    }
    finish_task(TaskKind::Pattern { n_patterns, input_len }, seed, n_labels, layout, examples)
}

/// Sub-vocabulary of fillers owned by `label` in the majority task.
pub fn majority_subvocab(layout: &VocabLayout, n_labels: usize, label: usize) -> Vec<TokenId> {
    let per = layout.n_fillers / n_labels;
    (label * per..(label + 1) * per).map(|i| layout.filler(i)).collect()
}

pub fn generate_majority_task(seed: u64, n_labels: usize, seq_len: usize, n_examples: usize) -> Result<Task> {
    check_counts(n_labels, n_examples)?;
    if seq_len % 2 == 0 {
        return Err(Error::Input(format!("seq_len {seq_len} must be odd")));
    }
    let layout = VocabLayout::with_pools(DEFAULT_PATTERN_POOL, DEFAULT_LABEL_POOL.max(n_labels));
    if layout.n_fillers / n_labels == 0 {
        return Err(Error::Input(format!("{n_labels} labels exceed the filler pool")));
    }
    let subs: Vec<Vec<TokenId>> = (0..n_labels).map(|c| majority_subvocab(&layout, n_labels, c)).collect();
    let mut rng = seed::substream(seed, "majority-task");
    let per_class = n_examples / n_labels;
    let mut examples = Vec::with_capacity(n_examples);
    for label in 0..n_labels {
        for _ in 0..per_class {
            // strict majority: the winning class takes more than half
            let m = rng.random_range(seq_len / 2 + 1..=seq_len);
            let mut input: Vec<TokenId> = (0..m).map(|_| subs[label][rng.random_range(0..subs[label].len())]).collect();
            for _ in m..seq_len {
                let mut other = rng.random_range(0..n_labels - 1);
                if other >= label {
                    other += 1;
                }
                input.push(subs[other][rng.random_range(0..subs[other].len())]);
            }
            input.shuffle(&mut rng);
            examples.push(LabeledExample { input, label });
        }
    }
    finish_task(TaskKind::Majority { seq_len }, seed, n_labels, layout, examples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DemoMode {
    Balanced,
    AllLabel(usize),
}

/// Picks `k_prime` demonstration indices from `pool` (indices into
/// `examples`). Balanced selections are reshuffled until the last two labels
/// differ.
pub fn sample_demonstrations(
    examples: &[LabeledExample],
    pool: &[usize],
    n_labels: usize,
    k_prime: usize,
    mode: DemoMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut by_label: Vec<Vec<usize>> = vec![vec![]; n_labels];
    for &i in pool {
        let l = examples
            .get(i)
            .ok_or_else(|| Error::Index(format!("example {i} of {}", examples.len())))?
            .label;
        by_label[l].push(i);
    }
    let mut chosen = Vec::with_capacity(k_prime);
    match mode {
        DemoMode::Balanced => {
            if k_prime % n_labels != 0 {
                return Err(Error::Input(format!("K'={k_prime} is not balanced over {n_labels} labels")));
            }
            let per = k_prime / n_labels;
            for (l, members) in by_label.iter_mut().enumerate() {
                if members.len() < per {
                    return Err(Error::Input(format!("label {l} has {} examples, need {per}", members.len())));
                }
                members.shuffle(rng);
                chosen.extend_from_slice(&members[..per]);
            }
            chosen.shuffle(rng);
            while chosen.len() >= 2 && examples[chosen[chosen.len() - 1]].label == examples[chosen[chosen.len() - 2]].label {
                chosen.shuffle(rng);
            }
        }
        DemoMode::AllLabel(c) => {
            let members = by_label
                .get_mut(c)
                .ok_or_else(|| Error::Index(format!("label {c} of {n_labels}")))?;
            if members.len() < k_prime {
                return Err(Error::Input(format!("label {c} has {} examples, need {k_prime}", members.len())));
            }
            members.shuffle(rng);
            chosen.extend_from_slice(&members[..k_prime]);
        }
    }
    Ok(chosen)
}

/// Splits a pool of `K` examples into `K'` balanced demonstrations and the
/// remaining training rows (kept in pool order).
pub fn split_examples(
    examples: &[LabeledExample],
    pool: &[usize],
    n_labels: usize,
    k_prime: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if pool.len() <= k_prime {
        return Err(Error::Input(format!("pool of {} cannot hold {k_prime} demonstrations plus training rows", pool.len())));
    }
    let demo = sample_demonstrations(examples, pool, n_labels, k_prime, DemoMode::Balanced, rng)?;
    let train = pool.iter().copied().filter(|i| !demo.contains(i)).collect();
    Ok((demo, train))
}

/// A balanced test set plus disjoint balanced demonstration sets drawn from
/// what is left.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSplit {
    pub demo_sets: Vec<Vec<usize>>,
    pub test: Vec<usize>,
    /// Examples not used by either part, in task order.
    pub rest: Vec<usize>,
}

pub fn eval_split(task: &Task, n_demo_sets: usize, k_prime: usize, test_size: usize, seed: u64) -> Result<EvalSplit> {
    let n = task.n_labels;
    if test_size % n != 0 {
        return Err(Error::Input(format!("test size {test_size} is not balanced over {n} labels")));
    }
    let mut rng = seed::substream(seed, "eval-split");
    let mut by_label: Vec<Vec<usize>> = vec![vec![]; n];
    for (i, e) in task.examples.iter().enumerate() {
        by_label[e.label].push(i);
    }
    let per = test_size / n;
    let mut test = Vec::with_capacity(test_size);
    for (l, members) in by_label.iter_mut().enumerate() {
        if members.len() < per {
            return Err(Error::Input(format!("label {l} has {} examples, test needs {per}", members.len())));
        }
        members.shuffle(&mut rng);
        test.extend(members.drain(..per));
    }
    test.sort_unstable();
    let mut rest: Vec<usize> = by_label.concat();
    rest.sort_unstable();
    let mut demo_sets = Vec::with_capacity(n_demo_sets);
    for _ in 0..n_demo_sets {
        let d = sample_demonstrations(&task.examples, &rest, n, k_prime, DemoMode::Balanced, &mut rng)?;
        rest.retain(|i| !d.contains(i));
        demo_sets.push(d);
    }
    Ok(EvalSplit { demo_sets, test, rest })
}

/// Builds a prompt spec from demonstration indices.
pub fn prompt_spec(task: &Task, demos: &[usize], template: &Template) -> PromptSpec {
    PromptSpec {
        demos: demos.iter().map(|i| task.examples[*i].clone()).collect(),
        template: template.clone(),
    }
}

/// Fresh random rng for callers that want a named stream.
pub fn rng(seed: u64, name: &str) -> ChaCha8Rng {
    seed::substream(seed, name)
}
