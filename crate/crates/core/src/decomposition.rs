//! Direct-contribution decomposition of the final-position logits.
//!
//! The final RMSNorm is folded into a per-example gain
//! `gamma_hat = gamma / RMS(Σ z_j)`, after which the logits are an exact sum
//! of per-component terms `g_j = U · (z_j ⊙ gamma_hat)`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::container::{self, TensorRef};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ResidualWrites, TokenId, TransformerWeights};
use crate::numerics::{argmax, dot, Tensor2D};
use crate::par::{self, Execution};

pub const CACHE_MAGIC: &[u8; 4] = b"TDC1";

/// A single additive writer to the residual stream.
///
/// Ordering: the embedding state first, then heads by `(layer, head)`, then
/// MLPs by layer. This is also the order of [`ResidualWrites::iter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ComponentId {
    Embedding,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
}

impl ComponentId {
    /// Every component of `config` in canonical order.
    pub fn enumerate(config: &ModelConfig, include_embedding: bool) -> Vec<ComponentId> {
        let mut ids = Vec::with_capacity(config.n_writes());
        if include_embedding {
            ids.push(ComponentId::Embedding);
        }
        for layer in 0..config.n_layers {
            for head in 0..config.n_heads {
                ids.push(ComponentId::Head { layer, head });
            }
        }
        ids.extend((0..config.n_layers).map(|layer| ComponentId::Mlp { layer }));
        ids
    }

    /// Position of this component inside [`ResidualWrites::iter`].
    pub fn write_index(&self, n_layers: usize, n_heads: usize) -> usize {
        match *self {
            ComponentId::Embedding => 0,
            ComponentId::Head { layer, head } => 1 + layer * n_heads + head,
            ComponentId::Mlp { layer } => 1 + n_layers * n_heads + layer,
        }
    }

    pub fn layer(&self) -> Option<usize> {
        match *self {
            ComponentId::Embedding => None,
            ComponentId::Head { layer, .. } | ComponentId::Mlp { layer } => Some(layer),
        }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentId::Embedding => write!(f, "X0"),
            ComponentId::Head { layer, head } => write!(f, "L{layer}H{head}"),
            ComponentId::Mlp { layer } => write!(f, "L{layer}MLP"),
        }
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("unrecognized component id {s:?}"));
        if s == "X0" {
            return Ok(ComponentId::Embedding);
        }
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        if let Some(layer) = rest.strip_suffix("MLP") {
            return Ok(ComponentId::Mlp { layer: layer.parse().map_err(|_| bad())? });
        }
        let (layer, head) = rest.split_once('H').ok_or_else(bad)?;
        Ok(ComponentId::Head {
            layer: layer.parse().map_err(|_| bad())?,
            head: head.parse().map_err(|_| bad())?,
        })
    }
}

impl TryFrom<String> for ComponentId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ComponentId> for String {
    fn from(id: ComponentId) -> String {
        id.to_string()
    }
}

/// Post-final-norm activations `C_j = z_j ⊙ gamma_hat` for every write.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentActivations {
    pub ids: Vec<ComponentId>,
    pub acts: Vec<Vec<f32>>,
    pub gamma_hat: Vec<f32>,
}

impl ComponentActivations {
    pub fn get(&self, id: ComponentId) -> Option<&[f32]> {
        self.ids.iter().position(|x| *x == id).map(|i| self.acts[i].as_slice())
    }
}

/// Folds the final RMSNorm into `gamma_hat` computed from the full residual
/// sum, embedding state included.
pub fn fold_final_layernorm(
    writes: &ResidualWrites,
    gamma: &[f32],
    eps: f32,
) -> Result<ComponentActivations> {
    let d = gamma.len();
    if writes.x0.len() != d {
        return Err(Error::Dimension(format!("writes of width {} vs gamma {d}", writes.x0.len())));
    }
    if writes.mlps.is_empty() || writes.heads.len() % writes.mlps.len() != 0 {
        return Err(Error::Dimension("writes must hold n_heads per layer and one MLP per layer".into()));
    }
    let n_layers = writes.mlps.len();
    let n_heads = writes.heads.len() / n_layers;
    let sum = writes.sum();
    let ms = sum.iter().map(|x| x * x).sum::<f64>() / d as f64;
    let rms = (ms + eps as f64).sqrt();
    if rms == 0.0 {
        return Err(Error::SingularNorm);
    }
    let gamma_hat: Vec<f32> = gamma.iter().map(|g| (*g as f64 / rms) as f32).collect();
    let acts = writes
        .iter()
        .map(|z| z.iter().zip(&gamma_hat).map(|(a, b)| a * b).collect())
        .collect();
    let ids = ComponentId::enumerate(
        &ModelConfig {
            n_layers,
            n_heads,
            d_model: d,
            d_head: 0,
            d_mlp: 0,
            vocab_size: 0,
            max_seq: 0,
            eps,
        },
        true,
    );
    Ok(ComponentActivations { ids, acts, gamma_hat })
}

/// Output-embedding rows for the chosen vocabulary entries (`U_Y`).
pub fn label_rows(u: &Tensor2D, words: &[TokenId]) -> Result<Tensor2D> {
    let mut data = Vec::with_capacity(words.len() * u.cols());
    for w in words {
        if *w as usize >= u.rows() {
            return Err(Error::Index(format!("label word {w} outside vocabulary of {}", u.rows())));
        }
        data.extend_from_slice(u.row(*w as usize));
    }
    Tensor2D::from_vec(words.len(), u.cols(), data)
}

/// `C_j ↦ U_rows · C_j`.
pub fn early_decode(c: &[f32], u_rows: &Tensor2D) -> Result<Vec<f32>> {
    if u_rows.rows() == 0 {
        return Err(Error::Input("early decode needs at least one vocabulary row".into()));
    }
    if u_rows.cols() != c.len() {
        return Err(Error::Dimension(format!("activation {} vs U width {}", c.len(), u_rows.cols())));
    }
    Ok((0..u_rows.rows()).map(|r| dot(u_rows.row(r), c) as f32).collect())
}

/// Predicted label of one component; ties go to the lowest label index.
pub fn component_prediction(g: &[f32]) -> usize {
    argmax(g)
}

/// Logits with one component's direct contribution taken out.
pub fn remove_component_cached(full: &[f32], g: &[f32]) -> Result<Vec<f32>> {
    if full.len() != g.len() {
        return Err(Error::Dimension(format!("{} vs {}", full.len(), g.len())));
    }
    Ok(full.iter().zip(g).map(|(a, b)| a - b).collect())
}

/// Label-restricted direct contributions for a batch of examples.
///
/// `values` is `examples x components x labels`. Writes that are not part of
/// `components` (the embedding state, unless requested) are summed into a
/// per-example `offset`, so `offset + Σ_j g_j` is always the full
/// label-restricted logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionCache {
    pub components: Vec<ComponentId>,
    pub label_words: Vec<TokenId>,
    pub example_ids: Vec<usize>,
    pub gold: Vec<usize>,
    values: Vec<f32>,
    offset: Vec<f32>,
}

/// One example's slice of a [`ContributionCache`].
#[derive(Debug, Clone, Copy)]
pub struct CacheRow<'a> {
    pub g: &'a [f32],
    pub offset: &'a [f32],
    pub n_labels: usize,
}

impl<'a> CacheRow<'a> {
    pub fn component(&self, j: usize) -> &'a [f32] {
        &self.g[j * self.n_labels..(j + 1) * self.n_labels]
    }

    pub fn n_components(&self) -> usize {
        self.g.len() / self.n_labels
    }

    /// `offset + Σ_j w_j g_j` in `f64`; `None` means unit weights.
    pub fn weighted_logits(&self, w: Option<&[f64]>) -> Vec<f64> {
        let mut out: Vec<f64> = self.offset.iter().map(|x| *x as f64).collect();
        for j in 0..self.n_components() {
            let wj = w.map_or(1.0, |w| w[j]);
            for (o, g) in out.iter_mut().zip(self.component(j)) {
                *o += wj * *g as f64;
            }
        }
        out
    }
}

impl ContributionCache {
    pub fn new(
        components: Vec<ComponentId>,
        label_words: Vec<TokenId>,
        example_ids: Vec<usize>,
        gold: Vec<usize>,
        values: Vec<f32>,
        offset: Vec<f32>,
    ) -> Result<Self> {
        let (e, n, y) = (example_ids.len(), components.len(), label_words.len());
        if gold.len() != e || values.len() != e * n * y || offset.len() != e * y {
            return Err(Error::Dimension(format!(
                "cache {e}x{n}x{y}: {} values, {} offsets, {} gold",
                values.len(),
                offset.len(),
                gold.len()
            )));
        }
        if let Some(g) = gold.iter().find(|g| **g >= y) {
            return Err(Error::Index(format!("gold label {g} with {y} labels")));
        }
        if !values.iter().chain(&offset).all(|x| x.is_finite()) {
            return Err(Error::Input("non-finite contribution".into()));
        }
        Ok(Self { components, label_words, example_ids, gold, values, offset })
    }

    pub fn empty(components: Vec<ComponentId>, label_words: Vec<TokenId>) -> Self {
        Self {
            components,
            label_words,
            example_ids: vec![],
            gold: vec![],
            values: vec![],
            offset: vec![],
        }
    }

    pub fn n_examples(&self) -> usize {
        self.example_ids.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn n_labels(&self) -> usize {
        self.label_words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.example_ids.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_examples(), self.n_components(), self.n_labels())
    }

    pub fn row(&self, e: usize) -> CacheRow<'_> {
        let (n, y) = (self.n_components(), self.n_labels());
        CacheRow {
            g: &self.values[e * n * y..(e + 1) * n * y],
            offset: &self.offset[e * y..(e + 1) * y],
            n_labels: y,
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn offsets(&self) -> &[f32] {
        &self.offset
    }

    /// Label-restricted full-model logits of example `e`.
    pub fn full_logits(&self, e: usize) -> Vec<f64> {
        self.row(e).weighted_logits(None)
    }

    pub fn full_prediction(&self, e: usize) -> usize {
        argmax(&self.full_logits(e))
    }

    pub fn component_index(&self, id: ComponentId) -> Option<usize> {
        self.components.iter().position(|c| *c == id)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut meta = Map::new();
        meta.insert("components".into(), serde_json::to_value(&self.components)?);
        meta.insert("label_words".into(), serde_json::to_value(&self.label_words)?);
        meta.insert("example_ids".into(), serde_json::to_value(&self.example_ids)?);
        meta.insert("gold".into(), serde_json::to_value(&self.gold)?);
        let (e, n, y) = self.shape();
        container::encode(
            CACHE_MAGIC,
            meta,
            &[
                TensorRef { name: "contributions".into(), shape: vec![e, n, y], data: &self.values },
                TensorRef { name: "offset".into(), shape: vec![e, y], data: &self.offset },
            ],
        )
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut d = container::decode(CACHE_MAGIC, bytes)?;
        let mut field = |k: &str| -> Result<Value> {
            d.meta.remove(k).ok_or_else(|| Error::Format(format!("cache header lacks {k}")))
        };
        let components: Vec<ComponentId> = serde_json::from_value(field("components")?)?;
        let label_words: Vec<TokenId> = serde_json::from_value(field("label_words")?)?;
        let example_ids: Vec<usize> = serde_json::from_value(field("example_ids")?)?;
        let gold: Vec<usize> = serde_json::from_value(field("gold")?)?;
        let (_, values) = d.take("contributions")?;
        let (_, offset) = d.take("offset")?;
        Self::new(components, label_words, example_ids, gold, values, offset)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// A prompt whose final-position contributions should be cached.
#[derive(Debug, Clone)]
pub struct CacheInput {
    pub example_id: usize,
    pub tokens: Vec<TokenId>,
    pub gold: usize,
}

/// Decomposed forward per input, folded and early-decoded onto `label_words`.
pub fn build_cache(
    model: &TransformerWeights,
    inputs: &[CacheInput],
    label_words: &[TokenId],
    include_embedding: bool,
    exec: Execution,
) -> Result<ContributionCache> {
    let components = ComponentId::enumerate(&model.config, include_embedding);
    if inputs.is_empty() {
        return Ok(ContributionCache::empty(components, label_words.to_vec()));
    }
    let u_y = label_rows(&model.output_embedding, label_words)?;
    let rows = par::try_map(exec, inputs, |inp| -> Result<(Vec<f32>, Vec<f32>)> {
        let (_, writes) = model.forward_decomposed(&inp.tokens)?;
        let folded = fold_final_layernorm(&writes, &model.final_gamma, model.config.eps)?;
        let mut g = Vec::with_capacity(components.len() * label_words.len());
        for id in &components {
            let idx = id.write_index(model.config.n_layers, model.config.n_heads);
            g.extend(early_decode(&folded.acts[idx], &u_y)?);
        }
        let offset = if include_embedding {
            vec![0.0; label_words.len()]
        } else {
            early_decode(&folded.acts[0], &u_y)?
        };
        Ok((g, offset))
    })?;
    let mut values = Vec::with_capacity(rows.len() * components.len() * label_words.len());
    let mut offset = Vec::with_capacity(rows.len() * label_words.len());
    for (g, o) in rows {
        values.extend(g);
        offset.extend(o);
    }
    ContributionCache::new(
        components,
        label_words.to_vec(),
        inputs.iter().map(|i| i.example_id).collect(),
        inputs.iter().map(|i| i.gold).collect(),
        values,
        offset,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn component_order_and_names() {
        let cfg = ModelConfig::new(2, 2, 8, 8, 10, 8).unwrap();
        let ids = ComponentId::enumerate(&cfg, true);
        assert_eq!(ids.len(), cfg.n_writes());
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        for (i, id) in ids.iter().enumerate() {
            assert_eq!(id.write_index(2, 2), i);
            assert_eq!(id.to_string().parse::<ComponentId>().unwrap(), *id);
        }
        assert_eq!(ids[1].to_string(), "L0H0");
        assert_eq!(ids[6].to_string(), "L1MLP");
        assert!("L1Q".parse::<ComponentId>().is_err());
        assert_eq!(serde_json::to_string(&ids[2]).unwrap(), "\"L0H1\"");
    }

    fn writes(x0: Vec<f32>, heads: Vec<Vec<f32>>, mlps: Vec<Vec<f32>>) -> ResidualWrites {
        ResidualWrites { x0, heads, mlps }
    }

    #[test]
    fn fold_with_unit_rms_is_identity() {
        // sum = [1, -1, 1, -1] has RMS exactly 1
        let w = writes(
            vec![1.0, 0.0, 0.0, 0.0],
            vec![vec![0.0, -1.0, 0.0, 0.0]],
            vec![vec![0.0, 0.0, 1.0, -1.0]],
        );
        let f = fold_final_layernorm(&w, &[1.0; 4], 0.0).unwrap();
        for (c, z) in f.acts.iter().zip(w.iter()) {
            assert_eq!(c, z);
        }
    }

    #[test]
    fn fold_sums_to_normalized_residual() {
        let w = writes(
            vec![0.3, -1.2, 0.5],
            vec![vec![0.1, 0.4, -0.9], vec![1.5, 0.2, 0.0]],
            vec![vec![-0.7, 0.8, 0.25]],
        );
        let gamma = [0.9, 1.1, 1.3];
        let f = fold_final_layernorm(&w, &gamma, 1e-5).unwrap();
        let total: Vec<f32> = w.sum().iter().map(|x| *x as f32).collect();
        let ln = crate::numerics::rms_norm(&total, &gamma, 1e-5).unwrap();
        for i in 0..3 {
            let s: f32 = f.acts.iter().map(|c| c[i]).sum();
            assert!((s - ln[i]).abs() < 1e-6);
        }
        assert_eq!(f.ids.len(), 4);
    }

    #[test]
    fn fold_singular_without_eps() {
        let w = writes(vec![0.0; 2], vec![vec![0.0; 2]], vec![vec![0.0; 2]]);
        assert!(matches!(fold_final_layernorm(&w, &[1.0; 2], 0.0), Err(Error::SingularNorm)));
        assert!(fold_final_layernorm(&w, &[1.0; 2], 1e-5).is_ok());
    }

    #[test]
    fn early_decode_cases() {
        let u = Tensor2D::from_vec(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let rows = label_rows(&u, &[2, 0]).unwrap();
        assert_eq!(early_decode(&[0.0; 3], &rows).unwrap(), vec![0.0, 0.0]);
        assert_eq!(early_decode(&[4.0, 5.0, 6.0], &rows).unwrap(), vec![6.0, 4.0]);
        assert!(matches!(early_decode(&[1.0; 3], &Tensor2D::zeros(0, 3)), Err(Error::Input(_))));
        assert!(label_rows(&u, &[3]).is_err());
    }

    #[test]
    fn prediction_ties_low() {
        assert_eq!(component_prediction(&[0.2, 0.9]), 1);
        assert_eq!(component_prediction(&[0.5, 0.5]), 0);
        assert_eq!(component_prediction(&[-1.0, -2.0, -0.5]), 2);
    }

    #[test]
    fn removal_is_linear() {
        let comps = [vec![0.5f32, -1.0], vec![2.0, 0.25], vec![-0.75, 1.5]];
        let full: Vec<f32> = (0..2).map(|y| comps.iter().map(|c| c[y]).sum()).collect();
        assert_eq!(remove_component_cached(&full, &[0.0, 0.0]).unwrap(), full);
        let mut acc = [0f32; 2];
        for c in &comps {
            let r = remove_component_cached(&full, c).unwrap();
            acc[0] += r[0];
            acc[1] += r[1];
        }
        for y in 0..2 {
            assert!((acc[y] - 2.0 * full[y]).abs() < 1e-6);
        }
        assert!(remove_component_cached(&full, &[1.0]).is_err());
    }

    #[test]
    fn cache_validates_and_roundtrips() {
        let comps = vec![ComponentId::Head { layer: 0, head: 0 }, ComponentId::Mlp { layer: 0 }];
        let c = ContributionCache::new(
            comps.clone(),
            vec![4, 5],
            vec![10, 11],
            vec![0, 1],
            vec![1., 2., 3., 4., 5., 6., 7., 8.],
            vec![0.5, 0.5, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(c.shape(), (2, 2, 2));
        assert_eq!(c.row(1).component(1), &[7., 8.]);
        assert_eq!(c.full_logits(0), vec![4.5, 6.5]);
        let back = ContributionCache::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(ContributionCache::new(comps, vec![4, 5], vec![1], vec![2], vec![0.; 4], vec![0.; 2])
            .is_err());
    }
}
