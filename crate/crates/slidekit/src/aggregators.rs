//! Slide-level aggregation architectures over level-1 feature bags:
//! instance-max MIL (no global structure), and a two-stage transformer
//! (region encoder + slide classifier) in a shallow or deep variant, with
//! three ways of sourcing the region-encoder weights. Also the survival
//! head and its Cox partial-likelihood loss.

use crate::features::{FeatureBag, FeatureEntry, RegionGrid, REGION_SPAN};
use crate::tensor::{
    lit, load_params, save_params, transformer_block, CheckpointError, Graph, LayerNormWeights,
    NodeId, ParamSet, Tensor, TensorError, TransformerBlockWeights, LAYER_NORM_EPS,
};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const L1_DIM: usize = 384;
pub const L2_DIM: usize = 192;
pub const L3_LAYERS: usize = 2;
pub const L3_HEADS: usize = 3;
const MAXMIL_HIDDEN: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum AggregatorError {
    #[error("feature bag is empty")]
    EmptyBag,
    #[error("region has no present tokens")]
    EmptyRegion,
    #[error("no region vectors to classify")]
    EmptyInput,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("l2_mode {0:?} requires a pre-trained level-2 checkpoint")]
    MissingCheckpoint(L2Mode),
    #[error("checkpoint does not fit the configured model: {0}")]
    CheckpointShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// instance-max MIL; no token mixing at all
    None,
    /// shallow region transformer (2 layers, 3 heads)
    Medium,
    /// deep region transformer (6 layers, 6 heads)
    Most,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Mode {
    Frozen,
    Finetune,
    RandomInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub structure: Structure,
    /// required for medium/most, must be absent for none
    pub l2_mode: Option<L2Mode>,
    pub classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), AggregatorError> {
        if self.classes < 2 {
            return Err(AggregatorError::InvalidConfig(format!(
                "need >= 2 classes, got {}",
                self.classes
            )));
        }
        match (self.structure, self.l2_mode) {
            (Structure::None, Some(_)) => Err(AggregatorError::InvalidConfig(
                "l2_mode must be unset when structure is none".into(),
            )),
            (Structure::Medium | Structure::Most, None) => Err(AggregatorError::InvalidConfig(
                "medium/most structure requires an l2_mode".into(),
            )),
            _ => Ok(()),
        }
    }

    /// (layers, heads) of the region encoder, when one exists.
    pub fn l2_shape(&self) -> Option<(usize, usize)> {
        match self.structure {
            Structure::None => None,
            Structure::Medium => Some((2, 3)),
            Structure::Most => Some((6, 6)),
        }
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    let lim = (6.0 / (rows + cols) as f64).sqrt() as f32;
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-lim..lim)).collect())
        .unwrap()
}

fn insert_block(params: &mut ParamSet<f32>, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) {
    params.insert(format!("{prefix}.ln1.gamma"), Tensor::vector(vec![1.0; dim]));
    params.insert(format!("{prefix}.ln1.beta"), Tensor::zeros(vec![dim]));
    for w in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("{prefix}.attn.{w}"), xavier(rng, dim, dim));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        params.insert(format!("{prefix}.attn.{b}"), Tensor::zeros(vec![dim]));
    }
    params.insert(format!("{prefix}.ln2.gamma"), Tensor::vector(vec![1.0; dim]));
    params.insert(format!("{prefix}.ln2.beta"), Tensor::zeros(vec![dim]));
    params.insert(format!("{prefix}.mlp.w1"), xavier(rng, dim, dim * 4));
    params.insert(format!("{prefix}.mlp.b1"), Tensor::zeros(vec![dim * 4]));
    params.insert(format!("{prefix}.mlp.w2"), xavier(rng, dim * 4, dim));
    params.insert(format!("{prefix}.mlp.b2"), Tensor::zeros(vec![dim]));
}

/// Seeded initialization of all parameters for a config. The `l2.` subtree
/// matches the layout produced by self-distillation pre-training.
pub fn init_params(config: &ModelConfig) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d6f64656c);
    let mut params = ParamSet::new();
    match config.l2_shape() {
        None => {
            params.insert("head.w1", xavier(&mut rng, L1_DIM, MAXMIL_HIDDEN));
            params.insert("head.b1", Tensor::zeros(vec![MAXMIL_HIDDEN]));
            params.insert("head.w2", xavier(&mut rng, MAXMIL_HIDDEN, config.classes));
            params.insert("head.b2", Tensor::zeros(vec![config.classes]));
            params.insert("surv.w", xavier(&mut rng, L1_DIM, 1));
            params.insert("surv.b", Tensor::zeros(vec![1]));
        }
        Some((layers, _heads)) => {
            insert_l2_params(&mut params, layers, &mut rng);
            params.insert("l3.cls", xavier(&mut rng, 1, L2_DIM));
            for i in 0..L3_LAYERS {
                insert_block(&mut params, &format!("l3.block{i}"), L2_DIM, &mut rng);
            }
            params.insert("l3.ln.gamma", Tensor::vector(vec![1.0; L2_DIM]));
            params.insert("l3.ln.beta", Tensor::zeros(vec![L2_DIM]));
            params.insert("l3.out.w", xavier(&mut rng, L2_DIM, config.classes));
            params.insert("l3.out.b", Tensor::zeros(vec![config.classes]));
            params.insert("surv.w", xavier(&mut rng, L2_DIM, 1));
            params.insert("surv.b", Tensor::zeros(vec![1]));
        }
    }
    params
}

/// Region-encoder parameter subtree (also used by the pre-trainer).
pub fn insert_l2_params(params: &mut ParamSet<f32>, layers: usize, rng: &mut ChaCha8Rng) {
    params.insert("l2.proj.w", xavier(rng, L1_DIM, L2_DIM));
    params.insert("l2.proj.b", Tensor::zeros(vec![L2_DIM]));
    let span = (REGION_SPAN * REGION_SPAN) as usize;
    let pos = (0..span * L2_DIM).map(|_| rng.gen_range(-0.02f32..0.02)).collect();
    params.insert("l2.pos", Tensor::matrix(span, L2_DIM, pos).unwrap());
    params.insert("l2.cls", xavier(rng, 1, L2_DIM));
    for i in 0..layers {
        insert_block(params, &format!("l2.block{i}"), L2_DIM, rng);
    }
    params.insert("l2.ln.gamma", Tensor::vector(vec![1.0; L2_DIM]));
    params.insert("l2.ln.beta", Tensor::zeros(vec![L2_DIM]));
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidePrediction {
    pub logits: Vec<f32>,
    pub probabilities: Vec<f32>,
    /// grid cell of the winning instance; present iff structure = none
    pub selected_instance: Option<(i32, i32)>,
    /// per-region affinity of the final class token (softmax over regions);
    /// empty for structure = none
    pub region_attention: Vec<((i32, i32), f32)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalPrediction {
    /// higher = shorter expected survival
    pub risk: f32,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
}

/// Assemble a model per config. Frozen/finetune load the `l2.` subtree from
/// the checkpoint; random_init keeps the seeded initialization.
pub fn build_model(
    config: ModelConfig,
    l2_checkpoint: Option<&Path>,
) -> Result<Model, AggregatorError> {
    config.validate()?;
    let mut params = init_params(&config);
    if let Some(mode @ (L2Mode::Frozen | L2Mode::Finetune)) = config.l2_mode {
        let path = l2_checkpoint.ok_or(AggregatorError::MissingCheckpoint(mode))?;
        let loaded: ParamSet<f32> = load_params(path)?;
        let expected: Vec<String> =
            params.names().filter(|n| n.starts_with("l2.")).cloned().collect();
        for name in &expected {
            let have = loaded.get(name).ok_or_else(|| {
                AggregatorError::CheckpointShapeMismatch(format!("missing {name}"))
            })?;
            let want = params.get(name).unwrap();
            if have.shape() != want.shape() {
                return Err(AggregatorError::CheckpointShapeMismatch(format!(
                    "{name}: checkpoint {:?} vs config {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
            *params.get_mut(name).unwrap() = have.clone();
        }
        for name in loaded.names() {
            if name.starts_with("l2.") && !params.contains(name) {
                return Err(AggregatorError::CheckpointShapeMismatch(format!(
                    "unexpected {name} (layer count mismatch?)"
                )));
            }
        }
    }
    Ok(Model { config, params })
}

impl Model {
    /// Whether a parameter receives gradients/updates under this config.
    pub fn trainable(&self, name: &str) -> bool {
        !(self.config.l2_mode == Some(L2Mode::Frozen) && name.starts_with("l2."))
    }
}

fn sorted_entries(bag: &FeatureBag) -> Vec<&FeatureEntry> {
    let mut entries: Vec<&FeatureEntry> = bag.entries.iter().collect();
    entries.sort_by_key(|e| (e.grid_y, e.grid_x));
    entries
}

fn bag_matrix(g: &mut Graph<f32>, entries: &[&FeatureEntry], trainable: bool) -> NodeId {
    let dim = entries[0].vector.len();
    let data: Vec<f32> = entries.iter().flat_map(|e| e.vector.iter().copied()).collect();
    g.leaf(Tensor::matrix(entries.len(), dim, data).unwrap(), trainable)
}

fn softmax_slice(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Instance-max MIL over a leaf `[n, 384]` matrix whose rows follow
/// `entries` order (already (y, x)-sorted so ties pick the lowest cell).
/// Returns the slide logit row and the selected row index; only the
/// selected instance is on the loss path.
pub(crate) fn maxmil_forward_node(
    g: &mut Graph<f32>,
    ids: &IndexMap<String, NodeId>,
    x: NodeId,
) -> Result<(NodeId, usize), AggregatorError> {
    let h0 = g.matmul(x, ids["head.w1"])?;
    let h1 = g.add_row_broadcast(h0, ids["head.b1"])?;
    let h = g.gelu(h1);
    let l0 = g.matmul(h, ids["head.w2"])?;
    let logits_all = g.add_row_broadcast(l0, ids["head.b2"])?;
    let values = g.value(logits_all);
    let (n, c) = (values.rows(), values.cols());
    let mut best = (0usize, f32::NEG_INFINITY);
    for i in 0..n {
        let probs = softmax_slice(&values.data()[i * c..(i + 1) * c]);
        let top = probs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        if top > best.1 {
            best = (i, top);
        }
    }
    let row = g.slice_rows(logits_all, best.0, 1)?;
    Ok((row, best.0))
}

struct L2Weights {
    proj_w: NodeId,
    proj_b: NodeId,
    pos: NodeId,
    cls: NodeId,
    blocks: Vec<TransformerBlockWeights>,
    ln: LayerNormWeights,
    heads: usize,
}

impl L2Weights {
    fn from_ids(ids: &IndexMap<String, NodeId>, layers: usize, heads: usize) -> Self {
        Self {
            proj_w: ids["l2.proj.w"],
            proj_b: ids["l2.proj.b"],
            pos: ids["l2.pos"],
            cls: ids["l2.cls"],
            blocks: (0..layers)
                .map(|i| TransformerBlockWeights::from_ids(ids, &format!("l2.block{i}")))
                .collect(),
            ln: LayerNormWeights::from_ids(ids, "l2.ln"),
            heads,
        }
    }
}

/// Encode one region: project present tokens, add their slot's positional
/// embedding, prepend the class token, run the transformer (class token is
/// not attended to as a key), return the final class-token state `[1, 192]`.
fn l2_encode_node(
    g: &mut Graph<f32>,
    w: &L2Weights,
    region: &RegionGrid,
    token_leaf: Option<NodeId>,
) -> Result<NodeId, AggregatorError> {
    let mut slots = Vec::new();
    let mut vectors = Vec::new();
    for (idx, tok) in region.tokens.iter().enumerate() {
        if let Some(v) = tok {
            slots.push(idx);
            vectors.extend_from_slice(v);
        }
    }
    if slots.is_empty() {
        return Err(AggregatorError::EmptyRegion);
    }
    let m = slots.len();
    let x = match token_leaf {
        Some(node) => node,
        None => g.leaf(Tensor::matrix(m, L1_DIM, vectors)?, false),
    };
    let p0 = g.matmul(x, w.proj_w)?;
    let projected = g.add_row_broadcast(p0, w.proj_b)?;
    let pos = g.gather_rows(w.pos, &slots)?;
    let placed = g.add(projected, pos)?;
    let mut tokens = g.concat_rows(&[w.cls, placed])?;
    let mut mask = vec![true; m + 1];
    mask[0] = false; // class token reads but is never read
    for block in &w.blocks {
        tokens = transformer_block(g, tokens, block, w.heads, Some(&mask))?;
    }
    let eps = lit::<f32>(LAYER_NORM_EPS);
    let normed = g.layer_norm(tokens, w.ln.gamma, w.ln.beta, eps)?;
    Ok(g.slice_rows(normed, 0, 1)?)
}

/// Classify a `[R, 192]` region-vector matrix: class token + region tokens
/// through the 2-layer set transformer (no positions), linear head on the
/// class token. Returns (logit row, final class-token node).
fn l3_classify_node(
    g: &mut Graph<f32>,
    ids: &IndexMap<String, NodeId>,
    region_matrix: NodeId,
) -> Result<(NodeId, NodeId), AggregatorError> {
    let r = g.value(region_matrix).rows();
    let mut tokens = g.concat_rows(&[ids["l3.cls"], region_matrix])?;
    let mut mask = vec![true; r + 1];
    mask[0] = false;
    for i in 0..L3_LAYERS {
        let w = TransformerBlockWeights::from_ids(ids, &format!("l3.block{i}"));
        tokens = transformer_block(g, tokens, &w, L3_HEADS, Some(&mask))?;
    }
    let eps = lit::<f32>(LAYER_NORM_EPS);
    let ln = LayerNormWeights::from_ids(ids, "l3.ln");
    let normed = g.layer_norm(tokens, ln.gamma, ln.beta, eps)?;
    let cls = g.slice_rows(normed, 0, 1)?;
    let l0 = g.matmul(cls, ids["l3.out.w"])?;
    let logits = g.add_row_broadcast(l0, ids["l3.out.b"])?;
    Ok((logits, cls))
}

struct Forward {
    logits: NodeId,
    selected: Option<(i32, i32)>,
    regions: Vec<(i32, i32)>,
    cls: Option<NodeId>,
    region_matrix: Option<NodeId>,
    /// pooled representation for the survival head
    pooled: NodeId,
}

impl Model {
    fn forward(
        &self,
        g: &mut Graph<f32>,
        ids: &IndexMap<String, NodeId>,
        bag: &FeatureBag,
    ) -> Result<Forward, AggregatorError> {
        if bag.entries.is_empty() {
            return Err(AggregatorError::EmptyBag);
        }
        match self.config.l2_shape() {
            None => {
                let entries = sorted_entries(bag);
                let x = bag_matrix(g, &entries, false);
                let (logits, sel) = maxmil_forward_node(g, ids, x)?;
                let pooled = g.mean_rows(x)?;
                Ok(Forward {
                    logits,
                    selected: Some((entries[sel].grid_x, entries[sel].grid_y)),
                    regions: Vec::new(),
                    cls: None,
                    region_matrix: None,
                    pooled,
                })
            }
            Some((layers, heads)) => {
                let grids = crate::features::group_into_regions(bag, 1);
                if grids.is_empty() {
                    return Err(AggregatorError::EmptyBag);
                }
                let w = L2Weights::from_ids(ids, layers, heads);
                let mut encoded = Vec::with_capacity(grids.len());
                let mut coords = Vec::with_capacity(grids.len());
                for region in &grids {
                    encoded.push(l2_encode_node(g, &w, region, None)?);
                    coords.push((region.region_x, region.region_y));
                }
                let region_matrix = g.concat_rows(&encoded)?;
                let (logits, cls) = l3_classify_node(g, ids, region_matrix)?;
                let pooled = g.mean_rows(region_matrix)?;
                Ok(Forward {
                    logits,
                    selected: None,
                    regions: coords,
                    cls: Some(cls),
                    region_matrix: Some(region_matrix),
                    pooled,
                })
            }
        }
    }

    fn prediction_from(&self, g: &Graph<f32>, fwd: &Forward) -> SlidePrediction {
        let logits = g.value(fwd.logits).data().to_vec();
        let probabilities = softmax_slice(&logits);
        let region_attention = match (fwd.cls, fwd.region_matrix) {
            (Some(cls), Some(rm)) => {
                let c = g.value(cls).data();
                let m = g.value(rm).data();
                let scale = 1.0 / (L2_DIM as f32).sqrt();
                let scores: Vec<f32> = fwd
                    .regions
                    .iter()
                    .enumerate()
                    .map(|(i, _)| {
                        m[i * L2_DIM..(i + 1) * L2_DIM]
                            .iter()
                            .zip(c)
                            .map(|(a, b)| a * b)
                            .sum::<f32>()
                            * scale
                    })
                    .collect();
                fwd.regions.iter().copied().zip(softmax_slice(&scores)).collect()
            }
            _ => Vec::new(),
        };
        SlidePrediction {
            logits,
            probabilities,
            selected_instance: fwd.selected,
            region_attention,
        }
    }

    pub fn predict(&self, bag: &FeatureBag) -> Result<SlidePrediction, AggregatorError> {
        let mut g = Graph::new();
        let ids = self.params.register(&mut g, |_| false);
        let fwd = self.forward(&mut g, &ids, bag)?;
        Ok(self.prediction_from(&g, &fwd))
    }

    /// Cross-entropy against `target`; returns (loss, prediction, grads for
    /// every trainable parameter on the loss path).
    pub fn loss_and_grads(
        &self,
        bag: &FeatureBag,
        target: usize,
    ) -> Result<(f32, SlidePrediction, IndexMap<String, Vec<f32>>), AggregatorError> {
        let mut g = Graph::new();
        let ids = self.params.register(&mut g, |name| self.trainable(name));
        let fwd = self.forward(&mut g, &ids, bag)?;
        let loss = g.cross_entropy(fwd.logits, target)?;
        g.backward(loss)?;
        let prediction = self.prediction_from(&g, &fwd);
        Ok((*g.value(loss).data().first().unwrap(), prediction, self.params.collect_grads(&g, &ids)))
    }

    pub fn survival_predict(
        &self,
        bag: &FeatureBag,
    ) -> Result<SurvivalPrediction, AggregatorError> {
        let mut g = Graph::new();
        let ids = self.params.register(&mut g, |_| false);
        let fwd = self.forward(&mut g, &ids, bag)?;
        let r0 = g.matmul(fwd.pooled, ids["surv.w"])?;
        let risk = g.add_row_broadcast(r0, ids["surv.b"])?;
        Ok(SurvivalPrediction { risk: g.value(risk).data()[0] })
    }

    /// Batched Cox loss over several slides' pooled representations.
    pub fn survival_loss_and_grads(
        &self,
        bags: &[&FeatureBag],
        times: &[f64],
        events: &[bool],
    ) -> Result<(f32, IndexMap<String, Vec<f32>>), AggregatorError> {
        let mut g = Graph::new();
        let ids = self.params.register(&mut g, |name| self.trainable(name));
        let mut risks = Vec::with_capacity(bags.len());
        for bag in bags {
            let fwd = self.forward(&mut g, &ids, bag)?;
            let r0 = g.matmul(fwd.pooled, ids["surv.w"])?;
            risks.push(g.add_row_broadcast(r0, ids["surv.b"])?);
        }
        let stacked = g.concat_rows(&risks)?;
        let loss = g.cox_loss(stacked, times, events)?;
        g.backward(loss)?;
        Ok((*g.value(loss).data().first().unwrap(), self.params.collect_grads(&g, &ids)))
    }
}

/// Graph-level region encoding over registered `l2.*` parameters; used by
/// the self-distillation pre-trainer so both sides share one code path.
pub(crate) fn l2_forward_graph(
    g: &mut Graph<f32>,
    ids: &IndexMap<String, NodeId>,
    layers: usize,
    heads: usize,
    region: &RegionGrid,
) -> Result<NodeId, AggregatorError> {
    let w = L2Weights::from_ids(ids, layers, heads);
    l2_encode_node(g, &w, region, None)
}

/// Standalone region encoding with the model's weights (inference only).
pub fn l2_encode(model: &Model, region: &RegionGrid) -> Result<Vec<f32>, AggregatorError> {
    let (layers, heads) = model
        .config
        .l2_shape()
        .ok_or_else(|| AggregatorError::InvalidConfig("structure none has no L2".into()))?;
    let mut g = Graph::new();
    let ids = model.params.register(&mut g, |_| false);
    let w = L2Weights::from_ids(&ids, layers, heads);
    let out = l2_encode_node(&mut g, &w, region, None)?;
    Ok(g.value(out).data().to_vec())
}

/// Classify pre-computed region vectors (inference only).
pub fn l3_classify(
    model: &Model,
    region_vectors: &[Vec<f32>],
) -> Result<SlidePrediction, AggregatorError> {
    if region_vectors.is_empty() {
        return Err(AggregatorError::EmptyInput);
    }
    let mut g = Graph::new();
    let ids = model.params.register(&mut g, |_| false);
    let data: Vec<f32> = region_vectors.iter().flatten().copied().collect();
    let rm = g.leaf(Tensor::matrix(region_vectors.len(), L2_DIM, data)?, false);
    let (logits_node, _) = l3_classify_node(&mut g, &ids, rm)?;
    let logits = g.value(logits_node).data().to_vec();
    let probabilities = softmax_slice(&logits);
    Ok(SlidePrediction {
        logits,
        probabilities,
        selected_instance: None,
        region_attention: Vec::new(),
    })
}

/// Checkpoint = tensor parameter file + `<path>.json` config sidecar.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<(), AggregatorError> {
    let path = path.as_ref();
    save_params(path, &model.params)?;
    let sidecar = path.with_extension("json");
    std::fs::write(sidecar, serde_json::to_string_pretty(&model.config)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model, AggregatorError> {
    let path = path.as_ref();
    let config: ModelConfig =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
    config.validate()?;
    let params = load_params(path)?;
    Ok(Model { config, params })
}
