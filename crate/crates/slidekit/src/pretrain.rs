//! Self-distillation pre-training for the region encoder: a student and an
//! EMA teacher see two augmented views of each region token grid; the
//! student matches the teacher's centered, sharpened output distribution.
//! Produces the `l2.*` checkpoint consumed by frozen/finetune modes.

use crate::aggregators::{insert_l2_params, l2_forward_graph, AggregatorError};
use crate::features::{RegionGrid, REGION_SPAN};
use crate::tensor::{
    lit, save_params, AdamW, CheckpointError, Graph, LrSchedule, NodeId, ParamSet, Tensor,
    TensorError,
};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

pub const MIN_CORPUS: usize = 32;
const PROJ_DIM: usize = 256;
const L2_DIM: usize = 192;
/// teacher entropy floor; staying below it for 100 consecutive steps means
/// the teacher has collapsed onto a few dimensions
const COLLAPSE_ENTROPY_NATS: f64 = 0.1;
const COLLAPSE_PATIENCE: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum SslError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("teacher output collapsed at step {step}")]
    CollapseDetected { step: usize },
    #[error("corpus of {found} regions is below the minimum {MIN_CORPUS}")]
    CorpusTooSmall { found: usize },
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy)]
pub struct DistillConfig {
    pub layers: usize,
    pub heads: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub teacher_momentum: f64,
    pub center_momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl DistillConfig {
    pub fn new(layers: usize, heads: usize, seed: u64) -> Self {
        Self {
            layers,
            heads,
            student_temp: 0.1,
            teacher_temp: 0.04,
            teacher_momentum: 0.996,
            center_momentum: 0.9,
            weight_decay: 0.01,
            seed,
        }
    }
}

/// Two augmented views of one source region.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub a: RegionGrid,
    pub b: RegionGrid,
}

pub struct DistillState {
    pub config: DistillConfig,
    pub student: ParamSet<f32>,
    pub teacher: ParamSet<f32>,
    pub center: Vec<f32>,
    optimizer: AdamW<f32>,
    step: usize,
    low_entropy_streak: usize,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: f64,
    pub teacher_entropy: f64,
}

fn init_student(config: &DistillConfig) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x646973746c6c);
    let mut params = ParamSet::new();
    insert_l2_params(&mut params, config.layers, &mut rng);
    let xavier = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
        let lim = (6.0 / (rows + cols) as f64).sqrt() as f32;
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-lim..lim)).collect())
            .unwrap()
    };
    params.insert("proj.w1", xavier(&mut rng, L2_DIM, PROJ_DIM));
    params.insert("proj.b1", Tensor::zeros(vec![PROJ_DIM]));
    params.insert("proj.w2", xavier(&mut rng, PROJ_DIM, PROJ_DIM));
    params.insert("proj.b2", Tensor::zeros(vec![PROJ_DIM]));
    params.insert("proj.w3", xavier(&mut rng, PROJ_DIM, PROJ_DIM));
    params.insert("proj.b3", Tensor::zeros(vec![PROJ_DIM]));
    params
}

impl DistillState {
    pub fn new(config: DistillConfig) -> Self {
        let student = init_student(&config);
        let teacher = student.clone();
        Self {
            config,
            student,
            teacher,
            center: vec![0.0; PROJ_DIM],
            optimizer: AdamW::new(config.weight_decay),
            step: 0,
            low_entropy_streak: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}

fn projection_node(
    g: &mut Graph<f32>,
    ids: &IndexMap<String, NodeId>,
    config: &DistillConfig,
    region: &RegionGrid,
) -> Result<NodeId, SslError> {
    let encoded = l2_forward_graph(g, ids, config.layers, config.heads, region)?;
    let h1m = g.matmul(encoded, ids["proj.w1"])?;
    let h1 = g.add_row_broadcast(h1m, ids["proj.b1"])?;
    let a1 = g.gelu(h1);
    let h2m = g.matmul(a1, ids["proj.w2"])?;
    let h2 = g.add_row_broadcast(h2m, ids["proj.b2"])?;
    let a2 = g.gelu(h2);
    let h3m = g.matmul(a2, ids["proj.w3"])?;
    Ok(g.add_row_broadcast(h3m, ids["proj.b3"])?)
}

/// Projection through a parameter set with no gradient tracking.
pub fn project(
    params: &ParamSet<f32>,
    config: &DistillConfig,
    region: &RegionGrid,
) -> Result<Vec<f32>, SslError> {
    let mut g = Graph::new();
    let ids = params.register(&mut g, |_| false);
    let node = projection_node(&mut g, &ids, config, region)?;
    Ok(g.value(node).data().to_vec())
}

fn softmax_centered(raw: &[f32], center: &[f32], temp: f64) -> Vec<f64> {
    let scaled: Vec<f64> =
        raw.iter().zip(center).map(|(&v, &c)| (v - c) as f64 / temp).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn entropy_nats(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// One self-distillation step over a batch of view pairs. Returns the loss
/// (mean cross-entropy over both view directions) and the mean teacher
/// output entropy. The teacher and center are updated in place and never
/// receive gradients.
pub fn dino_step(
    state: &mut DistillState,
    batch: &[ViewPair],
    lr: f64,
) -> Result<StepReport, SslError> {
    if batch.is_empty() {
        return Err(SslError::EmptyBatch);
    }
    let config = state.config;

    // teacher forward (old weights, no graph bookkeeping)
    let mut teacher_probs = Vec::with_capacity(batch.len() * 2);
    let mut teacher_raw_sum = vec![0.0f64; PROJ_DIM];
    for pair in batch {
        for view in [&pair.a, &pair.b] {
            let raw = project(&state.teacher, &config, view)?;
            for (acc, &v) in teacher_raw_sum.iter_mut().zip(&raw) {
                *acc += v as f64;
            }
            teacher_probs.push(softmax_centered(&raw, &state.center, config.teacher_temp));
        }
    }
    let mean_entropy =
        teacher_probs.iter().map(|p| entropy_nats(p)).sum::<f64>() / teacher_probs.len() as f64;

    // student forward/backward: teacher(view A) supervises student(view B)
    // and vice versa
    let mut g = Graph::new();
    let ids = state.student.register(&mut g, |_| true);
    let inv_temp = lit::<f32>(1.0 / config.student_temp);
    let mut terms = Vec::with_capacity(batch.len() * 2);
    for (k, pair) in batch.iter().enumerate() {
        let s_a = projection_node(&mut g, &ids, &config, &pair.a)?;
        let s_b = projection_node(&mut g, &ids, &config, &pair.b)?;
        let t_a: Vec<f32> = teacher_probs[2 * k].iter().map(|&p| p as f32).collect();
        let t_b: Vec<f32> = teacher_probs[2 * k + 1].iter().map(|&p| p as f32).collect();
        terms.push(g.soft_cross_entropy(s_b, &t_a, inv_temp)?);
        terms.push(g.soft_cross_entropy(s_a, &t_b, inv_temp)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let loss = g.scale(total, lit::<f32>(1.0 / terms.len() as f64));
    g.backward(loss)?;
    let loss_value = g.value(loss).data()[0] as f64;
    let grads = state.student.collect_grads(&g, &ids);
    state.optimizer.step(&mut state.student, &grads, lr as f32)?;

    // EMA teacher update from the new student
    let m_t = config.teacher_momentum as f32;
    for (name, t) in state.teacher.iter_mut() {
        let s = state.student.get(name).unwrap();
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = m_t * *tv + (1.0 - m_t) * sv;
        }
    }

    // center tracks the mean raw teacher projection
    let m_c = config.center_momentum;
    let n = (batch.len() * 2) as f64;
    for (c, &sum) in state.center.iter_mut().zip(&teacher_raw_sum) {
        *c = (m_c * *c as f64 + (1.0 - m_c) * (sum / n)) as f32;
    }

    state.step += 1;
    if mean_entropy < COLLAPSE_ENTROPY_NATS {
        state.low_entropy_streak += 1;
        if state.low_entropy_streak >= COLLAPSE_PATIENCE {
            return Err(SslError::CollapseDetected { step: state.step });
        }
    } else {
        state.low_entropy_streak = 0;
    }
    Ok(StepReport { loss: loss_value, teacher_entropy: mean_entropy })
}

/// Random contiguous sub-grid crop (≥ `min_crop` per side) plus up to 20%
/// token dropout; falls back to the full grid when a crop would be empty.
fn augment(region: &RegionGrid, rng: &mut ChaCha8Rng, min_crop: i32) -> RegionGrid {
    let span = REGION_SPAN;
    let cw = rng.gen_range(min_crop..=span);
    let ch = rng.gen_range(min_crop..=span);
    let cx = rng.gen_range(0..=span - cw);
    let cy = rng.gen_range(0..=span - ch);
    let dropout = rng.gen_range(0.0..0.2);
    let mut tokens = vec![None; (span * span) as usize];
    let mut kept = 0;
    for j in cy..cy + ch {
        for i in cx..cx + cw {
            let idx = (j * span + i) as usize;
            if region.tokens[idx].is_some() && !rng.gen_bool(dropout) {
                tokens[idx] = region.tokens[idx].clone();
                kept += 1;
            }
        }
    }
    if kept == 0 {
        return RegionGrid {
            region_x: region.region_x,
            region_y: region.region_y,
            tokens: region.tokens.clone(),
        };
    }
    RegionGrid { region_x: region.region_x, region_y: region.region_y, tokens }
}

pub fn make_view_pair(region: &RegionGrid, rng: &mut ChaCha8Rng) -> ViewPair {
    ViewPair { a: augment(region, rng, 8), b: augment(region, rng, 8) }
}

pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// training log CSV (`step,loss,teacher_entropy,lr`), optional
    pub log_path: Option<std::path::PathBuf>,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 8, base_lr: 5e-4, log_path: None }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    /// mean distillation loss per epoch
    pub epoch_losses: Vec<f64>,
}

/// Run self-distillation over the corpus and write the `l2.*` checkpoint
/// consumed by frozen/finetune model building.
pub fn pretrain_l2(
    corpus: &[RegionGrid],
    config: DistillConfig,
    options: &PretrainOptions,
    checkpoint_path: impl AsRef<Path>,
) -> Result<PretrainReport, SslError> {
    if corpus.len() < MIN_CORPUS {
        return Err(SslError::CorpusTooSmall { found: corpus.len() });
    }
    let mut state = DistillState::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x76696577);
    let steps_per_epoch = corpus.len().div_ceil(options.batch_size);
    let total_steps = steps_per_epoch * options.epochs;
    let schedule = LrSchedule::new(options.base_lr, total_steps / 10, total_steps);

    let mut log = match &options.log_path {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(f, "step,loss,teacher_entropy,lr")?;
            Some(f)
        }
        None => None,
    };

    let mut epoch_losses = Vec::with_capacity(options.epochs);
    let mut step = 0usize;
    for _epoch in 0..options.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(options.batch_size) {
            let batch: Vec<ViewPair> =
                chunk.iter().map(|&i| make_view_pair(&corpus[i], &mut rng)).collect();
            let lr = schedule.lr_at(step).expect("step within schedule");
            let report = dino_step(&mut state, &batch, lr)?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{step},{},{},{lr}", report.loss, report.teacher_entropy)?;
            }
            epoch_loss += report.loss;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }

    // persist only the encoder subtree; the projection head is scaffolding
    let mut out = ParamSet::new();
    for (name, value) in state.student.iter() {
        if name.starts_with("l2.") {
            out.insert(name.clone(), value.clone());
        }
    }
    save_params(checkpoint_path, &out)?;
    Ok(PretrainReport { epoch_losses })
}
