//! Experiment orchestration: end-to-end slide -> feature-bag preparation,
//! per-cell training/evaluation, the 3x3 structure-by-weight-source matrix
//! with resumable fingerprint-named cells, and report emission (CSV grid,
//! aligned text table, per-epoch loss curves as SVG).

use crate::aggregators::{
    build_model, AggregatorError, L2Mode, Model, ModelConfig, Structure,
};
use crate::evaluation::{
    binary_auc, concordance_index, macro_auc, make_folds, subsample_train, EvalError, FoldSplit,
};
use crate::features::{FeatureBag, FeatureEntry, FeaturesError, ToyEncoder};
use crate::preprocess::{
    compute_tissue_mask, extract_patches, PatchLevel, PreprocessError,
};
use crate::pretrain::{pretrain_l2, DistillConfig, PretrainOptions, SslError};
use crate::slide::{load_manifest, open_pyramid, validate_manifest, RegionSource, SlideError};
use crate::tensor::{AdamW, TensorError};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl HarnessError {
    /// Process exit code: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::Numeric(_) => 4,
        }
    }
}

impl From<SlideError> for HarnessError {
    fn from(e: SlideError) -> Self {
        match e {
            SlideError::SpecInvalid(_) | SlideError::BadManifest(_) => {
                HarnessError::Config(e.to_string())
            }
            other => HarnessError::Data(other.to_string()),
        }
    }
}

impl From<PreprocessError> for HarnessError {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::BadThreshold(_) => HarnessError::Config(e.to_string()),
            other => HarnessError::Data(other.to_string()),
        }
    }
}

impl From<FeaturesError> for HarnessError {
    fn from(e: FeaturesError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<AggregatorError> for HarnessError {
    fn from(e: AggregatorError) -> Self {
        match e {
            AggregatorError::InvalidConfig(_) | AggregatorError::MissingCheckpoint(_) => {
                HarnessError::Config(e.to_string())
            }
            other => HarnessError::Data(other.to_string()),
        }
    }
}

impl From<SslError> for HarnessError {
    fn from(e: SslError) -> Self {
        match e {
            SslError::CollapseDetected { .. } => HarnessError::Numeric(e.to_string()),
            other => HarnessError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for HarnessError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::BadFraction(_) | EvalError::TooFewSlides { .. } => {
                HarnessError::Config(e.to_string())
            }
            other => HarnessError::Data(other.to_string()),
        }
    }
}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Data(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Config(format!("json: {e}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Survival,
}

fn default_epochs() -> usize {
    20
}
fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    1
}
fn default_folds() -> usize {
    10
}
fn default_fraction() -> f64 {
    1.0
}
fn default_threshold() -> f64 {
    0.40
}
fn default_pretrain_epochs() -> usize {
    5
}

/// One experiment's worth of knobs. `output_dir` is excluded from the
/// fingerprint so moving results does not invalidate them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub task: Task,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    /// foreground fraction for 256 px patch inclusion; 0.40 tolerates the
    /// near-white gaps inside textured motifs
    #[serde(default = "default_threshold")]
    pub l1_threshold: f64,
    /// self-distillation epochs when the matrix has to produce its own
    /// region-encoder checkpoints
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.epochs == 0 {
            return Err(HarnessError::Config("epochs must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be > 0".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(HarnessError::Config(format!("bad learning rate {}", self.lr)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(HarnessError::Config(format!(
                "train_fraction must be in (0,1], got {}",
                self.train_fraction
            )));
        }
        if self.folds < 2 {
            return Err(HarnessError::Config("need >= 2 folds".into()));
        }
        Ok(())
    }
}

/// Everything the fingerprint hashes: the config minus the output dir,
/// plus the identity of the matrix cell.
#[derive(Serialize)]
struct FingerprintInput<'a> {
    dataset: &'a Path,
    task: Task,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    folds: usize,
    train_fraction: f64,
    l1_threshold: f64,
    pretrain_epochs: usize,
    structure: Structure,
    l2_mode: Option<L2Mode>,
}

pub fn cell_fingerprint(
    config: &ExperimentConfig,
    structure: Structure,
    l2_mode: Option<L2Mode>,
) -> String {
    let input = FingerprintInput {
        dataset: &config.dataset,
        task: config.task,
        epochs: config.epochs,
        lr: config.lr,
        batch_size: config.batch_size,
        seed: config.seed,
        folds: config.folds,
        train_fraction: config.train_fraction,
        l1_threshold: config.l1_threshold,
        pretrain_epochs: config.pretrain_epochs,
        structure,
        l2_mode,
    };
    let canonical = serde_json::to_string(&input).expect("fingerprint input serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

/// One slide, fully preprocessed into a level-1 feature bag.
pub struct SlideData {
    pub slide_id: String,
    pub class: usize,
    pub bag: FeatureBag,
    pub survival_time: Option<f64>,
    pub event_observed: Option<bool>,
}

/// Tile every manifest slide, encode the retained patches, and map labels
/// to class indices (sorted label order). The whole downstream pipeline
/// runs off the returned bags.
pub fn prepare_dataset(
    dataset: &Path,
    l1_threshold: f64,
    encoder_seed: u64,
) -> Result<(Vec<SlideData>, Vec<String>), HarnessError> {
    let manifest = load_manifest(dataset.join("manifest.json"))?;
    validate_manifest(&manifest)?;
    if manifest.is_empty() {
        return Err(HarnessError::Data("manifest lists no slides".into()));
    }
    let mut labels: Vec<String> = manifest.iter().map(|e| e.label.clone()).collect();
    labels.sort();
    labels.dedup();
    let class_of: HashMap<&String, usize> =
        labels.iter().enumerate().map(|(i, l)| (l, i)).collect();

    let encoder = ToyEncoder::new(encoder_seed);
    let mut slides = Vec::with_capacity(manifest.len());
    for entry in &manifest {
        let slide = open_pyramid(dataset.join(&entry.path))?;
        let mask = compute_tissue_mask(&slide)?;
        let patches =
            extract_patches(&mask, slide.width(), slide.height(), PatchLevel::L1, l1_threshold)?;
        if patches.is_empty() {
            return Err(HarnessError::Data(format!(
                "slide {} has no foreground patches at threshold {l1_threshold}",
                entry.slide_id
            )));
        }
        let mut entries = Vec::with_capacity(patches.len());
        for p in &patches {
            let img = slide.read_region(0, p.x as i64, p.y as i64, p.size, p.size)?;
            entries.push(FeatureEntry {
                grid_x: (p.x / p.size) as i32,
                grid_y: (p.y / p.size) as i32,
                vector: encoder.encode(&img)?,
            });
        }
        let bag = FeatureBag {
            slide_id: entry.slide_id.clone(),
            dim: crate::features::FEATURE_DIM,
            entries,
        };
        bag.validate()?;
        slides.push(SlideData {
            slide_id: entry.slide_id.clone(),
            class: class_of[&entry.label],
            bag,
            survival_time: entry.survival_time,
            event_observed: entry.event_observed,
        });
    }
    Ok((slides, labels))
}

/// Outcome of one matrix cell over all folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub fingerprint: String,
    pub structure: Structure,
    pub l2_mode: Option<L2Mode>,
    pub metric: String,
    pub per_fold: Vec<f64>,
    /// mean training loss per epoch, averaged over folds
    pub epoch_losses: Vec<f64>,
    pub seed: u64,
    pub wall_secs: f64,
}

impl RunRecord {
    pub fn mean(&self) -> f64 {
        self.per_fold.iter().sum::<f64>() / self.per_fold.len() as f64
    }

    pub fn std(&self) -> f64 {
        if self.per_fold.len() < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.per_fold.iter().map(|v| (v - m).powi(2)).sum::<f64>()
            / (self.per_fold.len() - 1) as f64)
            .sqrt()
    }
}

fn merge_grads(
    acc: &mut IndexMap<String, Vec<f32>>,
    grads: IndexMap<String, Vec<f32>>,
) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

fn check_finite(loss: f32, context: &str) -> Result<(), HarnessError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Numeric(format!("non-finite loss in {context}")))
    }
}

/// Train one model on one fold's training slides; returns per-epoch mean
/// losses and the trained model.
fn train_fold(
    model: &mut Model,
    train: &[&SlideData],
    task: Task,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, HarnessError> {
    let mut optimizer = AdamW::new(0.0); // plain Adam
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut total = 0.0f64;
        let mut steps = 0usize;
        match task {
            Task::Classification => {
                for chunk in order.chunks(batch_size) {
                    let mut grads = IndexMap::new();
                    let mut batch_loss = 0.0f64;
                    for &i in chunk {
                        let (loss, _, g) = model.loss_and_grads(&train[i].bag, train[i].class)?;
                        check_finite(loss, &format!("epoch {epoch}"))?;
                        batch_loss += loss as f64;
                        merge_grads(&mut grads, g);
                    }
                    let inv = 1.0 / chunk.len() as f32;
                    for g in grads.values_mut() {
                        g.iter_mut().for_each(|v| *v *= inv);
                    }
                    optimizer.step(&mut model.params, &grads, lr as f32)?;
                    total += batch_loss / chunk.len() as f64;
                    steps += 1;
                }
            }
            Task::Survival => {
                // Cox partial likelihood needs a risk set, so the whole
                // training fold forms one batch regardless of batch_size
                let bags: Vec<&FeatureBag> = order.iter().map(|&i| &train[i].bag).collect();
                let times: Vec<f64> = order
                    .iter()
                    .map(|&i| {
                        train[i].survival_time.ok_or_else(|| {
                            HarnessError::Data(format!(
                                "slide {} lacks survival_time",
                                train[i].slide_id
                            ))
                        })
                    })
                    .collect::<Result<_, _>>()?;
                let events: Vec<bool> =
                    order.iter().map(|&i| train[i].event_observed.unwrap_or(true)).collect();
                let (loss, grads) = model.survival_loss_and_grads(&bags, &times, &events)?;
                check_finite(loss, &format!("epoch {epoch}"))?;
                optimizer.step(&mut model.params, &grads, lr as f32)?;
                total += loss as f64;
                steps += 1;
            }
        }
        epoch_losses.push(total / steps as f64);
    }
    Ok(epoch_losses)
}

fn eval_fold(
    model: &Model,
    val: &[&SlideData],
    task: Task,
    n_classes: usize,
) -> Result<f64, HarnessError> {
    match task {
        Task::Classification => {
            if n_classes == 2 {
                let mut scores = Vec::with_capacity(val.len());
                let mut labels = Vec::with_capacity(val.len());
                for s in val {
                    let pred = model.predict(&s.bag)?;
                    scores.push(pred.probabilities[1] as f64);
                    labels.push(s.class as u8);
                }
                Ok(binary_auc(&scores, &labels)?)
            } else {
                let mut probs = Vec::with_capacity(val.len());
                let mut labels = Vec::with_capacity(val.len());
                for s in val {
                    let pred = model.predict(&s.bag)?;
                    probs.push(pred.probabilities.iter().map(|&p| p as f64).collect());
                    labels.push(s.class);
                }
                Ok(macro_auc(&probs, &labels)?)
            }
        }
        Task::Survival => {
            let mut risks = Vec::with_capacity(val.len());
            let mut times = Vec::with_capacity(val.len());
            let mut events = Vec::with_capacity(val.len());
            for s in val {
                risks.push(model.survival_predict(&s.bag)?.risk as f64);
                times.push(s.survival_time.ok_or_else(|| {
                    HarnessError::Data(format!("slide {} lacks survival_time", s.slide_id))
                })?);
                events.push(s.event_observed.unwrap_or(true));
            }
            Ok(concordance_index(&risks, &times, &events)?)
        }
    }
}

/// Cross-validated training of one (structure, l2_mode) cell.
pub fn run_cell(
    config: &ExperimentConfig,
    structure: Structure,
    l2_mode: Option<L2Mode>,
    slides: &[SlideData],
    n_classes: usize,
    split: &FoldSplit,
    l2_checkpoint: Option<&Path>,
) -> Result<RunRecord, HarnessError> {
    let start = Instant::now();
    let fingerprint = cell_fingerprint(config, structure, l2_mode);
    let by_id: HashMap<&str, &SlideData> =
        slides.iter().map(|s| (s.slide_id.as_str(), s)).collect();
    let lookup = |ids: &[String]| -> Result<Vec<&SlideData>, HarnessError> {
        ids.iter()
            .map(|id| {
                by_id.get(id.as_str()).copied().ok_or_else(|| {
                    HarnessError::Data(format!("fold references unknown slide {id}"))
                })
            })
            .collect()
    };

    let mut per_fold = Vec::with_capacity(split.folds.len());
    let mut loss_sums = vec![0.0f64; config.epochs];
    for (fold_idx, fold) in split.folds.iter().enumerate() {
        let train = lookup(&fold.train)?;
        let val = lookup(&fold.val)?;
        let model_config = ModelConfig {
            structure,
            l2_mode,
            classes: n_classes,
            seed: config.seed ^ (fold_idx as u64).wrapping_mul(0x9e3779b97f4a7c15),
        };
        let mut model = build_model(model_config, l2_checkpoint)?;
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ 0x7368756666 ^ (fold_idx as u64) << 8,
        );
        let losses = train_fold(
            &mut model,
            &train,
            config.task,
            config.epochs,
            config.lr,
            config.batch_size,
            &mut rng,
        )?;
        for (sum, l) in loss_sums.iter_mut().zip(&losses) {
            *sum += l;
        }
        let metric = eval_fold(&model, &val, config.task, n_classes)?;
        if !metric.is_finite() {
            return Err(HarnessError::Numeric(format!("non-finite metric in fold {fold_idx}")));
        }
        per_fold.push(metric);
    }
    let k = split.folds.len() as f64;
    Ok(RunRecord {
        fingerprint,
        structure,
        l2_mode,
        metric: match (config.task, n_classes) {
            (Task::Survival, _) => "c_index".into(),
            (Task::Classification, 2) => "auc".into(),
            (Task::Classification, _) => "macro_auc".into(),
        },
        per_fold,
        epoch_losses: loss_sums.into_iter().map(|s| s / k).collect(),
        seed: config.seed,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// A matrix position: either a populated record or an explicit N/A
/// (no-structure rows cannot take a region-encoder weight source).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CellOutcome {
    Run(RunRecord),
    NotApplicable { structure: Structure, column: L2Mode },
}

pub const MATRIX_STRUCTURES: [Structure; 3] =
    [Structure::None, Structure::Medium, Structure::Most];
pub const MATRIX_COLUMNS: [L2Mode; 3] = [L2Mode::RandomInit, L2Mode::Frozen, L2Mode::Finetune];

fn column_label(mode: L2Mode) -> &'static str {
    match mode {
        L2Mode::RandomInit => "random_init",
        L2Mode::Frozen => "frozen",
        L2Mode::Finetune => "finetune",
    }
}

fn structure_label(s: Structure) -> &'static str {
    match s {
        Structure::None => "none",
        Structure::Medium => "medium",
        Structure::Most => "most",
    }
}

/// Pre-train (or reuse) a region-encoder checkpoint of the given shape for
/// this config. The file name carries the fingerprint of everything that
/// influences its contents, so stale checkpoints are never picked up.
pub fn ensure_l2_checkpoint(
    config: &ExperimentConfig,
    layers: usize,
    heads: usize,
    slides: &[SlideData],
) -> Result<PathBuf, HarnessError> {
    #[derive(Serialize)]
    struct CkptInput<'a> {
        dataset: &'a Path,
        seed: u64,
        l1_threshold: f64,
        pretrain_epochs: usize,
        layers: usize,
        heads: usize,
    }
    let canonical = serde_json::to_string(&CkptInput {
        dataset: &config.dataset,
        seed: config.seed,
        l1_threshold: config.l1_threshold,
        pretrain_epochs: config.pretrain_epochs,
        layers,
        heads,
    })?;
    let digest = Sha256::digest(canonical.as_bytes());
    let tag: String = digest[..8].iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    });
    let path = config.output_dir.join(format!("l2_{layers}x{heads}_{tag}.ckpt"));
    if path.exists() {
        return Ok(path);
    }
    let mut corpus = Vec::new();
    for slide in slides {
        corpus.extend(crate::features::group_into_regions(&slide.bag, 1));
    }
    let distill = DistillConfig::new(layers, heads, config.seed ^ 0x7072657472);
    let options = PretrainOptions {
        epochs: config.pretrain_epochs,
        ..PretrainOptions::default()
    };
    pretrain_l2(&corpus, distill, &options, &path)?;
    Ok(path)
}

/// Execute the full 3x3 grid. Finished cells are persisted as
/// `cell_<fingerprint>.json` and reloaded instead of recomputed, which
/// makes interrupted runs resumable at cell granularity.
pub fn run_matrix(config: &ExperimentConfig) -> Result<Vec<CellOutcome>, HarnessError> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;
    let (slides, labels) =
        prepare_dataset(&config.dataset, config.l1_threshold, config.seed ^ 0x656e63)?;
    let entries: Vec<(String, usize)> =
        slides.iter().map(|s| (s.slide_id.clone(), s.class)).collect();
    let mut split = make_folds(&entries, config.folds, config.seed, true)?;
    if config.train_fraction < 1.0 {
        let classes: HashMap<String, usize> = entries.iter().cloned().collect();
        split = subsample_train(&split, &classes, config.train_fraction)?;
    }
    std::fs::write(
        config.output_dir.join("folds.json"),
        serde_json::to_string_pretty(&split)?,
    )?;

    let mut outcomes = Vec::with_capacity(9);
    for structure in MATRIX_STRUCTURES {
        for column in MATRIX_COLUMNS {
            let l2_mode = match structure {
                Structure::None if column == L2Mode::RandomInit => None,
                Structure::None => {
                    outcomes.push(CellOutcome::NotApplicable { structure, column });
                    continue;
                }
                _ => Some(column),
            };
            let fingerprint = cell_fingerprint(config, structure, l2_mode);
            let cell_path = config.output_dir.join(format!("cell_{fingerprint}.json"));
            if let Ok(text) = std::fs::read_to_string(&cell_path) {
                if let Ok(record) = serde_json::from_str::<RunRecord>(&text) {
                    outcomes.push(CellOutcome::Run(record));
                    continue;
                }
            }
            let checkpoint = match l2_mode {
                Some(L2Mode::Frozen | L2Mode::Finetune) => {
                    let (layers, heads) = match structure {
                        Structure::Medium => (2, 3),
                        Structure::Most => (6, 6),
                        Structure::None => unreachable!(),
                    };
                    Some(ensure_l2_checkpoint(config, layers, heads, &slides)?)
                }
                _ => None,
            };
            let record = run_cell(
                config,
                structure,
                l2_mode,
                &slides,
                labels.len(),
                &split,
                checkpoint.as_deref(),
            )?;
            std::fs::write(&cell_path, serde_json::to_string_pretty(&record)?)?;
            outcomes.push(CellOutcome::Run(record));
        }
    }
    Ok(outcomes)
}

// shortest-roundtrip formatting: parsing the CSV back recovers the exact
// value, so mean/std stay recomputable from the per-fold columns
fn fmt_float(v: f64) -> String {
    format!("{v}")
}

/// Write the report set: `matrix.csv` (per-fold values plus mean/std),
/// `matrix.txt` (aligned grid shaped like the 3x3 table), `metrics.csv`
/// (`config,fold,metric,value` long form), and `loss_curves.svg`.
/// All output is fully deterministic for a given set of records.
pub fn emit_report(
    outcomes: &[CellOutcome],
    config: &ExperimentConfig,
) -> Result<(), HarnessError> {
    if outcomes.is_empty() {
        return Err(HarnessError::Config("no records to report".into()));
    }
    std::fs::create_dir_all(&config.output_dir)?;

    // per-cell CSV
    let mut csv = String::from("structure,l2_mode,metric");
    for i in 0..config.folds {
        write!(csv, ",fold_{i}").unwrap();
    }
    csv.push_str(",mean,std\n");
    for outcome in outcomes {
        match outcome {
            CellOutcome::Run(r) => {
                write!(
                    csv,
                    "{},{},{}",
                    structure_label(r.structure),
                    r.l2_mode.map_or("-", column_label),
                    r.metric
                )
                .unwrap();
                for v in &r.per_fold {
                    write!(csv, ",{}", fmt_float(*v)).unwrap();
                }
                writeln!(csv, ",{},{}", fmt_float(r.mean()), fmt_float(r.std())).unwrap();
            }
            CellOutcome::NotApplicable { structure, column } => {
                write!(csv, "{},{},NA", structure_label(*structure), column_label(*column))
                    .unwrap();
                for _ in 0..config.folds + 2 {
                    csv.push_str(",NA");
                }
                csv.push('\n');
            }
        }
    }
    std::fs::write(config.output_dir.join("matrix.csv"), csv)?;

    // long-form metric rows for downstream tooling
    let mut metrics = String::from("config,fold,metric,value\n");
    for outcome in outcomes {
        if let CellOutcome::Run(r) = outcome {
            for (fold, v) in r.per_fold.iter().enumerate() {
                writeln!(metrics, "{},{fold},{},{v}", r.fingerprint, r.metric).unwrap();
            }
        }
    }
    std::fs::write(config.output_dir.join("metrics.csv"), metrics)?;

    // aligned text grid in table shape
    let mut cells: HashMap<(Structure, L2Mode), String> = HashMap::new();
    for outcome in outcomes {
        match outcome {
            CellOutcome::Run(r) => {
                let column = r.l2_mode.unwrap_or(L2Mode::RandomInit);
                cells.insert(
                    (r.structure, column),
                    format!("{:.3} +/- {:.3}", r.mean(), r.std()),
                );
            }
            CellOutcome::NotApplicable { structure, column } => {
                cells.insert((*structure, *column), "N/A".into());
            }
        }
    }
    let mut txt = format!("{:<10}", "structure");
    for column in MATRIX_COLUMNS {
        write!(txt, " {:<16}", column_label(column)).unwrap();
    }
    txt.push('\n');
    for structure in MATRIX_STRUCTURES {
        write!(txt, "{:<10}", structure_label(structure)).unwrap();
        for column in MATRIX_COLUMNS {
            let text = cells
                .get(&(structure, column))
                .map(String::as_str)
                .unwrap_or("-");
            write!(txt, " {text:<16}").unwrap();
        }
        txt.push('\n');
    }
    std::fs::write(config.output_dir.join("matrix.txt"), txt)?;

    std::fs::write(
        config.output_dir.join("loss_curves.svg"),
        loss_curves_svg(outcomes, config.epochs),
    )?;
    Ok(())
}

const SVG_PALETTE: [&str; 7] =
    ["#1b6ca8", "#d1495b", "#2e8540", "#8f5fb6", "#c77d1e", "#3aa6a6", "#6b6b6b"];

/// One polyline per populated cell; x spans the epoch range, y spans the
/// observed loss range.
fn loss_curves_svg(outcomes: &[CellOutcome], epochs: usize) -> String {
    let (w, h, ml, mr, mt, mb) = (720.0, 420.0, 60.0, 180.0, 20.0, 45.0);
    let runs: Vec<&RunRecord> = outcomes
        .iter()
        .filter_map(|o| match o {
            CellOutcome::Run(r) => Some(r),
            _ => None,
        })
        .collect();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in &runs {
        for &v in &r.epoch_losses {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let x_of = |epoch: usize| {
        ml + (epoch as f64) / ((epochs.max(2) - 1) as f64) * (w - ml - mr)
    };
    let y_of = |v: f64| h - mb - (v - lo) / (hi - lo) * (h - mt - mb);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    // axes
    write!(
        svg,
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">epoch</text>\n\
         <text x=\"14\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 14 {})\" \
         text-anchor=\"middle\">train loss</text>\n",
        h - mb,
        w - mr,
        h - mb,
        h - mb,
        (ml + w - mr) / 2.0,
        h - 12.0,
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0,
    )
    .unwrap();
    write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"10\">{:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"10\">{:.3}</text>\n\
         <text x=\"{ml}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">1</text>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{epochs}</text>\n",
        8.0,
        h - mb,
        lo,
        8.0,
        mt + 10.0,
        hi,
        h - mb + 14.0,
        w - mr,
        h - mb + 14.0,
    )
    .unwrap();

    for (i, r) in runs.iter().enumerate() {
        let color = SVG_PALETTE[i % SVG_PALETTE.len()];
        let points: Vec<String> = r
            .epoch_losses
            .iter()
            .enumerate()
            .map(|(e, &v)| format!("{:.2},{:.2}", x_of(e), y_of(v)))
            .collect();
        write!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        )
        .unwrap();
        let label = format!(
            "{}/{}",
            structure_label(r.structure),
            r.l2_mode.map_or("-", column_label)
        );
        let ly = mt + 14.0 * (i as f64 + 1.0);
        write!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"11\">{label}</text>\n",
            w - mr + 10.0,
            ly - 4.0,
            w - mr + 28.0,
            ly - 4.0,
            w - mr + 34.0,
            ly,
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
