//! Workbench for hierarchical whole-slide-image classification experiments
//! on synthetic slides with planted ground truth: preprocessing (tissue
//! masking, stain normalization, two-level tiling), feature bagging, three
//! aggregation architectures, self-distillation pre-training for the
//! region encoder, metrics, and an experiment-matrix harness.

pub mod aggregators;
pub mod evaluation;
pub mod features;
pub mod harness;
pub mod preprocess;
pub mod pretrain;
pub mod slide;
pub mod tensor;
