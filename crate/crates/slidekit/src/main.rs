//! Command-line front end. Exit codes: 0 success, 2 config error,
//! 3 data error, 4 numeric failure.

use clap::{Parser, Subcommand, ValueEnum};
use slidekit::features::{export_embeddings, FeatureBag, FeatureEntry, ToyEncoder, FEATURE_DIM};
use slidekit::harness::{
    cell_fingerprint, emit_report, prepare_dataset, run_cell, run_matrix, CellOutcome,
    ExperimentConfig, HarnessError, RunRecord, MATRIX_COLUMNS, MATRIX_STRUCTURES,
};
use slidekit::preprocess::{
    compute_tissue_mask, extract_patches, fit_or_reference, macenko_normalize, save_mask,
    save_patch_index, PatchLevel, StainMatrix,
};
use slidekit::pretrain::{pretrain_l2, DistillConfig, PretrainOptions};
use slidekit::slide::{
    make_arrangement_dataset, make_local_presence_dataset, open_pyramid, write_ppm,
    RegionSource, GENERATOR_STAIN_EOSIN, GENERATOR_STAIN_HEMATOXYLIN,
};
use slidekit::aggregators::{L2Mode, Structure};
use slidekit::evaluation::make_folds;
use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "slidekit", version, about = "Whole-slide classification workbench")]
struct Cli {
    /// experiment config file (JSON), used by train/matrix/report
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// overrides the config seed (or supplies one for dataset commands)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output directory or file, depending on the subcommand
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// reserved; execution is currently sequential
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    LocalPresence,
    Arrangement,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    L1,
    L2,
}

#[derive(Clone, Copy, ValueEnum)]
enum StructureArg {
    None,
    Medium,
    Most,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    RandomInit,
    Frozen,
    Finetune,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic slide dataset with a planted labeling rule
    Synth {
        #[arg(long, value_enum)]
        kind: DatasetKind,
        #[arg(long, default_value_t = 64)]
        slides: usize,
        #[arg(long, default_value_t = 1024)]
        width: usize,
        #[arg(long, default_value_t = 1024)]
        height: usize,
    },
    /// Compute the tissue mask and patch index for one slide
    Tile {
        #[arg(long)]
        slide: PathBuf,
        #[arg(long, value_enum, default_value = "l1")]
        level: LevelArg,
        #[arg(long, default_value_t = 0.40)]
        threshold: f64,
    },
    /// Stain-normalize a slide's level 0 into the reference space
    Normalize {
        #[arg(long)]
        slide: PathBuf,
    },
    /// Tile + encode a slide into an embedding file
    Embed {
        #[arg(long)]
        slide: PathBuf,
        #[arg(long, default_value_t = 0.40)]
        threshold: f64,
    },
    /// Self-distillation pre-training of the region encoder
    PretrainL2 {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 3)]
        heads: usize,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0.40)]
        threshold: f64,
    },
    /// Train and evaluate a single matrix cell
    Train {
        #[arg(long, value_enum)]
        structure: StructureArg,
        #[arg(long, value_enum)]
        l2_mode: Option<ModeArg>,
        #[arg(long)]
        l2_checkpoint: Option<PathBuf>,
    },
    /// Cross-validated metric for an existing cell record
    Eval {
        /// fingerprint of the cell to summarize (defaults to all on disk)
        #[arg(long)]
        fingerprint: Option<String>,
    },
    /// Run the full 3x3 structure-by-weight-source grid
    Matrix,
    /// Re-emit report files from completed cell records
    Report,
}

fn structure_of(arg: StructureArg) -> Structure {
    match arg {
        StructureArg::None => Structure::None,
        StructureArg::Medium => Structure::Medium,
        StructureArg::Most => Structure::Most,
    }
}

fn mode_of(arg: ModeArg) -> L2Mode {
    match arg {
        ModeArg::RandomInit => L2Mode::RandomInit,
        ModeArg::Frozen => L2Mode::Frozen,
        ModeArg::Finetune => L2Mode::Finetune,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| HarnessError::Config("--config <file> is required".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn require_out(cli: &Cli) -> Result<PathBuf, HarnessError> {
    cli.out
        .clone()
        .ok_or_else(|| HarnessError::Config("--out <path> is required".into()))
}

/// Reference stain space for normalization: the generator's H&E directions
/// with unit 99th-percentile concentrations.
fn reference_stains() -> StainMatrix {
    StainMatrix {
        vectors: [GENERATOR_STAIN_HEMATOXYLIN, GENERATOR_STAIN_EOSIN],
        max_concentrations: [1.0, 1.0],
    }
}

fn stored_outcomes(config: &ExperimentConfig) -> Result<Vec<CellOutcome>, HarnessError> {
    let mut outcomes = Vec::new();
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
            let fp = cell_fingerprint(config, structure, l2_mode);
            let path = config.output_dir.join(format!("cell_{fp}.json"));
            let text = std::fs::read_to_string(&path).map_err(|_| {
                HarnessError::Data(format!("missing cell record {}", path.display()))
            })?;
            let record: RunRecord = serde_json::from_str(&text)
                .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
            outcomes.push(CellOutcome::Run(record));
        }
    }
    Ok(outcomes)
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    if cli.threads == 0 {
        return Err(HarnessError::Config("--threads must be >= 1".into()));
    }
    match &cli.command {
        Command::Synth { kind, slides, width, height } => {
            let out = require_out(cli)?;
            let seed = cli.seed.unwrap_or(0);
            let generated = match kind {
                DatasetKind::LocalPresence => {
                    make_local_presence_dataset(&out, *slides, *width, *height, seed)?
                }
                DatasetKind::Arrangement => {
                    make_arrangement_dataset(&out, *slides, *width, *height, seed)?
                }
            };
            println!("wrote {} slides under {}", generated.manifest.len(), out.display());
        }
        Command::Tile { slide, level, threshold } => {
            let out = require_out(cli)?;
            std::fs::create_dir_all(&out)?;
            let pyramid = open_pyramid(slide)?;
            let mask = compute_tissue_mask(&pyramid)?;
            let level = match level {
                LevelArg::L1 => PatchLevel::L1,
                LevelArg::L2 => PatchLevel::L2,
            };
            let patches =
                extract_patches(&mask, pyramid.width(), pyramid.height(), level, *threshold)?;
            save_mask(out.join("mask.pgm"), &mask)?;
            save_patch_index(out.join("patches.csv"), &patches)?;
            println!("{} patches ({:.1}% tissue)", patches.len(), mask.coverage() * 100.0);
        }
        Command::Normalize { slide } => {
            let out = require_out(cli)?;
            let pyramid = open_pyramid(slide)?;
            let level0 = pyramid.read_region(
                0,
                0,
                0,
                pyramid.width(),
                pyramid.height(),
            )?;
            let pixels: Vec<[u8; 3]> = level0
                .data
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            let reference = reference_stains();
            let fitted = fit_or_reference(&pixels, &reference)?;
            let normalized = macenko_normalize(&level0, &fitted, &reference);
            write_ppm(&out, &normalized)?;
            println!("wrote {}", out.display());
        }
        Command::Embed { slide, threshold } => {
            let out = require_out(cli)?;
            let seed = cli.seed.unwrap_or(0);
            let pyramid = open_pyramid(slide)?;
            let mask = compute_tissue_mask(&pyramid)?;
            let patches = extract_patches(
                &mask,
                pyramid.width(),
                pyramid.height(),
                PatchLevel::L1,
                *threshold,
            )?;
            let encoder = ToyEncoder::new(seed);
            let mut entries = Vec::with_capacity(patches.len());
            for p in &patches {
                let img = pyramid.read_region(0, p.x as i64, p.y as i64, p.size, p.size)?;
                entries.push(FeatureEntry {
                    grid_x: (p.x / p.size) as i32,
                    grid_y: (p.y / p.size) as i32,
                    vector: encoder.encode(&img)?,
                });
            }
            let slide_id = out
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "slide".into());
            let bag = FeatureBag { slide_id, dim: FEATURE_DIM, entries };
            bag.validate()?;
            export_embeddings(&bag, &out)?;
            println!("wrote {} embeddings to {}", bag.entries.len(), out.display());
        }
        Command::PretrainL2 { dataset, layers, heads, epochs, threshold } => {
            let out = require_out(cli)?;
            let seed = cli.seed.unwrap_or(0);
            let (slides, _) = prepare_dataset(dataset, *threshold, seed ^ 0x656e63)?;
            let mut corpus = Vec::new();
            for s in &slides {
                corpus.extend(slidekit::features::group_into_regions(&s.bag, 1));
            }
            let options = PretrainOptions {
                epochs: *epochs,
                log_path: Some(out.with_extension("log.csv")),
                ..PretrainOptions::default()
            };
            let report =
                pretrain_l2(&corpus, DistillConfig::new(*layers, *heads, seed), &options, &out)?;
            println!(
                "pre-trained {layers}x{heads} encoder on {} regions; loss {:.4} -> {:.4}",
                corpus.len(),
                report.epoch_losses.first().unwrap_or(&f64::NAN),
                report.epoch_losses.last().unwrap_or(&f64::NAN),
            );
        }
        Command::Train { structure, l2_mode, l2_checkpoint } => {
            let config = load_config(cli)?;
            std::fs::create_dir_all(&config.output_dir)?;
            let structure = structure_of(*structure);
            let l2_mode = l2_mode.map(mode_of);
            let (slides, labels) =
                prepare_dataset(&config.dataset, config.l1_threshold, config.seed ^ 0x656e63)?;
            let entries: Vec<(String, usize)> =
                slides.iter().map(|s| (s.slide_id.clone(), s.class)).collect();
            let mut split = make_folds(&entries, config.folds, config.seed, true)?;
            if config.train_fraction < 1.0 {
                let classes: HashMap<String, usize> = entries.iter().cloned().collect();
                split = slidekit::evaluation::subsample_train(
                    &split,
                    &classes,
                    config.train_fraction,
                )?;
            }
            let record = run_cell(
                &config,
                structure,
                l2_mode,
                &slides,
                labels.len(),
                &split,
                l2_checkpoint.as_deref(),
            )?;
            let path = config.output_dir.join(format!("cell_{}.json", record.fingerprint));
            std::fs::write(&path, serde_json::to_string_pretty(&record)?)
                .map_err(HarnessError::from)?;
            println!(
                "{}: mean {:.4} +/- {:.4} ({} folds) -> {}",
                record.metric,
                record.mean(),
                record.std(),
                record.per_fold.len(),
                path.display(),
            );
        }
        Command::Eval { fingerprint } => {
            let config = load_config(cli)?;
            let outcomes = stored_outcomes(&config)?;
            for outcome in &outcomes {
                if let CellOutcome::Run(r) = outcome {
                    if fingerprint.as_ref().is_some_and(|fp| *fp != r.fingerprint) {
                        continue;
                    }
                    println!(
                        "{} {:?}/{:?}: {:.4} +/- {:.4}",
                        r.metric,
                        r.structure,
                        r.l2_mode,
                        r.mean(),
                        r.std()
                    );
                }
            }
        }
        Command::Matrix => {
            let config = load_config(cli)?;
            let outcomes = run_matrix(&config)?;
            emit_report(&outcomes, &config)?;
            println!(
                "{}",
                std::fs::read_to_string(config.output_dir.join("matrix.txt"))
                    .map_err(HarnessError::from)?
            );
        }
        Command::Report => {
            let config = load_config(cli)?;
            let outcomes = stored_outcomes(&config)?;
            emit_report(&outcomes, &config)?;
            println!("reports written to {}", config.output_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
