//! Synthetic H&E-like slide generator with planted, machine-readable truth.
//!
//! Tissue is rendered as a two-chromophore mixture in optical-density space
//! (so stain-estimation code can recover the generator's vectors), motifs as
//! distinctive concentration textures, background as pure white.

use super::pyramid::write_pyramid;
use super::{RgbImage, SlideError, SlideManifestEntry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Unit-norm optical-density direction used to render the haematoxylin
/// channel (Ruifrok-style; larger blue component than eosin).
pub const GENERATOR_STAIN_HEMATOXYLIN: [f64; 3] = [0.6500286, 0.704031, 0.2860126];
/// Unit-norm optical-density direction used to render the eosin channel.
pub const GENERATOR_STAIN_EOSIN: [f64; 3] = [0.07, 0.99, 0.11];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MotifKind {
    Dots,
    Stripes,
    Rings,
    Checker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifPlacement {
    pub kind: MotifKind,
    pub center: (f64, f64),
    /// half-width of the square texture patch, px
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelRule {
    LocalPresence,
    SpatialArrangement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSlideSpec {
    pub width: usize,
    pub height: usize,
    pub tissue: Vec<Polygon>,
    pub motifs: Vec<MotifPlacement>,
    pub rule: LabelRule,
    pub label: String,
    pub stain_multiplier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthBox {
    pub kind: MotifKind,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Ground-truth sidecar written as `truth.json` next to `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideTruth {
    pub width: usize,
    pub height: usize,
    pub tissue: Vec<Polygon>,
    pub motif_boxes: Vec<TruthBox>,
    pub label: String,
    pub rule: LabelRule,
}

pub const TRUTH_FILE: &str = "truth.json";

pub fn load_truth(dir: impl AsRef<Path>) -> Result<SlideTruth, SlideError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.as_ref().join(TRUTH_FILE))?)?)
}

fn point_in_polygon(p: (f64, f64), poly: &Polygon) -> bool {
    let pts = &poly.points;
    let mut inside = false;
    let n = pts.len();
    for i in 0..n {
        let (x1, y1) = pts[i];
        let (x2, y2) = pts[(i + 1) % n];
        if (y1 <= p.1) != (y2 <= p.1) {
            let x = x1 + (p.1 - y1) * (x2 - x1) / (y2 - y1);
            if p.0 < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Even-odd scanline rasterization sampled at cell centers. Returns a
/// row-major 0/1 grid of `ceil(width/downsample) × ceil(height/downsample)`.
pub fn rasterize_polygons(
    polys: &[Polygon],
    width: usize,
    height: usize,
    downsample: usize,
) -> Vec<u8> {
    let gw = width.div_ceil(downsample);
    let gh = height.div_ceil(downsample);
    let mut grid = vec![0u8; gw * gh];
    for poly in polys {
        if poly.points.len() < 3 {
            continue;
        }
        for row in 0..gh {
            let y = (row * downsample) as f64 + downsample as f64 / 2.0;
            let mut xs: Vec<f64> = Vec::new();
            let n = poly.points.len();
            for i in 0..n {
                let (x1, y1) = poly.points[i];
                let (x2, y2) = poly.points[(i + 1) % n];
                if (y1 <= y) != (y2 <= y) {
                    xs.push(x1 + (y - y1) * (x2 - x1) / (y2 - y1));
                }
            }
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for pair in xs.chunks_exact(2) {
                for col in 0..gw {
                    let x = (col * downsample) as f64 + downsample as f64 / 2.0;
                    if x >= pair[0] && x < pair[1] {
                        grid[row * gw + col] = 1;
                    }
                }
            }
        }
    }
    grid
}

/// Smooth value noise: seeded lattice with bilinear interpolation.
struct ValueNoise {
    cell: f64,
    cols: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(width: usize, height: usize, cell: f64, rng: &mut ChaCha8Rng) -> Self {
        let cols = (width as f64 / cell).ceil() as usize + 2;
        let rows = (height as f64 / cell).ceil() as usize + 2;
        let values = (0..cols * rows).map(|_| rng.gen::<f64>()).collect();
        Self { cell, cols, values }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let gx = x / self.cell;
        let gy = y / self.cell;
        let x0 = gx.floor() as usize;
        let y0 = gy.floor() as usize;
        let fx = gx - x0 as f64;
        let fy = gy - y0 as f64;
        let v = |cx: usize, cy: usize| self.values[cy * self.cols + cx];
        let top = v(x0, y0) * (1.0 - fx) + v(x0 + 1, y0) * fx;
        let bot = v(x0, y0 + 1) * (1.0 - fx) + v(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

fn validate_spec(spec: &SyntheticSlideSpec) -> Result<(), SlideError> {
    if spec.width == 0 || spec.height == 0 || spec.width % 256 != 0 || spec.height % 256 != 0 {
        return Err(SlideError::SpecInvalid(format!(
            "dimensions {}x{} must be positive multiples of 256",
            spec.width, spec.height
        )));
    }
    if !(spec.stain_multiplier > 0.0) {
        return Err(SlideError::SpecInvalid("stain_multiplier must be positive".into()));
    }
    for poly in &spec.tissue {
        if poly.points.len() < 3 {
            return Err(SlideError::SpecInvalid("tissue polygon needs >= 3 points".into()));
        }
    }
    for m in &spec.motifs {
        if !(m.scale > 0.0) {
            return Err(SlideError::SpecInvalid("motif scale must be positive".into()));
        }
        if !spec.tissue.iter().any(|p| point_in_polygon(m.center, p)) {
            return Err(SlideError::SpecInvalid(format!(
                "motif center ({}, {}) outside all tissue regions",
                m.center.0, m.center.1
            )));
        }
    }
    Ok(())
}

fn motif_box(m: &MotifPlacement, width: usize, height: usize) -> TruthBox {
    let x0 = (m.center.0 - m.scale).max(0.0) as usize;
    let y0 = (m.center.1 - m.scale).max(0.0) as usize;
    let x1 = ((m.center.0 + m.scale).ceil() as usize).min(width);
    let y1 = ((m.center.1 + m.scale).ceil() as usize).min(height);
    TruthBox { kind: m.kind, x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
}

fn apply_motif(
    m: &MotifPlacement,
    bx: &TruthBox,
    mask: &[u8],
    width: usize,
    mult: f64,
    conc_h: &mut [f64],
    conc_e: &mut [f64],
) {
    for y in bx.y..bx.y + bx.h {
        for x in bx.x..bx.x + bx.w {
            let i = y * width + x;
            if mask[i] == 0 {
                continue;
            }
            let (u, v) = (x - bx.x, y - bx.y);
            // textures chosen to differ in brightness, hue, and spatial
            // pattern at the 32-px scale so simple color/intensity
            // statistics separate the motif kinds
            match m.kind {
                MotifKind::Dots => {
                    // uniformly dark, haematoxylin-dominant dot lattice
                    let (du, dv) = (u % 16, v % 16);
                    let boost =
                        if (du as i64 - 8).pow(2) + (dv as i64 - 8).pow(2) < 36 { 1.8 } else { 1.0 };
                    conc_h[i] = conc_h[i] * 0.5 + boost * mult;
                    conc_e[i] *= 0.2;
                }
                MotifKind::Stripes => {
                    // wide diagonal bands: saturated eosin vs near-white
                    if ((u + v) / 32) % 2 == 0 {
                        conc_e[i] = conc_e[i] * 0.3 + 0.8 * mult;
                        conc_h[i] *= 0.15;
                    } else {
                        conc_h[i] *= 0.1;
                        conc_e[i] *= 0.1;
                    }
                }
                MotifKind::Rings => {
                    // concentric mid-purple rings with light gaps
                    let dx = x as f64 - m.center.0;
                    let dy = y as f64 - m.center.1;
                    if ((dx * dx + dy * dy).sqrt() as usize / 20) % 2 == 0 {
                        conc_h[i] = conc_h[i] * 0.4 + 0.45 * mult;
                        conc_e[i] = conc_e[i] * 0.4 + 0.45 * mult;
                    } else {
                        conc_h[i] *= 0.15;
                        conc_e[i] *= 0.15;
                    }
                }
                MotifKind::Checker => {
                    // 32-px checkerboard: dark blue vs near-white blocks
                    if (u / 32 + v / 32) % 2 == 0 {
                        conc_h[i] = conc_h[i] * 0.4 + 1.1 * mult;
                        conc_e[i] *= 0.3;
                    } else {
                        conc_h[i] *= 0.05;
                        conc_e[i] *= 0.05;
                    }
                }
            }
        }
    }
}

/// Render level 0 only (shared by the pyramid writer and tests).
pub(crate) fn render_level0(spec: &SyntheticSlideSpec, seed: u64) -> Result<RgbImage, SlideError> {
    validate_spec(spec)?;
    let (w, h) = (spec.width, spec.height);
    let mask = rasterize_polygons(&spec.tissue, w, h, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_h = ValueNoise::new(w, h, 31.0, &mut rng);
    let noise_e = ValueNoise::new(w, h, 47.0, &mut rng);
    let mult = spec.stain_multiplier;

    let mut conc_h = vec![0.0f64; w * h];
    let mut conc_e = vec![0.0f64; w * h];
    let mut jitter = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09e667f3bcc908);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mask[i] == 0 {
                continue;
            }
            let jh: f64 = jitter.gen_range(-0.02..0.02);
            let je: f64 = jitter.gen_range(-0.02..0.02);
            conc_h[i] = mult * (0.35 + 0.30 * noise_h.at(x as f64, y as f64) + jh);
            conc_e[i] = mult * (0.25 + 0.25 * noise_e.at(x as f64, y as f64) + je);
        }
    }
    for m in &spec.motifs {
        let bx = motif_box(m, w, h);
        apply_motif(m, &bx, &mask, w, mult, &mut conc_h, &mut conc_e);
    }

    // invert optical density: I = 256 * 10^-OD - 1, so OD(-log10((I+1)/256))
    // round-trips and stain fitting sees the generator's directions
    let mut img = RgbImage::white(w, h);
    for i in 0..w * h {
        if mask[i] == 0 {
            continue;
        }
        let mut px = [255u8; 3];
        for c in 0..3 {
            let od = conc_h[i] * GENERATOR_STAIN_HEMATOXYLIN[c]
                + conc_e[i] * GENERATOR_STAIN_EOSIN[c];
            px[c] = (256.0 * 10f64.powf(-od) - 1.0).clamp(0.0, 255.0).round() as u8;
        }
        img.data[i * 3..i * 3 + 3].copy_from_slice(&px);
    }
    Ok(img)
}

/// Generate a pyramid directory (levels 1×/2×/4×) plus `truth.json`.
pub fn generate_synthetic_slide(
    dir: impl AsRef<Path>,
    spec: &SyntheticSlideSpec,
    seed: u64,
) -> Result<SlideTruth, SlideError> {
    let level0 = render_level0(spec, seed)?;
    let dir = dir.as_ref();
    write_pyramid(dir, &level0, 0.5, 512, &[1, 2, 4])?;
    let truth = SlideTruth {
        width: spec.width,
        height: spec.height,
        tissue: spec.tissue.clone(),
        motif_boxes: spec.motifs.iter().map(|m| motif_box(m, spec.width, spec.height)).collect(),
        label: spec.label.clone(),
        rule: spec.rule,
    };
    std::fs::write(dir.join(TRUTH_FILE), serde_json::to_string_pretty(&truth)?)?;
    Ok(truth)
}

pub struct GeneratedDataset {
    pub root: PathBuf,
    pub manifest: Vec<SlideManifestEntry>,
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
    Polygon { points: vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)] }
}

fn write_dataset(
    root: &Path,
    specs: Vec<(String, SyntheticSlideSpec, f64, bool)>,
    seed: u64,
) -> Result<GeneratedDataset, SlideError> {
    std::fs::create_dir_all(root)?;
    let mut manifest = Vec::new();
    for (idx, (id, spec, time, event)) in specs.into_iter().enumerate() {
        let dir = root.join(&id);
        generate_synthetic_slide(&dir, &spec, seed.wrapping_add(idx as u64 * 7919))?;
        manifest.push(SlideManifestEntry {
            slide_id: id.clone(),
            path: id,
            label: spec.label,
            survival_time: Some(time),
            event_observed: Some(event),
        });
    }
    super::save_manifest(root.join("manifest.json"), &manifest)?;
    Ok(GeneratedDataset { root: root.to_path_buf(), manifest })
}

/// Binary dataset where the positive class is defined by local evidence:
/// positives contain Dots motifs, negatives none; Stripes appear in both
/// classes as a distractor.
pub fn make_local_presence_dataset(
    root: impl AsRef<Path>,
    n_slides: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<GeneratedDataset, SlideError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::new();
    for i in 0..n_slides {
        let positive = i % 2 == 0;
        let tissue = vec![rect(8.0, 8.0, width as f64 - 8.0, height as f64 - 8.0)];
        // motifs sit on the 256 px patch grid (distinct cells, small jitter)
        // so each one dominates a single patch
        let (cols, rows) = (width / 256, height / 256);
        let mut cells: Vec<(usize, usize)> =
            (0..rows).flat_map(|gy| (0..cols).map(move |gx| (gx, gy))).collect();
        for i in (1..cells.len()).rev() {
            cells.swap(i, rng.gen_range(0..=i));
        }
        let n_cells = cells.len();
        let mut cells = cells.into_iter();
        let mut motifs = Vec::new();
        let mut place = |kind: MotifKind, rng: &mut ChaCha8Rng, motifs: &mut Vec<MotifPlacement>| {
            let (gx, gy) = cells.next().expect("more motifs than grid cells");
            let cx = (gx * 256 + 128) as f64 + rng.gen_range(-12.0..12.0);
            let cy = (gy * 256 + 128) as f64 + rng.gen_range(-12.0..12.0);
            motifs.push(MotifPlacement { kind, center: (cx, cy), scale: 100.0 });
        };
        let n_dots = if positive { rng.gen_range(2..=4).min(n_cells / 2).max(1) } else { 0 };
        for _ in 0..n_dots {
            place(MotifKind::Dots, &mut rng, &mut motifs);
        }
        for _ in 0..rng.gen_range(2..=4).min(n_cells - n_dots) {
            place(MotifKind::Stripes, &mut rng, &mut motifs);
        }
        let spec = SyntheticSlideSpec {
            width,
            height,
            tissue,
            motifs,
            rule: LabelRule::LocalPresence,
            label: if positive { "pos".into() } else { "neg".into() },
            stain_multiplier: rng.gen_range(0.85..1.15),
        };
        // survival signal correlated with the label, for the survival head
        let time = if positive { rng.gen_range(100.0..400.0) } else { rng.gen_range(500.0..1200.0) };
        let event = rng.gen_bool(0.8);
        specs.push((format!("slide_{i:03}"), spec, time, event));
    }
    write_dataset(root.as_ref(), specs, seed ^ 0x51de)
}

/// Binary dataset where both classes contain identical motif multisets
/// (8 Dots + 8 Stripes on a patch grid) and only the within-slide spatial
/// arrangement differs: positives put Dots on the left half, negatives on
/// the right. Instance marginals are identical by construction.
pub fn make_arrangement_dataset(
    root: impl AsRef<Path>,
    n_slides: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<GeneratedDataset, SlideError> {
    if width % 256 != 0 || height % 256 != 0 || width / 256 < 2 {
        return Err(SlideError::SpecInvalid("arrangement grid needs >= 2 patch columns".into()));
    }
    let (cols, rows) = (width / 256, height / 256);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::new();
    for i in 0..n_slides {
        let positive = i % 2 == 0;
        // full-bleed tissue: an inset border would watermark edge patches
        // with their position, giving bag-of-instances models a side channel
        let tissue = vec![rect(0.0, 0.0, width as f64, height as f64)];
        let mut motifs = Vec::new();
        for gy in 0..rows {
            for gx in 0..cols {
                let dots_side = gx < cols / 2;
                let kind = if dots_side == positive { MotifKind::Dots } else { MotifKind::Stripes };
                let cx = (gx * 256 + 128) as f64 + rng.gen_range(-12.0..12.0);
                let cy = (gy * 256 + 128) as f64 + rng.gen_range(-12.0..12.0);
                motifs.push(MotifPlacement { kind, center: (cx, cy), scale: 100.0 });
            }
        }
        let spec = SyntheticSlideSpec {
            width,
            height,
            tissue,
            motifs,
            rule: LabelRule::SpatialArrangement,
            label: if positive { "pos".into() } else { "neg".into() },
            stain_multiplier: rng.gen_range(0.9..1.1),
        };
        let time = if positive { rng.gen_range(100.0..400.0) } else { rng.gen_range(500.0..1200.0) };
        let event = rng.gen_bool(0.8);
        specs.push((format!("slide_{i:03}"), spec, time, event));
    }
    write_dataset(root.as_ref(), specs, seed ^ 0xa55a)
}
