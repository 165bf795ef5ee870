//! Tissue masking, stain normalization, and two-level foreground-thresholded
//! patch extraction at the canonical 0.5 mpp resolution.

mod stain;

pub use stain::{
    fit_or_reference, macenko_fit, macenko_normalize, StainMatrix, MACENKO_ALPHA, MACENKO_BETA,
};

use crate::slide::{read_pgm, write_pgm, RegionSource, SlideError};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("slide has no pixels")]
    EmptySlide,
    #[error("only {found} pixels above the optical-density floor; need >= 1000")]
    InsufficientStain { found: usize },
    #[error("stain plane is rank-deficient; cannot separate two stains")]
    DegenerateStain,
    #[error("threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("bad patch index line: {0}")]
    BadPatchIndex(String),
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Binary tissue/background grid at `factor`× downsample of level 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    /// downsample relative to level 0; always a power of two dividing 256
    pub factor: usize,
    /// row-major, values 0 or 1
    pub grid: Vec<u8>,
}

impl TissueMask {
    pub fn coverage(&self) -> f64 {
        if self.grid.is_empty() {
            return 0.0;
        }
        self.grid.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.grid.len() as f64
    }

    pub fn at(&self, gx: usize, gy: usize) -> u8 {
        self.grid[gy * self.width + gx]
    }
}

#[derive(Serialize, Deserialize)]
struct MaskSidecar {
    factor: usize,
}

/// Store as P5 PGM (0/255) plus `<path>.json` carrying the downsample factor.
pub fn save_mask(path: impl AsRef<Path>, mask: &TissueMask) -> Result<(), PreprocessError> {
    let path = path.as_ref();
    let bytes: Vec<u8> = mask.grid.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    write_pgm(path, mask.width, mask.height, &bytes)?;
    let sidecar = path.with_extension("json");
    std::fs::write(sidecar, serde_json::to_string(&MaskSidecar { factor: mask.factor })?)?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<TissueMask, PreprocessError> {
    let path = path.as_ref();
    let (width, height, bytes) = read_pgm(path)?;
    let sidecar: MaskSidecar =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
    Ok(TissueMask {
        width,
        height,
        factor: sidecar.factor,
        grid: bytes.iter().map(|&v| u8::from(v > 0)).collect(),
    })
}

/// Exhaustive Otsu: the 0..=255 threshold maximizing between-class variance.
/// Pixels with value > threshold are foreground.
pub fn otsu_threshold(hist: &[u64; 256]) -> u8 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0;
    }
    let weighted_total: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let mut best = (0u8, f64::MIN);
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..256usize {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (weighted_total - sum0) / w1;
        let score = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if score > best.1 {
            best = (t as u8, score);
        }
    }
    best.0
}

/// HSV-style saturation scaled to 0..=255.
fn saturation(p: [u8; 3]) -> u8 {
    let max = p.iter().copied().max().unwrap();
    if max == 0 {
        return 0;
    }
    let min = p.iter().copied().min().unwrap();
    (((max - min) as f64 / max as f64) * 255.0).round() as u8
}

/// Otsu on the saturation channel of a ≤ 4096-px overview, then a 3×3
/// median filter. The overview factor is the smallest power of two that
/// fits, so it always divides the patch sizes downstream.
pub fn compute_tissue_mask(slide: &impl RegionSource) -> Result<TissueMask, PreprocessError> {
    let (w, h) = (slide.width(), slide.height());
    if w == 0 || h == 0 {
        return Err(PreprocessError::EmptySlide);
    }
    let mut factor = 1usize;
    while w.max(h).div_ceil(factor) > 4096 {
        factor *= 2;
    }
    let full = slide.read_region(0, 0, 0, w, h)?;
    let overview =
        if factor == 1 { full } else { crate::slide::box_downsample(&full, factor) };

    let mut sat = vec![0u8; overview.width * overview.height];
    let mut hist = [0u64; 256];
    for y in 0..overview.height {
        for x in 0..overview.width {
            let s = saturation(overview.pixel(x, y));
            sat[y * overview.width + x] = s;
            hist[s as usize] += 1;
        }
    }
    let threshold = otsu_threshold(&hist);
    let (gw, gh) = (overview.width, overview.height);
    let raw: Vec<u8> = sat.iter().map(|&s| u8::from(s > threshold)).collect();

    // 3x3 majority (median of a binary neighborhood), replicated edges
    let mut grid = vec![0u8; gw * gh];
    for y in 0..gh {
        for x in 0..gw {
            let mut ones = 0;
            let mut count = 0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < gw && (ny as usize) < gh {
                        ones += raw[ny as usize * gw + nx as usize] as usize;
                        count += 1;
                    }
                }
            }
            grid[y * gw + x] = u8::from(ones * 2 > count);
        }
    }
    Ok(TissueMask { width: gw, height: gh, factor, grid })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatchLevel {
    L1,
    L2,
}

impl PatchLevel {
    pub fn size(self) -> usize {
        match self {
            PatchLevel::L1 => 256,
            PatchLevel::L2 => 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchRecord {
    pub level: PatchLevel,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub fg_fraction: f64,
}

/// Non-overlapping grid of `level.size()` patches over the level-0 extent;
/// keeps patches whose mask-resolution foreground fraction is ≥ threshold
/// (area past the slide edge counts as background). Sorted by (y, x).
pub fn extract_patches(
    mask: &TissueMask,
    slide_width: usize,
    slide_height: usize,
    level: PatchLevel,
    threshold: f64,
) -> Result<Vec<PatchRecord>, PreprocessError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(PreprocessError::BadThreshold(threshold));
    }
    let size = level.size();
    debug_assert_eq!(size % mask.factor, 0);
    let cells = size / mask.factor;
    let denom = (cells * cells) as f64;
    let mut out = Vec::new();
    for y in (0..slide_height).step_by(size) {
        for x in (0..slide_width).step_by(size) {
            let (gx0, gy0) = (x / mask.factor, y / mask.factor);
            let mut fg = 0usize;
            for gy in gy0..(gy0 + cells).min(mask.height) {
                for gx in gx0..(gx0 + cells).min(mask.width) {
                    fg += mask.at(gx, gy) as usize;
                }
            }
            let fg_fraction = fg as f64 / denom;
            if fg_fraction >= threshold {
                out.push(PatchRecord { level, x, y, size, fg_fraction });
            }
        }
    }
    Ok(out)
}

/// CSV with header `level,x,y,size,fg_fraction`.
pub fn save_patch_index(
    path: impl AsRef<Path>,
    records: &[PatchRecord],
) -> Result<(), PreprocessError> {
    let mut text = String::from("level,x,y,size,fg_fraction\n");
    for r in records {
        let tag = match r.level {
            PatchLevel::L1 => "L1",
            PatchLevel::L2 => "L2",
        };
        text.push_str(&format!("{tag},{},{},{},{}\n", r.x, r.y, r.size, r.fg_fraction));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_patch_index(path: impl AsRef<Path>) -> Result<Vec<PatchRecord>, PreprocessError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || PreprocessError::BadPatchIndex(line.to_string());
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad());
        }
        let level = match fields[0] {
            "L1" => PatchLevel::L1,
            "L2" => PatchLevel::L2,
            _ => return Err(bad()),
        };
        out.push(PatchRecord {
            level,
            x: fields[1].parse().map_err(|_| bad())?,
            y: fields[2].parse().map_err(|_| bad())?,
            size: fields[3].parse().map_err(|_| bad())?,
            fg_fraction: fields[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide::{
        generate_synthetic_slide, open_pyramid, rasterize_polygons, LabelRule, MotifKind,
        MotifPlacement, Polygon, SyntheticSlideSpec,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tissue_spec() -> SyntheticSlideSpec {
        SyntheticSlideSpec {
            width: 512,
            height: 512,
            tissue: vec![Polygon {
                points: vec![(60.0, 40.0), (470.0, 80.0), (430.0, 480.0), (40.0, 420.0)],
            }],
            motifs: vec![MotifPlacement {
                kind: MotifKind::Rings,
                center: (250.0, 250.0),
                scale: 70.0,
            }],
            rule: LabelRule::LocalPresence,
            label: "pos".into(),
            stain_multiplier: 1.0,
        }
    }

    #[test]
    fn all_white_slide_gives_empty_mask() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("s");
        let mut spec = tissue_spec();
        spec.tissue.clear();
        spec.motifs.clear();
        generate_synthetic_slide(&root, &spec, 1).unwrap();
        let mask = compute_tissue_mask(&open_pyramid(&root).unwrap()).unwrap();
        assert_eq!(mask.coverage(), 0.0);
    }

    #[test]
    fn mask_matches_planted_polygon() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("s");
        let mut spec = tissue_spec();
        // plain tissue: motif textures deliberately contain near-white
        // gaps that are not background
        spec.motifs.clear();
        generate_synthetic_slide(&root, &spec, 2).unwrap();
        let mask = compute_tissue_mask(&open_pyramid(&root).unwrap()).unwrap();
        let truth = rasterize_polygons(&spec.tissue, 512, 512, mask.factor);
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in mask.grid.iter().zip(&truth) {
            inter += (*a & *b) as usize;
            union += (*a | *b) as usize;
        }
        let iou = inter as f64 / union as f64;
        assert!(iou >= 0.95, "IoU {iou}");
    }

    #[test]
    fn otsu_matches_brute_force_maximizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let mut hist = [0u64; 256];
            // bimodal-ish histogram with noise
            for _ in 0..rng.gen_range(100..2000u32) {
                hist[rng.gen_range(0..80usize)] += 1;
            }
            for _ in 0..rng.gen_range(100..2000u32) {
                hist[rng.gen_range(120..256usize)] += 1;
            }
            let total: u64 = hist.iter().sum();
            let mut best = (0usize, f64::MIN);
            for t in 0..256usize {
                let w0: u64 = hist[..=t].iter().sum();
                let w1 = total - w0;
                if w0 == 0 || w1 == 0 {
                    continue;
                }
                let mu0: f64 = hist[..=t].iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum::<f64>()
                    / w0 as f64;
                let mu1: f64 = hist[t + 1..]
                    .iter()
                    .enumerate()
                    .map(|(v, &c)| (v + t + 1) as f64 * c as f64)
                    .sum::<f64>()
                    / w1 as f64;
                let score = w0 as f64 * w1 as f64 * (mu0 - mu1) * (mu0 - mu1);
                if score > best.1 {
                    best = (t, score);
                }
            }
            assert_eq!(otsu_threshold(&hist) as usize, best.0);
        }
    }

    #[test]
    fn full_tissue_grid_arithmetic() {
        let mask = TissueMask { width: 64, height: 64, factor: 16, grid: vec![1; 64 * 64] };
        let recs = extract_patches(&mask, 1024, 1024, PatchLevel::L1, 0.75).unwrap();
        assert_eq!(recs.len(), 16);
        assert!(recs.iter().all(|r| r.fg_fraction == 1.0 && r.size == 256));
        // sorted by (y, x)
        let mut sorted = recs.clone();
        sorted.sort_by_key(|r| (r.y, r.x));
        assert_eq!(recs, sorted);
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        // one patch: 16x16 cells, exactly 75% foreground
        let mut grid = vec![0u8; 256];
        for i in 0..192 {
            grid[i] = 1;
        }
        let mask = TissueMask { width: 16, height: 16, factor: 16, grid };
        let recs = extract_patches(&mask, 256, 256, PatchLevel::L1, 0.75).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].fg_fraction, 0.75);
        assert!(extract_patches(&mask, 256, 256, PatchLevel::L1, 0.7500001).unwrap().is_empty());
    }

    #[test]
    fn patch_counts_match_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let factor = 16usize;
            let sw = 256 * rng.gen_range(1..=20usize) + rng.gen_range(0..256);
            let sh = 256 * rng.gen_range(1..=20usize) + rng.gen_range(0..256);
            let (gw, gh) = (sw.div_ceil(factor), sh.div_ceil(factor));
            let density: f64 = rng.gen_range(0.2..0.9);
            let grid: Vec<u8> =
                (0..gw * gh).map(|_| u8::from(rng.gen_bool(density))).collect();
            let mask = TissueMask { width: gw, height: gh, factor, grid };
            for (level, threshold) in
                [(PatchLevel::L1, 0.75), (PatchLevel::L1, 0.40), (PatchLevel::L2, 0.20)]
            {
                let got = extract_patches(&mask, sw, sh, level, threshold).unwrap();
                // oracle: sum level-0 pixels via nearest mask cell
                let size = level.size();
                let mut expect = 0usize;
                for y in (0..sh).step_by(size) {
                    for x in (0..sw).step_by(size) {
                        let mut fg = 0u64;
                        for py in y..y + size {
                            for px in x..x + size {
                                let (gx, gy) = (px / factor, py / factor);
                                if gx < gw && gy < gh {
                                    fg += mask.at(gx, gy) as u64;
                                }
                            }
                        }
                        if fg as f64 / (size * size) as f64 >= threshold {
                            expect += 1;
                        }
                    }
                }
                assert_eq!(got.len(), expect, "trial {trial} {level:?} t={threshold}");
            }
        }
    }

    #[test]
    fn l1_patches_nest_in_l2_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (sw, sh) = (8192, 4352);
        let (gw, gh) = (sw / 16, sh / 16);
        let grid: Vec<u8> = (0..gw * gh).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let mask = TissueMask { width: gw, height: gh, factor: 16, grid };
        let l1 = extract_patches(&mask, sw, sh, PatchLevel::L1, 0.4).unwrap();
        for r in &l1 {
            assert_eq!(r.x % 256, 0);
            assert_eq!(r.y % 256, 0);
            // each L1 record lies in exactly one L2 grid cell
            assert_eq!((r.x / 4096) * 4096 + (r.x % 4096) / 256 * 256, r.x);
        }
        let cell = |r: &PatchRecord| (r.x / 4096, r.y / 4096);
        for r in &l1 {
            let c = cell(r);
            assert!(c.0 < sw.div_ceil(4096) && c.1 < sh.div_ceil(4096));
        }
    }

    #[test]
    fn patch_index_roundtrip_and_mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            PatchRecord { level: PatchLevel::L1, x: 256, y: 512, size: 256, fg_fraction: 0.8125 },
            PatchRecord { level: PatchLevel::L2, x: 0, y: 0, size: 4096, fg_fraction: 0.25 },
        ];
        let csv = dir.path().join("patches.csv");
        save_patch_index(&csv, &recs).unwrap();
        assert_eq!(load_patch_index(&csv).unwrap(), recs);

        let mask = TissueMask { width: 3, height: 2, factor: 16, grid: vec![1, 0, 1, 0, 1, 0] };
        let pgm = dir.path().join("mask.pgm");
        save_mask(&pgm, &mask).unwrap();
        assert_eq!(load_mask(&pgm).unwrap(), mask);
    }

    #[test]
    fn bad_threshold_rejected() {
        let mask = TissueMask { width: 1, height: 1, factor: 16, grid: vec![1] };
        assert!(matches!(
            extract_patches(&mask, 256, 256, PatchLevel::L1, 0.0),
            Err(PreprocessError::BadThreshold(_))
        ));
        assert!(matches!(
            extract_patches(&mask, 256, 256, PatchLevel::L1, 1.5),
            Err(PreprocessError::BadThreshold(_))
        ));
    }
}
