//! Level-1 patch embeddings (a fixed, seeded toy encoder or imported
//! vectors) and their grouping into 16×16 region token grids.

use crate::slide::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FEATURE_DIM: usize = 384;
/// L1 cells per region side: 4096 px / 256 px.
pub const REGION_SPAN: i32 = 16;
pub const EMBEDDING_MAGIC: &[u8; 4] = b"WSIF";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FeaturesError {
    #[error("toy encoder expects a 256x256 patch, got {0}x{1}")]
    WrongPatchSize(usize, usize),
    #[error("bad magic in embedding file")]
    BadMagic,
    #[error("unsupported embedding file version {0}")]
    UnsupportedVersion(u32),
    #[error("embedding dim {found} does not match expected {expected}")]
    DimMismatch { found: usize, expected: usize },
    #[error("embedding file truncated")]
    TruncatedFile,
    #[error("duplicate grid cell ({0}, {1})")]
    DuplicateCell(i32, i32),
    #[error("non-finite value in feature vector at ({0}, {1})")]
    NonFinite(i32, i32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEntry {
    /// patch position in 256-px units at level 0
    pub grid_x: i32,
    pub grid_y: i32,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub slide_id: String,
    pub dim: usize,
    pub entries: Vec<FeatureEntry>,
}

impl FeatureBag {
    pub fn validate(&self) -> Result<(), FeaturesError> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if e.vector.len() != self.dim {
                return Err(FeaturesError::DimMismatch {
                    found: e.vector.len(),
                    expected: self.dim,
                });
            }
            if !seen.insert((e.grid_x, e.grid_y)) {
                return Err(FeaturesError::DuplicateCell(e.grid_x, e.grid_y));
            }
            if e.vector.iter().any(|v| !v.is_finite()) {
                return Err(FeaturesError::NonFinite(e.grid_x, e.grid_y));
            }
        }
        Ok(())
    }
}

/// Deterministic seeded 384-d patch descriptor standing in for a frozen
/// pre-trained encoder: 8×8×3 box-mean intensities (192), a 4×4×4 joint
/// color histogram (64), and 128 fixed random projections of the 32×32
/// grayscale patch; L2-normalized.
pub struct ToyEncoder {
    pub seed: u64,
    /// 128 rows × 1024 columns, scaled by 1/sqrt(1024)
    projections: Vec<f32>,
}

impl ToyEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70795f656e636f64);
        let scale = 1.0 / (1024f32).sqrt();
        let projections =
            (0..128 * 1024).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect();
        Self { seed, projections }
    }

    pub fn encode(&self, patch: &RgbImage) -> Result<Vec<f32>, FeaturesError> {
        if patch.width != 256 || patch.height != 256 {
            return Err(FeaturesError::WrongPatchSize(patch.width, patch.height));
        }
        let mut out = Vec::with_capacity(FEATURE_DIM);

        // 8x8 box means per channel
        for by in 0..8 {
            for bx in 0..8 {
                let mut acc = [0.0f32; 3];
                for y in by * 32..(by + 1) * 32 {
                    for x in bx * 32..(bx + 1) * 32 {
                        let p = patch.pixel(x, y);
                        for c in 0..3 {
                            acc[c] += p[c] as f32;
                        }
                    }
                }
                for c in acc {
                    out.push(c / (32.0 * 32.0 * 255.0));
                }
            }
        }

        // joint color histogram, 4 bins per channel
        let mut hist = [0.0f32; 64];
        for y in 0..256 {
            for x in 0..256 {
                let p = patch.pixel(x, y);
                let idx =
                    (p[0] as usize >> 6) * 16 + (p[1] as usize >> 6) * 4 + (p[2] as usize >> 6);
                hist[idx] += 1.0;
            }
        }
        for h in hist {
            out.push(h / (256.0 * 256.0));
        }

        // 32x32 grayscale, then 128 seeded projections
        let mut gray = [0.0f32; 1024];
        for by in 0..32 {
            for bx in 0..32 {
                let mut acc = 0.0f32;
                for y in by * 8..(by + 1) * 8 {
                    for x in bx * 8..(bx + 1) * 8 {
                        let p = patch.pixel(x, y);
                        acc += (p[0] as f32 + p[1] as f32 + p[2] as f32) / 3.0;
                    }
                }
                gray[by * 32 + bx] = acc / (8.0 * 8.0 * 255.0);
            }
        }
        for row in 0..128 {
            let w = &self.projections[row * 1024..(row + 1) * 1024];
            out.push(gray.iter().zip(w).map(|(g, p)| g * p).sum());
        }

        debug_assert_eq!(out.len(), FEATURE_DIM);
        let norm = out.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            for v in &mut out {
                *v /= norm;
            }
        }
        Ok(out)
    }
}

/// Write the binary embedding file: magic "WSIF", version, dim, count,
/// then grid_x/grid_y (i32) and dim little-endian f32s per entry.
pub fn export_embeddings(bag: &FeatureBag, path: impl AsRef<Path>) -> Result<(), FeaturesError> {
    bag.validate()?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    w.write_all(&(bag.dim as u32).to_le_bytes())?;
    w.write_all(&(bag.entries.len() as u64).to_le_bytes())?;
    for e in &bag.entries {
        w.write_all(&e.grid_x.to_le_bytes())?;
        w.write_all(&e.grid_y.to_le_bytes())?;
        for v in &e.vector {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn import_embeddings(path: impl AsRef<Path>) -> Result<FeatureBag, FeaturesError> {
    let path = path.as_ref();
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut read_exact = |buf: &mut [u8]| -> Result<(), FeaturesError> {
        r.read_exact(buf).map_err(|_| FeaturesError::TruncatedFile)
    };
    let mut magic = [0u8; 4];
    read_exact(&mut magic)?;
    if &magic != EMBEDDING_MAGIC {
        return Err(FeaturesError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != EMBEDDING_VERSION {
        return Err(FeaturesError::UnsupportedVersion(version));
    }
    read_exact(&mut u32buf)?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    let mut u64buf = [0u8; 8];
    read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        read_exact(&mut u32buf)?;
        let grid_x = i32::from_le_bytes(u32buf);
        read_exact(&mut u32buf)?;
        let grid_y = i32::from_le_bytes(u32buf);
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            read_exact(&mut u32buf)?;
            vector.push(f32::from_le_bytes(u32buf));
        }
        entries.push(FeatureEntry { grid_x, grid_y, vector });
    }
    let slide_id =
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let bag = FeatureBag { slide_id, dim, entries };
    bag.validate()?;
    Ok(bag)
}

/// One 4096-px region: a 16×16 slot grid where slot (i, j) holds the
/// feature of L1 cell (16·region_x + i, 16·region_y + j), if present.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrid {
    pub region_x: i32,
    pub region_y: i32,
    /// row-major [j][i], length 256
    pub tokens: Vec<Option<Vec<f32>>>,
}

impl RegionGrid {
    pub fn present_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_some()).count()
    }

    pub fn slot(&self, i: i32, j: i32) -> &Option<Vec<f32>> {
        &self.tokens[(j * REGION_SPAN + i) as usize]
    }
}

/// Partition bag entries by (grid div 16); regions with fewer than
/// `min_presence` tokens are dropped. Output ordered by (region_y, region_x).
pub fn group_into_regions(bag: &FeatureBag, min_presence: usize) -> Vec<RegionGrid> {
    let mut regions: BTreeMap<(i32, i32), RegionGrid> = BTreeMap::new();
    for e in &bag.entries {
        let rx = e.grid_x.div_euclid(REGION_SPAN);
        let ry = e.grid_y.div_euclid(REGION_SPAN);
        let region = regions.entry((ry, rx)).or_insert_with(|| RegionGrid {
            region_x: rx,
            region_y: ry,
            tokens: vec![None; (REGION_SPAN * REGION_SPAN) as usize],
        });
        let i = e.grid_x.rem_euclid(REGION_SPAN);
        let j = e.grid_y.rem_euclid(REGION_SPAN);
        region.tokens[(j * REGION_SPAN + i) as usize] = Some(e.vector.clone());
    }
    regions.into_values().filter(|r| r.present_count() >= min_presence).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide::{LabelRule, MotifKind, MotifPlacement, Polygon, SyntheticSlideSpec};

    fn motif_patch(kind: MotifKind, seed: u64) -> RgbImage {
        let spec = SyntheticSlideSpec {
            width: 256,
            height: 256,
            tissue: vec![Polygon {
                points: vec![(0.0, 0.0), (256.0, 0.0), (256.0, 256.0), (0.0, 256.0)],
            }],
            motifs: vec![MotifPlacement { kind, center: (128.0, 128.0), scale: 128.0 }],
            rule: LabelRule::LocalPresence,
            label: "x".into(),
            stain_multiplier: 1.0,
        };
        crate::slide::render_level0(&spec, seed).unwrap()
    }

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x * y) as f64).sum()
    }

    #[test]
    fn encoder_is_deterministic_and_384d() {
        let enc = ToyEncoder::new(1);
        let patch = motif_patch(MotifKind::Dots, 5);
        let a = enc.encode(&patch).unwrap();
        let b = enc.encode(&patch).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), FEATURE_DIM);
        let norm: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert_ne!(a, ToyEncoder::new(2).encode(&patch).unwrap());
    }

    #[test]
    fn wrong_patch_size_rejected() {
        let enc = ToyEncoder::new(0);
        assert!(matches!(
            enc.encode(&RgbImage::white(128, 256)),
            Err(FeaturesError::WrongPatchSize(128, 256))
        ));
    }

    #[test]
    fn same_motif_more_similar_than_different() {
        let enc = ToyEncoder::new(7);
        let kinds = [MotifKind::Dots, MotifKind::Stripes, MotifKind::Rings, MotifKind::Checker];
        // 1000+ comparisons: 32 noisy renders per motif
        let mut feats: Vec<(MotifKind, Vec<f32>)> = Vec::new();
        for (ki, kind) in kinds.iter().enumerate() {
            for s in 0..32u64 {
                let f = enc.encode(&motif_patch(*kind, 1000 + ki as u64 * 100 + s)).unwrap();
                feats.push((*kind, f));
            }
        }
        let (mut same, mut same_n, mut diff, mut diff_n) = (0.0f64, 0u64, 0.0f64, 0u64);
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                let c = cosine(&feats[i].1, &feats[j].1);
                if feats[i].0 == feats[j].0 {
                    same += c;
                    same_n += 1;
                } else {
                    diff += c;
                    diff_n += 1;
                }
            }
        }
        assert!(same_n + diff_n > 1000);
        let margin = same / same_n as f64 - diff / diff_n as f64;
        assert!(margin >= 0.1, "separation margin {margin:.3}");
    }

    #[test]
    fn embedding_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slide_a.wsif");
        let bag = FeatureBag {
            slide_id: "slide_a".into(),
            dim: 3,
            entries: vec![
                FeatureEntry { grid_x: 0, grid_y: 0, vector: vec![0.5, -1.0, 2.25] },
                FeatureEntry { grid_x: 17, grid_y: 4, vector: vec![1.0, 0.0, -0.125] },
            ],
        };
        export_embeddings(&bag, &path).unwrap();
        assert_eq!(import_embeddings(&path).unwrap(), bag);
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.wsif");
        std::fs::write(&bad, b"XXXX\x01\x00\x00\x00").unwrap();
        assert!(matches!(import_embeddings(&bad), Err(FeaturesError::BadMagic)));

        let trunc = dir.path().join("trunc.wsif");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(EMBEDDING_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&5u64.to_le_bytes());
        bytes.extend_from_slice(&0i32.to_le_bytes());
        std::fs::write(&trunc, bytes).unwrap();
        assert!(matches!(import_embeddings(&trunc), Err(FeaturesError::TruncatedFile)));
    }

    #[test]
    fn hand_laid_byte_file_parses_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hand.wsif");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"WSIF");
        bytes.extend_from_slice(&1u32.to_le_bytes()); // version
        bytes.extend_from_slice(&2u32.to_le_bytes()); // dim
        bytes.extend_from_slice(&1u64.to_le_bytes()); // count
        bytes.extend_from_slice(&3i32.to_le_bytes()); // grid_x
        bytes.extend_from_slice(&7i32.to_le_bytes()); // grid_y
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.5f32).to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let bag = import_embeddings(&path).unwrap();
        assert_eq!(bag.dim, 2);
        assert_eq!(
            bag.entries,
            vec![FeatureEntry { grid_x: 3, grid_y: 7, vector: vec![1.0, -2.5] }]
        );
    }

    fn small_bag(cells: &[(i32, i32)]) -> FeatureBag {
        FeatureBag {
            slide_id: "s".into(),
            dim: 2,
            entries: cells
                .iter()
                .map(|&(x, y)| FeatureEntry {
                    grid_x: x,
                    grid_y: y,
                    vector: vec![x as f32, y as f32],
                })
                .collect(),
        }
    }

    #[test]
    fn full_region_has_256_tokens() {
        let cells: Vec<(i32, i32)> =
            (0..16).flat_map(|y| (0..16).map(move |x| (x, y))).collect();
        let regions = group_into_regions(&small_bag(&cells), 1);
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].present_count(), 256);
        assert_eq!((regions[0].region_x, regions[0].region_y), (0, 0));
    }

    #[test]
    fn border_region_presence_counts() {
        // 57 entries that all fall in region (1, 0)
        let cells: Vec<(i32, i32)> =
            (0..57).map(|k| (16 + k % 16, k / 16)).collect();
        let regions = group_into_regions(&small_bag(&cells), 1);
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].present_count(), 57);
        // direct scan oracle
        let direct = cells.iter().filter(|&&(x, y)| x / 16 == 1 && y / 16 == 0).count();
        assert_eq!(regions[0].present_count(), direct);
    }

    #[test]
    fn empty_bag_and_min_presence() {
        assert!(group_into_regions(&small_bag(&[]), 1).is_empty());
        let cells = [(0, 0), (1, 0), (40, 40)];
        assert_eq!(group_into_regions(&small_bag(&cells), 2).len(), 1);
    }

    #[test]
    fn grouping_then_flatten_is_identity() {
        let cells = [(0, 0), (3, 12), (15, 15), (16, 0), (31, 7), (100, 63), (5, 5)];
        let bag = small_bag(&cells);
        let regions = group_into_regions(&bag, 1);
        let mut recovered: Vec<(i32, i32, Vec<f32>)> = Vec::new();
        for r in &regions {
            for j in 0..REGION_SPAN {
                for i in 0..REGION_SPAN {
                    if let Some(v) = r.slot(i, j) {
                        recovered.push((
                            r.region_x * REGION_SPAN + i,
                            r.region_y * REGION_SPAN + j,
                            v.clone(),
                        ));
                    }
                }
            }
        }
        let mut original: Vec<(i32, i32, Vec<f32>)> =
            bag.entries.iter().map(|e| (e.grid_x, e.grid_y, e.vector.clone())).collect();
        original.sort_by_key(|t| (t.1, t.0));
        recovered.sort_by_key(|t| (t.1, t.0));
        assert_eq!(recovered, original);
    }

    #[test]
    fn duplicate_cells_rejected() {
        let bag = small_bag(&[(1, 1), (1, 1)]);
        assert!(matches!(bag.validate(), Err(FeaturesError::DuplicateCell(1, 1))));
    }
}
