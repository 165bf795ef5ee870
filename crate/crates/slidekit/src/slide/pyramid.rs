use super::ppm::{read_ppm, write_ppm};
use super::{RgbImage, SlideError};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelMetaEntry {
    pub downsample: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PyramidMeta {
    pub width: usize,
    pub height: usize,
    pub mpp: f64,
    pub tile_size: usize,
    pub levels: Vec<LevelMetaEntry>,
}

impl PyramidMeta {
    fn validate(&self) -> Result<(), SlideError> {
        if self.width == 0 || self.height == 0 {
            return Err(SlideError::EmptySlide);
        }
        if !(self.mpp > 0.0) {
            return Err(SlideError::MissingMetadata(format!("mpp {} not positive", self.mpp)));
        }
        if self.tile_size == 0 {
            return Err(SlideError::MissingMetadata("tile_size 0".into()));
        }
        match self.levels.first() {
            Some(l0) if l0.downsample == 1 => {}
            _ => {
                return Err(SlideError::MissingMetadata(
                    "level 0 must exist with downsample 1".into(),
                ))
            }
        }
        for pair in self.levels.windows(2) {
            if pair[1].downsample <= pair[0].downsample {
                return Err(SlideError::MissingMetadata(
                    "downsample factors must strictly increase".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelInfo {
    pub width: usize,
    pub height: usize,
    pub downsample: u32,
}

fn level_dim(full: usize, downsample: u32) -> usize {
    full.div_ceil(downsample as usize)
}

/// Read access to a multi-resolution RGB slide. Coordinates passed to
/// `read_region` are in the chosen level's pixel space; out-of-bounds area
/// is filled white. Implementations are safe for concurrent reads.
pub trait RegionSource: Sync {
    fn levels(&self) -> Vec<LevelInfo>;
    fn mpp(&self) -> f64;
    fn read_region(
        &self,
        level: usize,
        x: i64,
        y: i64,
        w: usize,
        h: usize,
    ) -> Result<RgbImage, SlideError>;

    fn width(&self) -> usize {
        self.levels()[0].width
    }

    fn height(&self) -> usize {
        self.levels()[0].height
    }
}

enum Backing {
    Directory { root: PathBuf, cache: RwLock<HashMap<(usize, usize, usize), Arc<RgbImage>>> },
    Single(RgbImage),
}

/// A slide opened from disk.
pub struct SlidePyramid {
    meta: PyramidMeta,
    backing: Backing,
}

/// Open a pyramid directory (`meta.json` + tile rasters).
pub fn open_pyramid(path: impl AsRef<Path>) -> Result<SlidePyramid, SlideError> {
    let path = path.as_ref();
    if !path.is_dir() {
        return Err(SlideError::UnknownFormat(path.display().to_string()));
    }
    let meta_path = path.join(META_FILE);
    if !meta_path.is_file() {
        return Err(SlideError::MissingMetadata(format!("{} not found", meta_path.display())));
    }
    let meta: PyramidMeta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)
        .map_err(|e| SlideError::MissingMetadata(e.to_string()))?;
    meta.validate()?;
    Ok(SlidePyramid {
        meta,
        backing: Backing::Directory { root: path.to_path_buf(), cache: RwLock::new(HashMap::new()) },
    })
}

/// Treat a single P6 raster as a one-level pyramid with a declared mpp.
pub fn open_single_raster(path: impl AsRef<Path>, mpp: f64) -> Result<SlidePyramid, SlideError> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(SlideError::UnknownFormat(path.display().to_string()));
    }
    let image = read_ppm(path)?;
    let meta = PyramidMeta {
        width: image.width,
        height: image.height,
        mpp,
        tile_size: image.width.max(1),
        levels: vec![LevelMetaEntry { downsample: 1 }],
    };
    meta.validate()?;
    Ok(SlidePyramid { meta, backing: Backing::Single(image) })
}

impl SlidePyramid {
    pub fn meta(&self) -> &PyramidMeta {
        &self.meta
    }

    fn tile(&self, level: usize, col: usize, row: usize) -> Result<Arc<RgbImage>, SlideError> {
        match &self.backing {
            Backing::Single(img) => Ok(Arc::new(img.clone())),
            Backing::Directory { root, cache } => {
                let key = (level, col, row);
                if let Some(hit) = cache.read().unwrap().get(&key) {
                    return Ok(hit.clone());
                }
                let name = format!("L{level}_X{col}_Y{row}.ppm");
                let path = root.join(&name);
                if !path.is_file() {
                    return Err(SlideError::CorruptTile(format!("{name} missing")));
                }
                let img = Arc::new(read_ppm(&path)?);
                cache.write().unwrap().insert(key, img.clone());
                Ok(img)
            }
        }
    }
}

impl RegionSource for SlidePyramid {
    fn levels(&self) -> Vec<LevelInfo> {
        self.meta
            .levels
            .iter()
            .map(|l| LevelInfo {
                width: level_dim(self.meta.width, l.downsample),
                height: level_dim(self.meta.height, l.downsample),
                downsample: l.downsample,
            })
            .collect()
    }

    fn mpp(&self) -> f64 {
        self.meta.mpp
    }

    fn read_region(
        &self,
        level: usize,
        x: i64,
        y: i64,
        w: usize,
        h: usize,
    ) -> Result<RgbImage, SlideError> {
        let info = *self
            .levels()
            .get(level)
            .ok_or_else(|| SlideError::MissingMetadata(format!("no level {level}")))?;
        let mut out = RgbImage::white(w, h);
        // visible intersection with the level raster
        let x0 = x.max(0);
        let y0 = y.max(0);
        let x1 = (x + w as i64).min(info.width as i64);
        let y1 = (y + h as i64).min(info.height as i64);
        if x0 >= x1 || y0 >= y1 {
            return Ok(out);
        }
        let ts = self.meta.tile_size;
        let (c0, c1) = (x0 as usize / ts, (x1 as usize - 1) / ts);
        let (r0, r1) = (y0 as usize / ts, (y1 as usize - 1) / ts);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let tile = self.tile(level, col, row)?;
                let tile_x = (col * ts) as i64;
                let tile_y = (row * ts) as i64;
                let ix0 = x0.max(tile_x);
                let iy0 = y0.max(tile_y);
                let ix1 = x1.min(tile_x + tile.width as i64);
                let iy1 = y1.min(tile_y + tile.height as i64);
                for yy in iy0..iy1 {
                    let src_off = ((yy - tile_y) as usize * tile.width
                        + (ix0 - tile_x) as usize)
                        * 3;
                    let dst_off = ((yy - y) as usize * w + (ix0 - x) as usize) * 3;
                    let len = (ix1 - ix0) as usize * 3;
                    out.data[dst_off..dst_off + len]
                        .copy_from_slice(&tile.data[src_off..src_off + len]);
                }
            }
        }
        Ok(out)
    }
}

/// Exact box-average downsample by an integer factor; edge boxes average
/// only in-bounds pixels. Rounds to nearest.
pub fn box_downsample(img: &RgbImage, factor: usize) -> RgbImage {
    let ow = img.width.div_ceil(factor);
    let oh = img.height.div_ceil(factor);
    let mut out = RgbImage::white(ow, oh);
    for oy in 0..oh {
        for ox in 0..ow {
            let x1 = ((ox + 1) * factor).min(img.width);
            let y1 = ((oy + 1) * factor).min(img.height);
            let mut acc = [0u32; 3];
            let mut count = 0u32;
            for y in oy * factor..y1 {
                for x in ox * factor..x1 {
                    let p = img.pixel(x, y);
                    for c in 0..3 {
                        acc[c] += p[c] as u32;
                    }
                    count += 1;
                }
            }
            out.set_pixel(
                ox,
                oy,
                [
                    ((acc[0] + count / 2) / count) as u8,
                    ((acc[1] + count / 2) / count) as u8,
                    ((acc[2] + count / 2) / count) as u8,
                ],
            );
        }
    }
    out
}

/// Write `level0` and successive box-downsampled levels as a pyramid
/// directory. `downsamples` must start at 1 and strictly increase.
pub fn write_pyramid(
    dir: impl AsRef<Path>,
    level0: &RgbImage,
    mpp: f64,
    tile_size: usize,
    downsamples: &[u32],
) -> Result<(), SlideError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let meta = PyramidMeta {
        width: level0.width,
        height: level0.height,
        mpp,
        tile_size,
        levels: downsamples.iter().map(|&d| LevelMetaEntry { downsample: d }).collect(),
    };
    meta.validate()?;
    for (level, &ds) in downsamples.iter().enumerate() {
        let raster = if ds == 1 { level0.clone() } else { box_downsample(level0, ds as usize) };
        let cols = raster.width.div_ceil(tile_size);
        let rows = raster.height.div_ceil(tile_size);
        for row in 0..rows {
            for col in 0..cols {
                let tw = tile_size.min(raster.width - col * tile_size);
                let th = tile_size.min(raster.height - row * tile_size);
                let mut tile = RgbImage::white(tw, th);
                for y in 0..th {
                    let src = ((row * tile_size + y) * raster.width + col * tile_size) * 3;
                    let dst = y * tw * 3;
                    tile.data[dst..dst + tw * 3].copy_from_slice(&raster.data[src..src + tw * 3]);
                }
                write_ppm(dir.join(format!("L{level}_X{col}_Y{row}.ppm")), &tile)?;
            }
        }
    }
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Virtual single-level view of `src` resampled to a coarser mpp by exact
/// area averaging.
pub struct RescaledView<'a, S: RegionSource> {
    src: &'a S,
    /// source pixels per output pixel along each axis (>= 1)
    factor: f64,
    target_mpp: f64,
    width: usize,
    height: usize,
}

/// Rescale to `target_mpp` (default canonical resolution is 0.5). Returns
/// an error when the target is finer than the native resolution.
pub fn rescale_to_mpp<S: RegionSource>(
    src: &S,
    target_mpp: f64,
) -> Result<RescaledView<'_, S>, SlideError> {
    let native = src.mpp();
    if target_mpp < native - 1e-9 {
        return Err(SlideError::UpsamplingRequired { native, target: target_mpp });
    }
    let factor = (target_mpp / native).max(1.0);
    let width = ((src.width() as f64 / factor).round() as usize).max(1);
    let height = ((src.height() as f64 / factor).round() as usize).max(1);
    Ok(RescaledView { src, factor, target_mpp, width, height })
}

impl<S: RegionSource> RegionSource for RescaledView<'_, S> {
    fn levels(&self) -> Vec<LevelInfo> {
        vec![LevelInfo { width: self.width, height: self.height, downsample: 1 }]
    }

    fn mpp(&self) -> f64 {
        self.target_mpp
    }

    fn read_region(
        &self,
        level: usize,
        x: i64,
        y: i64,
        w: usize,
        h: usize,
    ) -> Result<RgbImage, SlideError> {
        if level != 0 {
            return Err(SlideError::MissingMetadata(format!("no level {level} in view")));
        }
        if (self.factor - 1.0).abs() < 1e-12 {
            return self.src.read_region(0, x, y, w, h);
        }
        let f = self.factor;
        let sx0 = (x as f64 * f).floor() as i64;
        let sy0 = (y as f64 * f).floor() as i64;
        let sx1 = ((x + w as i64) as f64 * f).ceil() as i64;
        let sy1 = ((y + h as i64) as f64 * f).ceil() as i64;
        let sw = (sx1 - sx0) as usize;
        let sh = (sy1 - sy0) as usize;
        let src = self.src.read_region(0, sx0, sy0, sw, sh)?;
        let mut out = RgbImage::white(w, h);
        for oy in 0..h {
            let top = (y + oy as i64) as f64 * f - sy0 as f64;
            let bottom = (y + oy as i64 + 1) as f64 * f - sy0 as f64;
            for ox in 0..w {
                let left = (x + ox as i64) as f64 * f - sx0 as f64;
                let right = (x + ox as i64 + 1) as f64 * f - sx0 as f64;
                let mut acc = [0.0f64; 3];
                let mut area = 0.0f64;
                let py0 = top.floor() as usize;
                let py1 = (bottom.ceil() as usize).min(sh);
                let px0 = left.floor() as usize;
                let px1 = (right.ceil() as usize).min(sw);
                for py in py0..py1 {
                    let wy = (bottom.min((py + 1) as f64) - top.max(py as f64)).max(0.0);
                    for px in px0..px1 {
                        let wx = (right.min((px + 1) as f64) - left.max(px as f64)).max(0.0);
                        let weight = wx * wy;
                        let p = src.pixel(px, py);
                        for c in 0..3 {
                            acc[c] += weight * p[c] as f64;
                        }
                        area += weight;
                    }
                }
                out.set_pixel(
                    ox,
                    oy,
                    [
                        (acc[0] / area).round() as u8,
                        (acc[1] / area).round() as u8,
                        (acc[2] / area).round() as u8,
                    ],
                );
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage { width: w, height: h, data: (0..w * h * 3).map(|_| rng.gen()).collect() }
    }

    #[test]
    fn single_raster_identity_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slide.ppm");
        let img = noisy_image(512, 512, 1);
        write_ppm(&path, &img).unwrap();
        let slide = open_single_raster(&path, 0.5).unwrap();
        assert_eq!(slide.levels().len(), 1);
        assert_eq!(slide.mpp(), 0.5);
        let region = slide.read_region(0, 0, 0, 512, 512).unwrap();
        assert_eq!(region, img);
    }

    #[test]
    fn out_of_bounds_fills_white() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slide.ppm");
        let mut img = noisy_image(64, 64, 2);
        // keep interior non-white
        for v in &mut img.data {
            *v = (*v).min(250);
        }
        write_ppm(&path, &img).unwrap();
        let slide = open_single_raster(&path, 0.5).unwrap();
        let region = slide.read_region(0, 54, 0, 20, 64).unwrap();
        for yy in 0..64 {
            for xx in 10..20 {
                assert_eq!(region.pixel(xx, yy), [255, 255, 255]);
            }
            assert_eq!(region.pixel(0, yy), img.pixel(54, yy));
        }
    }

    #[test]
    fn pyramid_roundtrip_and_level_downsample() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("pyr");
        let img = noisy_image(300, 200, 3);
        write_pyramid(&root, &img, 0.5, 128, &[1, 2, 4]).unwrap();
        let slide = open_pyramid(&root).unwrap();
        let levels = slide.levels();
        assert_eq!(levels.len(), 3);
        assert_eq!((levels[0].width, levels[0].height), (300, 200));
        assert_eq!((levels[1].width, levels[1].height), (150, 100));

        // full level-0 read reconstructs exactly
        assert_eq!(slide.read_region(0, 0, 0, 300, 200).unwrap(), img);

        // level-1 equals 2x box downsample of level 0 within rounding
        let l1 = slide.read_region(1, 0, 0, 150, 100).unwrap();
        let oracle = box_downsample(&img, 2);
        for (a, b) in l1.data.iter().zip(&oracle.data) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn tile_union_reconstructs_level() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("pyr");
        let img = noisy_image(512, 512, 9);
        write_pyramid(&root, &img, 0.5, 256, &[1]).unwrap();
        let slide = open_pyramid(&root).unwrap();
        let mut rebuilt = RgbImage::white(512, 512);
        for by in (0..512).step_by(256) {
            for bx in (0..512).step_by(256) {
                let block = slide.read_region(0, bx as i64, by as i64, 256, 256).unwrap();
                for y in 0..256 {
                    for x in 0..256 {
                        rebuilt.set_pixel(bx + x, by + y, block.pixel(x, y));
                    }
                }
            }
        }
        assert_eq!(rebuilt, img);
    }

    #[test]
    fn read_region_is_pure() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("pyr");
        write_pyramid(&root, &noisy_image(128, 128, 4), 0.5, 64, &[1, 2]).unwrap();
        let slide = open_pyramid(&root).unwrap();
        let a = slide.read_region(0, 17, 23, 80, 70).unwrap();
        let b = slide.read_region(0, 17, 23, 80, 70).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_meta_and_unknown_format() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty");
        std::fs::create_dir(&empty).unwrap();
        assert!(matches!(open_pyramid(&empty), Err(SlideError::MissingMetadata(_))));
        assert!(matches!(
            open_pyramid(dir.path().join("nope")),
            Err(SlideError::UnknownFormat(_))
        ));
    }

    #[test]
    fn rescale_factor_two_matches_box_average() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ppm");
        let img = noisy_image(128, 128, 5);
        write_ppm(&path, &img).unwrap();
        let slide = open_single_raster(&path, 0.25).unwrap();
        let view = rescale_to_mpp(&slide, 0.5).unwrap();
        assert_eq!(view.mpp(), 0.5);
        assert_eq!((view.width(), view.height()), (64, 64));
        let got = view.read_region(0, 0, 0, 64, 64).unwrap();
        let oracle = box_downsample(&img, 2);
        for (a, b) in got.data.iter().zip(&oracle.data) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn rescale_identity_and_upsampling_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ppm");
        let img = noisy_image(32, 32, 6);
        write_ppm(&path, &img).unwrap();
        let slide = open_single_raster(&path, 0.5).unwrap();
        let view = rescale_to_mpp(&slide, 0.5).unwrap();
        assert_eq!(view.read_region(0, 0, 0, 32, 32).unwrap(), img);
        assert!(matches!(
            rescale_to_mpp(&slide, 0.25),
            Err(SlideError::UpsamplingRequired { .. })
        ));
    }

    #[test]
    fn rescale_preserves_constant_color() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ppm");
        let img = RgbImage { width: 60, height: 60, data: vec![137; 60 * 60 * 3] };
        write_ppm(&path, &img).unwrap();
        let slide = open_single_raster(&path, 0.3).unwrap();
        let view = rescale_to_mpp(&slide, 0.5).unwrap();
        let out = view.read_region(0, 0, 0, view.width(), view.height()).unwrap();
        assert!(out.data.iter().all(|&v| v == 137));
    }
}
