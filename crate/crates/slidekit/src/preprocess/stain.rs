//! Macenko stain estimation and normalization.
//!
//! Optical density is taken as OD = −log10((I+1)/256) per channel; pixels
//! with OD norm below β are treated as background throughout.

use super::PreprocessError;
use crate::slide::RgbImage;
use nalgebra::{Matrix3, SymmetricEigen, Vector3};

/// Optical-density floor below which a pixel counts as background.
pub const MACENKO_BETA: f64 = 0.15;
/// Robust angle percentile (1st / 99th) for the extreme stain directions.
pub const MACENKO_ALPHA: f64 = 1.0;

const MIN_STAIN_PIXELS: usize = 1000;

/// Two unit stain vectors in OD space, haematoxylin first (the one with the
/// larger blue-channel OD component), plus 99th-percentile concentrations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainMatrix {
    pub vectors: [[f64; 3]; 2],
    pub max_concentrations: [f64; 2],
}

fn od(v: u8) -> f64 {
    -(((v as f64) + 1.0) / 256.0).log10()
}

fn od_pixel(p: [u8; 3]) -> Vector3<f64> {
    Vector3::new(od(p[0]), od(p[1]), od(p[2]))
}

fn od_to_intensity(v: f64) -> u8 {
    (256.0 * 10f64.powf(-v) - 1.0).clamp(0.0, 255.0).round() as u8
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((p / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

/// Least-squares concentrations of `od` against the two stain vectors,
/// clamped non-negative.
fn concentrations(vectors: &[[f64; 3]; 2], odv: &Vector3<f64>) -> [f64; 2] {
    let v1 = Vector3::from_column_slice(&vectors[0]);
    let v2 = Vector3::from_column_slice(&vectors[1]);
    // normal equations for the 3x2 system
    let a = v1.dot(&v1);
    let b = v1.dot(&v2);
    let d = v2.dot(&v2);
    let det = a * d - b * b;
    let r1 = v1.dot(odv);
    let r2 = v2.dot(odv);
    let c1 = (d * r1 - b * r2) / det;
    let c2 = (a * r2 - b * r1) / det;
    [c1.max(0.0), c2.max(0.0)]
}

pub fn macenko_fit(pixels: &[[u8; 3]]) -> Result<StainMatrix, PreprocessError> {
    let ods: Vec<Vector3<f64>> = pixels
        .iter()
        .map(|&p| od_pixel(p))
        .filter(|v| v.norm() >= MACENKO_BETA)
        .collect();
    if ods.len() < MIN_STAIN_PIXELS {
        return Err(PreprocessError::InsufficientStain { found: ods.len() });
    }

    let n = ods.len() as f64;
    let mean = ods.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for v in &ods {
        let d = v - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    // sort eigenpairs descending
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let l1 = eig.eigenvalues[order[0]];
    let l2 = eig.eigenvalues[order[1]];
    if l1 < 1e-12 || l2 < 1e-8 * l1 {
        return Err(PreprocessError::DegenerateStain);
    }
    let mut e1 = eig.eigenvectors.column(order[0]).into_owned();
    let e2 = eig.eigenvectors.column(order[1]).into_owned();
    // orient the plane basis so projections onto e1 are mostly positive,
    // keeping the angle distribution away from the ±π wrap
    if mean.dot(&e1) < 0.0 {
        e1 = -e1;
    }

    let mut angles: Vec<f64> = ods.iter().map(|v| v.dot(&e2).atan2(v.dot(&e1))).collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = percentile(&angles, MACENKO_ALPHA);
    let hi = percentile(&angles, 100.0 - MACENKO_ALPHA);

    let direction = |phi: f64| -> [f64; 3] {
        let mut v = e1 * phi.cos() + e2 * phi.sin();
        if v.sum() < 0.0 {
            v = -v;
        }
        // stains absorb: clamp tiny negative components and renormalize
        let mut arr = [v[0].max(0.0), v[1].max(0.0), v[2].max(0.0)];
        let norm = (arr[0] * arr[0] + arr[1] * arr[1] + arr[2] * arr[2]).sqrt();
        for a in &mut arr {
            *a /= norm;
        }
        arr
    };
    let (va, vb) = (direction(lo), direction(hi));
    // haematoxylin has the larger blue OD component
    let (h, e) = if va[2] >= vb[2] { (va, vb) } else { (vb, va) };
    let vectors = [h, e];

    let mut c1: Vec<f64> = Vec::with_capacity(ods.len());
    let mut c2: Vec<f64> = Vec::with_capacity(ods.len());
    for v in &ods {
        let c = concentrations(&vectors, v);
        c1.push(c[0]);
        c2.push(c[1]);
    }
    c1.sort_by(|a, b| a.partial_cmp(b).unwrap());
    c2.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(StainMatrix {
        vectors,
        max_concentrations: [percentile(&c1, 99.0).max(1e-6), percentile(&c2, 99.0).max(1e-6)],
    })
}

/// Fit on `pixels`, falling back to `reference` when the sample is
/// background-only or rank-deficient. Io/config errors still propagate.
pub fn fit_or_reference(
    pixels: &[[u8; 3]],
    reference: &StainMatrix,
) -> Result<StainMatrix, PreprocessError> {
    match macenko_fit(pixels) {
        Ok(m) => Ok(m),
        Err(PreprocessError::InsufficientStain { .. } | PreprocessError::DegenerateStain) => {
            Ok(*reference)
        }
        Err(e) => Err(e),
    }
}

/// Map the image into the reference stain space: per-pixel concentrations
/// against `fitted`, scaled by the reference/fitted concentration ratios,
/// reconstructed with the reference vectors. Background pixels (OD norm
/// < β) pass through unchanged.
pub fn macenko_normalize(
    image: &RgbImage,
    fitted: &StainMatrix,
    reference: &StainMatrix,
) -> RgbImage {
    let scale = [
        reference.max_concentrations[0] / fitted.max_concentrations[0],
        reference.max_concentrations[1] / fitted.max_concentrations[1],
    ];
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let p = image.pixel(x, y);
            let odv = od_pixel(p);
            if odv.norm() < MACENKO_BETA {
                continue;
            }
            let c = concentrations(&fitted.vectors, &odv);
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let od_out = c[0] * scale[0] * reference.vectors[0][ch]
                    + c[1] * scale[1] * reference.vectors[1][ch];
                px[ch] = od_to_intensity(od_out);
            }
            out.set_pixel(x, y, px);
        }
    }
    out
}
