//! Central finite-difference gradient checking in 64-bit mode.
//!
//! The oracle only re-runs the forward pass at perturbed inputs; it never
//! looks at the analytic backward implementation it is checking.

use super::{Graph, NodeId, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::Rng;

pub type BuildFn<'a> = &'a dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, TensorError>;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

fn forward_loss(build: BuildFn, inputs: &[Tensor<f64>]) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let loss = build(&mut g, &ids)?;
    Ok(g.value(loss).data()[0])
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    // Near-zero gradients are compared absolutely; FD noise on O(1) losses
    // sits around 1e-10, far under the 1e-4 suite tolerance.
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Check d(loss)/d(input) for every coordinate of every input.
pub fn check_all(
    build: BuildFn,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Result<GradCheckReport, TensorError> {
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    check_coords(build, inputs, eps, &coords)
}

/// Check a random sample of coordinates; for models too large to sweep.
pub fn check_sampled(
    build: BuildFn,
    inputs: &[Tensor<f64>],
    eps: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport, TensorError> {
    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    coords.shuffle(rng);
    coords.truncate(samples);
    check_coords(build, inputs, eps, &coords)
}

fn check_coords(
    build: BuildFn,
    inputs: &[Tensor<f64>],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport, TensorError> {
    // analytic pass
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).map(|s| s.to_vec()).unwrap_or_default())
        .collect();

    let mut max_err = 0.0f64;
    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for &(i, j) in coords {
        let orig = perturbed[i].data()[j];
        perturbed[i].data_mut()[j] = orig + eps;
        let plus = forward_loss(build, &perturbed)?;
        perturbed[i].data_mut()[j] = orig - eps;
        let minus = forward_loss(build, &perturbed)?;
        perturbed[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = if analytic[i].is_empty() { 0.0 } else { analytic[i][j] };
        max_err = max_err.max(rel_err(a, numeric));
    }
    Ok(GradCheckReport { max_rel_err: max_err, coords_checked: coords.len() })
}
