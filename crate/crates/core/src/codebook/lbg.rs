//! Codebook fitting by binary splitting with Lloyd refinement.
//!
//! Starts from the global mean; each doubling replaces centroid `c` with
//! `c(1+eps)` and `c(1-eps)`, then alternates nearest-centroid assignment
//! and centroid-mean updates until the relative distortion improvement
//! falls below the configured threshold. All internal arithmetic is f64.

use super::CodebookError;
use crate::autodiff::Real;

#[derive(Debug, Clone)]
pub struct LbgConfig {
    /// Number of codewords to fit; must be a power of two.
    pub target_size: usize,
    pub split_perturbation: f64,
    pub max_iterations: usize,
    /// Relative distortion-change threshold per Lloyd phase.
    pub convergence_threshold: f64,
}

impl Default for LbgConfig {
    fn default() -> Self {
        LbgConfig {
            target_size: 256,
            split_perturbation: 0.01,
            max_iterations: 100,
            convergence_threshold: 1e-5,
        }
    }
}

impl LbgConfig {
    pub fn with_size(target_size: usize) -> Self {
        LbgConfig {
            target_size,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), CodebookError> {
        if self.target_size == 0 || !self.target_size.is_power_of_two() {
            return Err(CodebookError::Lbg(format!(
                "target_size {} is not a power of two",
                self.target_size
            )));
        }
        if self.split_perturbation <= 0.0 {
            return Err(CodebookError::Lbg("split_perturbation must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(CodebookError::Lbg("max_iterations must be positive".into()));
        }
        if self.convergence_threshold <= 0.0 {
            return Err(CodebookError::Lbg(
                "convergence_threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LbgOutcome<F: Real> {
    /// `target_size` codewords, row-major, in splitting-schedule order.
    pub codewords: Vec<F>,
    /// Mean distortion after every Lloyd iteration, across all phases.
    pub distortion_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean over points of the (unsquared) distance to their nearest centroid.
fn distortion(points: &[f64], dim: usize, centroids: &[f64]) -> f64 {
    let n = points.len() / dim;
    let k = centroids.len() / dim;
    let mut total = 0.0;
    for i in 0..n {
        let p = &points[i * dim..(i + 1) * dim];
        let mut best = f64::INFINITY;
        for c in 0..k {
            let d = sq_dist(p, &centroids[c * dim..(c + 1) * dim]);
            if d < best {
                best = d;
            }
        }
        total += best.sqrt();
    }
    total / n as f64
}

fn assign(points: &[f64], dim: usize, centroids: &[f64], out: &mut Vec<usize>) {
    let n = points.len() / dim;
    let k = centroids.len() / dim;
    out.clear();
    for i in 0..n {
        let p = &points[i * dim..(i + 1) * dim];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let d = sq_dist(p, &centroids[c * dim..(c + 1) * dim]);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        out.push(best);
    }
}

/// Moves each empty centroid onto the as-yet-undonated point with the
/// largest distance to its assigned centroid, reassigning that point.
fn fix_empty_cells(points: &[f64], dim: usize, centroids: &[f64], assignment: &mut [usize]) {
    let n = points.len() / dim;
    let k = centroids.len() / dim;
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    let mut donated = vec![false; n];
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut worst_i = None;
        let mut worst_d = -1.0;
        for i in 0..n {
            if donated[i] || counts[assignment[i]] <= 1 {
                continue;
            }
            let d = sq_dist(
                &points[i * dim..(i + 1) * dim],
                &centroids[assignment[i] * dim..(assignment[i] + 1) * dim],
            );
            if d > worst_d {
                worst_d = d;
                worst_i = Some(i);
            }
        }
        if let Some(i) = worst_i {
            counts[assignment[i]] -= 1;
            assignment[i] = c;
            counts[c] = 1;
            donated[i] = true;
        }
    }
}

fn recompute_means(points: &[f64], dim: usize, assignment: &[usize], centroids: &mut [f64]) {
    let k = centroids.len() / dim;
    let mut sums = vec![0.0f64; centroids.len()];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for j in 0..dim {
            sums[a * dim + j] += points[i * dim + j];
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            continue; // keep previous position; empty cells were already handled
        }
        for j in 0..dim {
            centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
        }
    }
}

fn lloyd(points: &[f64], dim: usize, centroids: &mut Vec<f64>, cfg: &LbgConfig, trace: &mut Vec<f64>) {
    let mut assignment = Vec::new();
    let mut prev = f64::INFINITY;
    for _ in 0..cfg.max_iterations {
        assign(points, dim, centroids, &mut assignment);
        fix_empty_cells(points, dim, centroids, &mut assignment);
        recompute_means(points, dim, &assignment, centroids);
        let d = distortion(points, dim, centroids);
        trace.push(d);
        if prev.is_finite() {
            if prev == 0.0 || (prev - d).abs() <= cfg.convergence_threshold * prev {
                break;
            }
        }
        prev = d;
    }
}

/// Fits `cfg.target_size` codewords to `points` (flat, row-major, dimension
/// `dim`). Deterministic given the point order and the configuration.
pub fn lbg_fit<F: Real>(points: &[F], dim: usize, cfg: &LbgConfig) -> Result<LbgOutcome<F>, CodebookError> {
    cfg.validate()?;
    if dim == 0 || points.len() % dim != 0 {
        return Err(CodebookError::Lbg(format!(
            "point buffer length {} is not a multiple of dim {}",
            points.len(),
            dim
        )));
    }
    let n = points.len() / dim;
    if n < cfg.target_size {
        return Err(CodebookError::Lbg(format!(
            "{} points cannot support {} codewords",
            n, cfg.target_size
        )));
    }
    let pts: Vec<f64> = points.iter().map(|v| v.as_f64()).collect();
    if pts.iter().any(|v| !v.is_finite()) {
        return Err(CodebookError::Lbg("non-finite input point".into()));
    }

    // global mean as the single starting centroid
    let mut centroids = vec![0.0f64; dim];
    for i in 0..n {
        for j in 0..dim {
            centroids[j] += pts[i * dim + j];
        }
    }
    for c in centroids.iter_mut() {
        *c /= n as f64;
    }

    let mut trace = Vec::new();
    lloyd(&pts, dim, &mut centroids, cfg, &mut trace);
    while centroids.len() / dim < cfg.target_size {
        let eps = cfg.split_perturbation;
        let mut split = Vec::with_capacity(centroids.len() * 2);
        for c in centroids.chunks(dim) {
            split.extend(c.iter().map(|v| v * (1.0 + eps)));
            split.extend(c.iter().map(|v| v * (1.0 - eps)));
        }
        centroids = split;
        lloyd(&pts, dim, &mut centroids, cfg, &mut trace);
    }

    Ok(LbgOutcome {
        codewords: centroids.iter().map(|&v| F::from_f64(v)).collect(),
        distortion_trace: trace,
    })
}
