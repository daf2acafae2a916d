//! Quantization of feature sub-vectors against a (sub-)codebook, with
//! straight-through gradients and the paired VQ / commitment loss terms.
//!
//! Distances accumulate the sum of squares in f64 so nearest-codeword ties
//! are stable across batch layouts; ties break toward the lowest index.

use thiserror::Error;

use crate::autodiff::{GradError, Graph, NodeId, Real};
use crate::codebook::{CodebookError, NestedCodebook, ProgressiveCodebook};

#[derive(Debug, Error)]
pub enum VqError {
    #[error("empty codebook")]
    EmptyCodebook,
    #[error("dimension mismatch: vector has {got}, codebook dim is {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("segment count {got} does not match expected {want}")]
    SegmentCount { got: usize, want: usize },
    #[error("feature length {len} is not divisible by segment dim {dim}")]
    BadSplit { len: usize, dim: usize },
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("{0}")]
    Invalid(String),
}

/// Encoder output split into `M` contiguous sub-vectors of dimension `d`.
#[derive(Debug, Clone)]
pub struct FeatureBlock<F: Real> {
    pub segments: Vec<Vec<F>>,
    /// The encoder output this block was split from.
    pub source: Vec<F>,
}

impl<F: Real> FeatureBlock<F> {
    pub fn split(source: Vec<F>, dim: usize) -> Result<Self, VqError> {
        if dim == 0 || source.len() % dim != 0 || source.is_empty() {
            return Err(VqError::BadSplit {
                len: source.len(),
                dim,
            });
        }
        let segments = source.chunks(dim).map(|c| c.to_vec()).collect();
        Ok(FeatureBlock { segments, source })
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn segment_dim(&self) -> usize {
        self.source.len() / self.segments.len()
    }
}

/// Per-segment codeword indices, reconstructions, and the exact bit count.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult<F: Real> {
    pub indices: Vec<usize>,
    pub quantized: Vec<Vec<F>>,
    pub bits_used: u32,
    pub per_segment_levels: Vec<u8>,
}

/// Per-level commitment weights and drift weights.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub beta_per_level: Vec<f64>,
    pub eta_per_level: Vec<f64>,
}

impl LossConfig {
    pub fn new(beta_per_level: Vec<f64>, eta_per_level: Vec<f64>) -> Result<Self, VqError> {
        if beta_per_level.len() != eta_per_level.len() || beta_per_level.is_empty() {
            return Err(VqError::Invalid(
                "beta and eta lists must be non-empty and of equal length".into(),
            ));
        }
        if beta_per_level.iter().any(|&b| b <= 0.0) {
            return Err(VqError::Invalid("beta values must be > 0".into()));
        }
        if eta_per_level.iter().any(|&e| e < 0.0) {
            return Err(VqError::Invalid("eta values must be >= 0".into()));
        }
        Ok(LossConfig {
            beta_per_level,
            eta_per_level,
        })
    }

    pub fn uniform(max_level: u8, beta: f64, eta: f64) -> Result<Self, VqError> {
        Self::new(
            vec![beta; max_level as usize],
            vec![eta; max_level as usize],
        )
    }

    pub fn max_level(&self) -> u8 {
        self.beta_per_level.len() as u8
    }

    pub fn beta(&self, level: u8) -> f64 {
        self.beta_per_level[level as usize - 1]
    }

    pub fn eta(&self, level: u8) -> f64 {
        self.eta_per_level[level as usize - 1]
    }
}

/// Either codebook flavor, borrowed for quantization/evaluation.
#[derive(Debug, Clone, Copy)]
pub enum CodebookView<'a, F: Real> {
    Nested(&'a NestedCodebook<F>),
    Progressive(&'a ProgressiveCodebook<F>),
}

impl<'a, F: Real> CodebookView<'a, F> {
    pub fn dim(&self) -> usize {
        match self {
            CodebookView::Nested(cb) => cb.dim(),
            CodebookView::Progressive(cb) => cb.dim(),
        }
    }

    pub fn max_level(&self) -> u8 {
        match self {
            CodebookView::Nested(cb) => cb.max_level(),
            CodebookView::Progressive(cb) => cb.max_level(),
        }
    }

    /// Candidate codewords at a level: the nested prefix, or the
    /// materialized Minkowski sums.
    pub fn candidates(&self, level: u8) -> Result<std::borrow::Cow<'a, [F]>, VqError> {
        match self {
            CodebookView::Nested(cb) => Ok(std::borrow::Cow::Borrowed(cb.sub_codebook(level)?)),
            CodebookView::Progressive(cb) => Ok(std::borrow::Cow::Owned(cb.materialize(level)?)),
        }
    }
}

/// Index and codeword minimizing squared Euclidean distance to `x`.
pub fn nearest_codeword<'a, F: Real>(
    x: &[F],
    codewords: &'a [F],
    dim: usize,
) -> Result<(usize, &'a [F]), VqError> {
    if codewords.is_empty() || dim == 0 {
        return Err(VqError::EmptyCodebook);
    }
    if x.len() != dim || codewords.len() % dim != 0 {
        return Err(VqError::DimMismatch {
            got: x.len(),
            want: dim,
        });
    }
    let count = codewords.len() / dim;
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for k in 0..count {
        let cw = &codewords[k * dim..(k + 1) * dim];
        let mut d = 0.0f64;
        for (xv, cv) in x.iter().zip(cw) {
            let diff = (*xv - *cv).as_f64();
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    Ok((best, &codewords[best * dim..(best + 1) * dim]))
}

/// Quantizes every segment of a feature block at its own level.
/// `bits_used` is the exact sum of the per-segment levels.
pub fn quantize_block<F: Real>(
    fb: &FeatureBlock<F>,
    cb: &CodebookView<'_, F>,
    levels: &[u8],
) -> Result<QuantizationResult<F>, VqError> {
    if levels.len() != fb.num_segments() {
        return Err(VqError::SegmentCount {
            got: levels.len(),
            want: fb.num_segments(),
        });
    }
    let dim = cb.dim();
    if fb.segment_dim() != dim {
        return Err(VqError::DimMismatch {
            got: fb.segment_dim(),
            want: dim,
        });
    }
    let mut indices = Vec::with_capacity(levels.len());
    let mut quantized = Vec::with_capacity(levels.len());
    let mut bits = 0u32;
    for (segment, &level) in fb.segments.iter().zip(levels) {
        let cands = cb.candidates(level)?;
        let (idx, cw) = nearest_codeword(segment, &cands, dim)?;
        indices.push(idx);
        quantized.push(cw.to_vec());
        bits += level as u32;
    }
    Ok(QuantizationResult {
        indices,
        quantized,
        bits_used: bits,
        per_segment_levels: levels.to_vec(),
    })
}

/// Builds `||sg(x) - z||^2 + beta * ||x - sg(z)||^2` on the graph.
/// Gradients reach the codewords through the first term only and the
/// encoder through the second term only.
pub fn vq_loss_terms<F: Real>(
    g: &mut Graph<F>,
    x: NodeId,
    z: NodeId,
    beta: F,
) -> Result<NodeId, GradError> {
    let sg_x = g.stop_grad(x);
    let vq_diff = g.sub(sg_x, z)?;
    let vq = g.squared_l2(vq_diff);
    let sg_z = g.stop_grad(z);
    let commit_diff = g.sub(x, sg_z)?;
    let commit = g.squared_l2(commit_diff);
    let commit_weighted = g.scale(commit, beta);
    g.add(vq, commit_weighted)
}

/// Sum of squared drifts between the live codeword prefix and a frozen
/// snapshot. An empty prefix contributes a constant zero.
pub fn drift_penalty<F: Real>(
    g: &mut Graph<F>,
    current_prefix: Option<NodeId>,
    snapshot_prefix: &[F],
) -> Result<NodeId, VqError> {
    let current = match current_prefix {
        None => {
            if !snapshot_prefix.is_empty() {
                return Err(VqError::Invalid(
                    "snapshot provided for an empty prefix".into(),
                ));
            }
            return Ok(g.scalar(F::zero()));
        }
        Some(n) => n,
    };
    let (rows, cols) = g.shape(current);
    if rows * cols != snapshot_prefix.len() {
        return Err(VqError::Invalid(format!(
            "prefix has {} values, snapshot has {}",
            rows * cols,
            snapshot_prefix.len()
        )));
    }
    let snap = g.constant(rows, cols, snapshot_prefix.to_vec())?;
    let diff = g.sub(current, snap)?;
    Ok(g.squared_l2(diff))
}

/// Graph-side result of quantizing a `[batch, M*d]` feature matrix.
pub struct BatchQuant {
    /// Per-segment straight-through nodes (decoder path, gradients to the
    /// encoder).
    pub st_segments: Vec<NodeId>,
    /// Per-segment gathered codeword nodes (VQ-loss path, gradients to the
    /// codebook).
    pub row_segments: Vec<NodeId>,
    /// Per-segment slices of the feature matrix.
    pub feature_segments: Vec<NodeId>,
    /// Concatenation of `st_segments`, shaped `[batch, M*d]`.
    pub st_concat: NodeId,
    /// Codeword index per segment per batch row.
    pub indices: Vec<Vec<usize>>,
    pub bits_per_sample: u32,
}

/// Quantizes each column segment of `features` against the first `2^level`
/// rows of the codebook parameter node, wiring straight-through and
/// codeword-gather nodes for the loss terms.
pub fn quantize_batch_nested<F: Real>(
    g: &mut Graph<F>,
    features: NodeId,
    codebook: NodeId,
    levels: &[u8],
    dim: usize,
    frozen_indices: Option<&[Vec<usize>]>,
) -> Result<BatchQuant, VqError> {
    let (_, total_cols) = g.shape(features);
    let (cb_rows, cb_dim) = g.shape(codebook);
    if cb_dim != dim || total_cols != levels.len() * dim {
        return Err(VqError::DimMismatch {
            got: total_cols,
            want: levels.len() * dim,
        });
    }
    let mut st_segments = Vec::with_capacity(levels.len());
    let mut row_segments = Vec::with_capacity(levels.len());
    let mut feature_segments = Vec::with_capacity(levels.len());
    let mut indices = Vec::with_capacity(levels.len());
    let mut bits = 0u32;
    for (m, &level) in levels.iter().enumerate() {
        let prefix = 1usize << level;
        if prefix > cb_rows {
            return Err(VqError::Codebook(CodebookError::LevelOutOfRange {
                level,
                max_level: cb_rows.trailing_zeros() as u8,
            }));
        }
        let seg = g.slice_cols(features, m * dim, dim)?;
        let idx: Vec<usize> = match frozen_indices {
            Some(frozen) => frozen[m].clone(),
            None => {
                let seg_vals = g.value(seg).to_vec();
                let cb_vals = g.value(codebook)[..prefix * dim].to_vec();
                seg_vals
                    .chunks(dim)
                    .map(|row| nearest_codeword(row, &cb_vals, dim).map(|(i, _)| i))
                    .collect::<Result<_, _>>()?
            }
        };
        let rows = g.gather_rows(codebook, &idx)?;
        let row_vals = g.value(rows).to_vec();
        let st = g.straight_through(seg, &row_vals)?;
        st_segments.push(st);
        row_segments.push(rows);
        feature_segments.push(seg);
        indices.push(idx);
        bits += level as u32;
    }
    let st_concat = g.concat_cols(&st_segments)?;
    Ok(BatchQuant {
        st_segments,
        row_segments,
        feature_segments,
        st_concat,
        indices,
        bits_per_sample: bits,
    })
}

/// Progressive counterpart: the codeword for each row is the running sum of
/// one gathered difference vector per level, so gradients reach the pair
/// parameters through the gathers. The summation starts from a zero
/// constant so graph values match `ProgressiveCodebook::materialize`
/// bit-exactly.
pub fn quantize_batch_progressive<F: Real>(
    g: &mut Graph<F>,
    features: NodeId,
    pair_nodes: &[NodeId],
    levels: &[u8],
    dim: usize,
    frozen_indices: Option<&[Vec<usize>]>,
) -> Result<BatchQuant, VqError> {
    let (batch, total_cols) = g.shape(features);
    if total_cols != levels.len() * dim {
        return Err(VqError::DimMismatch {
            got: total_cols,
            want: levels.len() * dim,
        });
    }
    // materialize candidate tables from current pair values, once per level in use
    let max_used = *levels.iter().max().unwrap_or(&1);
    if (max_used as usize) > pair_nodes.len() {
        return Err(VqError::Codebook(CodebookError::LevelOutOfRange {
            level: max_used,
            max_level: pair_nodes.len() as u8,
        }));
    }
    let pairs: Vec<(Vec<F>, Vec<F>)> = pair_nodes
        .iter()
        .map(|&p| {
            let v = g.value(p);
            (v[..dim].to_vec(), v[dim..].to_vec())
        })
        .collect();
    let pcb = ProgressiveCodebook::new(dim, pairs)?;

    let mut st_segments = Vec::with_capacity(levels.len());
    let mut row_segments = Vec::with_capacity(levels.len());
    let mut feature_segments = Vec::with_capacity(levels.len());
    let mut indices = Vec::with_capacity(levels.len());
    let mut bits = 0u32;
    for (m, &level) in levels.iter().enumerate() {
        let seg = g.slice_cols(features, m * dim, dim)?;
        let idx: Vec<usize> = match frozen_indices {
            Some(frozen) => frozen[m].clone(),
            None => {
                let table = pcb.materialize(level)?;
                let seg_vals = g.value(seg).to_vec();
                seg_vals
                    .chunks(dim)
                    .map(|row| nearest_codeword(row, &table, dim).map(|(i, _)| i))
                    .collect::<Result<_, _>>()?
            }
        };
        // z = 0 + sum_j gather(pair_j, bit_j)
        let zero = g.constant(batch, dim, vec![F::zero(); batch * dim])?;
        let mut acc = zero;
        for j in 1..=level {
            let bit_rows: Vec<usize> = idx
                .iter()
                .map(|&i| (i >> (level - j)) & 1)
                .collect();
            let gathered = g.gather_rows(pair_nodes[j as usize - 1], &bit_rows)?;
            acc = g.add(acc, gathered)?;
        }
        let row_vals = g.value(acc).to_vec();
        let st = g.straight_through(seg, &row_vals)?;
        st_segments.push(st);
        row_segments.push(acc);
        feature_segments.push(seg);
        indices.push(idx);
        bits += level as u32;
    }
    let st_concat = g.concat_cols(&st_segments)?;
    Ok(BatchQuant {
        st_segments,
        row_segments,
        feature_segments,
        st_concat,
        indices,
        bits_per_sample: bits,
    })
}
