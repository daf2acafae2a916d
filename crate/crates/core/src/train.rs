//! Training procedures: encoder/decoder warm start, LBG codebook
//! initialization on encoded sub-vectors, joint adaptation of the nested
//! codebook level by level under the cumulative multi-level loss, the
//! mixed-resolution per-segment schedule, and progressive training of
//! difference pairs. Everything is deterministic under the plan seed.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::autodiff::{GradError, Graph, NodeId, ParamId, Params, Real, Tensor};
use crate::codebook::{
    lbg_fit, CodebookError, LbgConfig, LbgOutcome, NestedCodebook, ProgressiveCodebook,
};
use crate::data::Dataset;
use crate::model::{argmax, ModelError, SplitClassifier};
use crate::vq::{
    drift_penalty, quantize_batch_nested, quantize_batch_progressive, quantize_block,
    vq_loss_terms, CodebookView, FeatureBlock, LossConfig, VqError,
};

// RNG stream ids, all derived from the single plan seed.
const STREAM_STAGE1: u64 = 10;
const STREAM_STAGE3: u64 = 11;
const STREAM_MIXED: u64 = 12;
const STREAM_PROGRESSIVE: u64 = 13;
const STREAM_PAIR_INIT: u64 = 14;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("plan: {0}")]
    BadPlan(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    VariableRate,
    MixedResolution,
    Progressive,
}

#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub schedule: Schedule,
    pub stage1_epochs: usize,
    /// Epochs per quantization level (variable-rate and progressive stage 3).
    pub epochs_per_level: usize,
    /// Epochs per mixed-resolution phase.
    pub epochs_per_phase: usize,
    /// Joint epochs for a single-rate baseline model.
    pub single_rate_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Mixed schedule order: raise one segment all the way before the next
    /// (default), or one level across all segments at a time.
    pub mixed_round_robin: bool,
    pub seed: u64,
    pub loss: LossConfig,
    pub lbg: LbgConfig,
    pub max_level: u8,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadPlan("batch_size must be positive".into()));
        }
        if self.max_level == 0 {
            return Err(TrainError::BadPlan("max_level must be positive".into()));
        }
        if self.loss.max_level() != self.max_level {
            return Err(TrainError::BadPlan(format!(
                "loss config covers {} levels, plan has {}",
                self.loss.max_level(),
                self.max_level
            )));
        }
        Ok(())
    }

    pub fn codebook_size(&self) -> usize {
        1 << self.max_level
    }
}

/// One line per epoch: stage, level, epoch, mean total loss, per-term
/// components, wall time.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub stage: u8,
    pub level: u8,
    pub epoch: usize,
    pub total: f64,
    pub task: f64,
    pub vq: f64,
    pub commit: f64,
    pub drift: f64,
    pub wall_ms: f64,
}

impl EpochRecord {
    pub fn line(&self) -> String {
        format!(
            "stage={} level={} epoch={} total={:.6} task={:.6} vq={:.6} commit={:.6} drift={:.6} wall_ms={:.3}",
            self.stage, self.level, self.epoch, self.total, self.task, self.vq, self.commit,
            self.drift, self.wall_ms
        )
    }
}

/// Collects epoch records and optionally streams them to a log file.
#[derive(Debug, Default)]
pub struct TrainLogger {
    out: Option<std::io::BufWriter<std::fs::File>>,
    pub records: Vec<EpochRecord>,
}

impl TrainLogger {
    pub fn memory() -> Self {
        TrainLogger::default()
    }

    pub fn to_file(path: &Path) -> Result<Self, TrainError> {
        let file = std::fs::File::create(path).map_err(|e| TrainError::Io(format!("{path:?}: {e}")))?;
        Ok(TrainLogger {
            out: Some(std::io::BufWriter::new(file)),
            records: Vec::new(),
        })
    }

    fn log(&mut self, rec: EpochRecord) {
        if let Some(out) = &mut self.out {
            let _ = writeln!(out, "{}", rec.line());
            let _ = out.flush();
        }
        self.records.push(rec);
    }
}

/// Plain SGD with momentum. Velocity buffers are per parameter and are
/// reset by constructing a fresh optimizer.
#[derive(Debug, Clone)]
pub struct SgdMomentum<F: Real> {
    lr: F,
    momentum: F,
    velocity: Vec<Option<Vec<F>>>,
}

impl<F: Real> SgdMomentum<F> {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr: F::from_f64(learning_rate),
            momentum: F::from_f64(momentum),
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params<F>, ids: &[ParamId]) {
        for &id in ids {
            if self.velocity.len() <= id {
                self.velocity.resize(id + 1, None);
            }
            let tensor = params.get_mut(id);
            if !tensor.requires_grad {
                continue;
            }
            let grad = match &tensor.grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let vel = self.velocity[id].get_or_insert_with(|| vec![F::zero(); grad.len()]);
            for ((v, g), p) in vel.iter_mut().zip(&grad).zip(tensor.data.iter_mut()) {
                *v = *v * self.momentum + *g;
                *p -= self.lr * *v;
            }
        }
    }
}

/// Level-training state: the active level, the codebook parameter, the
/// frozen prefix snapshot the drift penalty compares against, and the
/// optimizer (reset per level).
#[derive(Debug)]
pub struct StageState<F: Real> {
    pub level: u8,
    pub codebook: ParamId,
    pub snapshot: Vec<F>,
    pub optimizer: SgdMomentum<F>,
}

pub struct BatchData<'a, F: Real> {
    pub inputs: &'a [F],
    pub rows: usize,
    pub labels: &'a [usize],
}

/// Graph handle plus per-term values of one batch loss.
pub struct LossBuild {
    pub total: NodeId,
    pub task: f64,
    pub vq: f64,
    pub commit: f64,
    pub drift: f64,
    /// Nearest-codeword assignments actually used: per inner level (or the
    /// single allocation), per segment, per batch row.
    pub assignments: Vec<Vec<Vec<usize>>>,
}

fn seg_levels(level: u8, segments: usize) -> Vec<u8> {
    vec![level; segments]
}

fn add_quant_terms<F: Real>(
    g: &mut Graph<F>,
    bq: &crate::vq::BatchQuant,
    betas: &[F],
    rows: usize,
    total: NodeId,
    vq_acc: &mut f64,
    commit_acc: &mut f64,
) -> Result<NodeId, TrainError> {
    let inv_rows = F::from_f64(1.0 / rows as f64);
    let mut total = total;
    for (m, (&x_seg, &z_seg)) in bq
        .feature_segments
        .iter()
        .zip(&bq.row_segments)
        .enumerate()
    {
        let pair = vq_loss_terms(g, x_seg, z_seg, betas[m])?;
        let scaled = g.scale(pair, inv_rows);
        total = g.add(total, scaled)?;
        // decompose for logging: ||sg(x)-z||^2 part recomputed from values
        let xv = g.value(x_seg);
        let zv = g.value(z_seg);
        let vq_val: f64 = xv
            .iter()
            .zip(zv)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        *vq_acc += vq_val / rows as f64;
        *commit_acc += betas[m].as_f64() * vq_val / rows as f64;
    }
    Ok(total)
}

/// The level-`level` training objective for a nested codebook: for each
/// inner level `j <= level`, a decoder pass on features quantized with the
/// first `2^j` codewords plus the VQ/commitment pair per segment, and the
/// drift penalty against the prefix snapshot.
#[allow(clippy::too_many_arguments)]
pub fn build_cumulative_loss<F: Real>(
    g: &mut Graph<F>,
    model: &SplitClassifier<F>,
    codebook: ParamId,
    level: u8,
    loss_cfg: &LossConfig,
    snapshot: &[F],
    batch: &BatchData<'_, F>,
    frozen: Option<&[Vec<Vec<usize>>]>,
) -> Result<LossBuild, TrainError> {
    let dim = model.segment_dim();
    let segments = model.segments();
    let x = g.constant(batch.rows, model.input_dim(), batch.inputs.to_vec())?;
    let xe = model.encode_graph(g, x)?;
    let cb_node = g.param(&model.params, codebook);

    let mut total: Option<NodeId> = None;
    let mut task_acc = 0.0;
    let mut vq_acc = 0.0;
    let mut commit_acc = 0.0;
    let mut assignments = Vec::with_capacity(level as usize);
    for j in 1..=level {
        let bq = quantize_batch_nested(
            g,
            xe,
            cb_node,
            &seg_levels(j, segments),
            dim,
            frozen.map(|f| &f[j as usize - 1][..]),
        )?;
        let logits = model.decode_graph(g, bq.st_concat)?;
        let task = g.cross_entropy(logits, batch.labels)?;
        task_acc += g.scalar_value(task).as_f64();
        let mut level_total = task;
        let betas = vec![F::from_f64(loss_cfg.beta(j)); segments];
        level_total = add_quant_terms(g, &bq, &betas, batch.rows, level_total, &mut vq_acc, &mut commit_acc)?;
        assignments.push(bq.indices);
        total = Some(match total {
            None => level_total,
            Some(t) => g.add(t, level_total)?,
        });
    }
    let mut total = total.expect("level >= 1");

    let mut drift_val = 0.0;
    if level >= 2 {
        let prefix_rows = 1usize << (level - 1);
        let prefix = g.gather_rows(cb_node, &(0..prefix_rows).collect::<Vec<_>>())?;
        let drift = drift_penalty(g, Some(prefix), snapshot)?;
        let eta = loss_cfg.eta(level);
        let weighted = g.scale(drift, F::from_f64(eta));
        drift_val = g.scalar_value(weighted).as_f64();
        total = g.add(total, weighted)?;
    }

    Ok(LossBuild {
        total,
        task: task_acc,
        vq: vq_acc,
        commit: commit_acc,
        drift: drift_val,
        assignments,
    })
}

/// Single-allocation objective: one decoder pass at the given per-segment
/// levels plus per-segment VQ/commitment terms; optionally a drift penalty
/// for a freshly extended prefix. Used by the mixed-resolution phases and
/// by single-rate baselines.
#[allow(clippy::too_many_arguments)]
pub fn build_allocation_loss<F: Real>(
    g: &mut Graph<F>,
    model: &SplitClassifier<F>,
    codebook: ParamId,
    allocation: &[u8],
    loss_cfg: &LossConfig,
    drift_level: Option<u8>,
    snapshot: &[F],
    batch: &BatchData<'_, F>,
    frozen: Option<&[Vec<Vec<usize>>]>,
) -> Result<LossBuild, TrainError> {
    let dim = model.segment_dim();
    let x = g.constant(batch.rows, model.input_dim(), batch.inputs.to_vec())?;
    let xe = model.encode_graph(g, x)?;
    let cb_node = g.param(&model.params, codebook);

    let bq = quantize_batch_nested(g, xe, cb_node, allocation, dim, frozen.map(|f| &f[0][..]))?;
    let logits = model.decode_graph(g, bq.st_concat)?;
    let task = g.cross_entropy(logits, batch.labels)?;
    let task_val = g.scalar_value(task).as_f64();
    let betas: Vec<F> = allocation
        .iter()
        .map(|&l| F::from_f64(loss_cfg.beta(l)))
        .collect();
    let mut vq_acc = 0.0;
    let mut commit_acc = 0.0;
    let mut total = add_quant_terms(g, &bq, &betas, batch.rows, task, &mut vq_acc, &mut commit_acc)?;

    let mut drift_val = 0.0;
    if let Some(l) = drift_level {
        if l >= 2 {
            let prefix_rows = 1usize << (l - 1);
            let prefix = g.gather_rows(cb_node, &(0..prefix_rows).collect::<Vec<_>>())?;
            let drift = drift_penalty(g, Some(prefix), snapshot)?;
            let weighted = g.scale(drift, F::from_f64(loss_cfg.eta(l)));
            drift_val = g.scalar_value(weighted).as_f64();
            total = g.add(total, weighted)?;
        }
    }

    Ok(LossBuild {
        total,
        task: task_val,
        vq: vq_acc,
        commit: commit_acc,
        drift: drift_val,
        assignments: vec![bq.indices],
    })
}

/// Progressive counterpart of [`build_cumulative_loss`]: codewords are the
/// materialized Minkowski sums of the pair parameters, and no drift penalty
/// applies.
#[allow(clippy::too_many_arguments)]
pub fn build_progressive_loss<F: Real>(
    g: &mut Graph<F>,
    model: &SplitClassifier<F>,
    pairs: &[ParamId],
    level: u8,
    loss_cfg: &LossConfig,
    batch: &BatchData<'_, F>,
    frozen: Option<&[Vec<Vec<usize>>]>,
) -> Result<LossBuild, TrainError> {
    let dim = model.segment_dim();
    let segments = model.segments();
    let x = g.constant(batch.rows, model.input_dim(), batch.inputs.to_vec())?;
    let xe = model.encode_graph(g, x)?;
    let pair_nodes: Vec<NodeId> = pairs.iter().map(|&p| g.param(&model.params, p)).collect();

    let mut total: Option<NodeId> = None;
    let mut task_acc = 0.0;
    let mut vq_acc = 0.0;
    let mut commit_acc = 0.0;
    let mut assignments = Vec::with_capacity(level as usize);
    for j in 1..=level {
        let bq = quantize_batch_progressive(
            g,
            xe,
            &pair_nodes,
            &seg_levels(j, segments),
            dim,
            frozen.map(|f| &f[j as usize - 1][..]),
        )?;
        let logits = model.decode_graph(g, bq.st_concat)?;
        let task = g.cross_entropy(logits, batch.labels)?;
        task_acc += g.scalar_value(task).as_f64();
        let mut level_total = task;
        let betas = vec![F::from_f64(loss_cfg.beta(j)); segments];
        level_total = add_quant_terms(g, &bq, &betas, batch.rows, level_total, &mut vq_acc, &mut commit_acc)?;
        assignments.push(bq.indices);
        total = Some(match total {
            None => level_total,
            Some(t) => g.add(t, level_total)?,
        });
    }

    Ok(LossBuild {
        total: total.expect("level >= 1"),
        task: task_acc,
        vq: vq_acc,
        commit: commit_acc,
        drift: 0.0,
        assignments,
    })
}

fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Stage 1: trains encoder and decoder end to end without quantization.
pub fn stage1_warmstart<F: Real>(
    model: &mut SplitClassifier<F>,
    data: &Dataset<F>,
    plan: &TrainPlan,
    logger: &mut TrainLogger,
) -> Result<(), TrainError> {
    plan.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(plan.seed);
    rng.set_stream(STREAM_STAGE1);
    let ids = model.network_param_ids();
    let mut opt = SgdMomentum::new(plan.learning_rate, plan.momentum);
    for epoch in 0..plan.stage1_epochs {
        let t0 = Instant::now();
        let mut mean_loss = 0.0;
        for batch_idx in epoch_batches(data.len(), plan.batch_size, &mut rng) {
            let (inputs, labels) = data.batch(&batch_idx);
            let mut g = Graph::new();
            let x = g.constant(batch_idx.len(), data.input_dim, inputs)?;
            let loss = model.warmstart_loss_graph(&mut g, x, &labels)?;
            mean_loss += g.scalar_value(loss).as_f64() * batch_idx.len() as f64 / data.len() as f64;
            g.backward(loss, &mut model.params)?;
            opt.step(&mut model.params, &ids);
            model.params.zero_grad();
        }
        logger.log(EpochRecord {
            stage: 1,
            level: 0,
            epoch,
            total: mean_loss,
            task: mean_loss,
            vq: 0.0,
            commit: 0.0,
            drift: 0.0,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(())
}

/// Stage 2: encodes every sample, splits the features into sub-vectors and
/// fits the full-size codebook to them with LBG.
pub fn stage2_codebook_init<F: Real>(
    model: &SplitClassifier<F>,
    data: &Dataset<F>,
    cfg: &LbgConfig,
) -> Result<LbgOutcome<F>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let sub_vectors = encode_all(model, data)?;
    Ok(lbg_fit(&sub_vectors, model.segment_dim(), cfg)?)
}

/// Encoder outputs for the whole dataset, flattened to `M * N` sub-vectors
/// in sample-major order.
pub fn encode_all<F: Real>(
    model: &SplitClassifier<F>,
    data: &Dataset<F>,
) -> Result<Vec<F>, TrainError> {
    let mut out = Vec::with_capacity(data.len() * model.feature_dim());
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(256) {
        let (inputs, _) = data.batch(chunk);
        let mut g = Graph::new();
        let x = g.constant(chunk.len(), data.input_dim, inputs)?;
        let feat = model.encode_graph(&mut g, x)?;
        out.extend_from_slice(g.value(feat));
    }
    Ok(out)
}

pub struct JointOutcome<F: Real> {
    pub codebook: NestedCodebook<F>,
    pub codebook_param: ParamId,
    /// Prefix snapshot captured at the start of each level (empty at level 1).
    pub level_snapshots: Vec<Vec<F>>,
}

fn run_level_epochs<F: Real>(
    model: &mut SplitClassifier<F>,
    state: &mut StageState<F>,
    data: &Dataset<F>,
    plan: &TrainPlan,
    epochs: usize,
    rng: &mut ChaCha20Rng,
    logger: &mut TrainLogger,
    trainable: &[ParamId],
    mixed_allocation: Option<&[u8]>,
    drift_level: Option<u8>,
) -> Result<(), TrainError> {
    for epoch in 0..epochs {
        let t0 = Instant::now();
        let mut sums = [0.0f64; 5];
        for batch_idx in epoch_batches(data.len(), plan.batch_size, rng) {
            let (inputs, labels) = data.batch(&batch_idx);
            let batch = BatchData {
                inputs: &inputs,
                rows: batch_idx.len(),
                labels: &labels,
            };
            let mut g = Graph::new();
            let built = match mixed_allocation {
                Some(alloc) => build_allocation_loss(
                    &mut g,
                    model,
                    state.codebook,
                    alloc,
                    &plan.loss,
                    drift_level,
                    &state.snapshot,
                    &batch,
                    None,
                )?,
                None => build_cumulative_loss(
                    &mut g,
                    model,
                    state.codebook,
                    state.level,
                    &plan.loss,
                    &state.snapshot,
                    &batch,
                    None,
                )?,
            };
            let w = batch_idx.len() as f64 / data.len() as f64;
            sums[0] += g.scalar_value(built.total).as_f64() * w;
            sums[1] += built.task * w;
            sums[2] += built.vq * w;
            sums[3] += built.commit * w;
            sums[4] += built.drift * w;
            g.backward(built.total, &mut model.params)?;
            state.optimizer.step(&mut model.params, trainable);
            model.params.zero_grad();
        }
        logger.log(EpochRecord {
            stage: 3,
            level: state.level,
            epoch,
            total: sums[0],
            task: sums[1],
            vq: sums[2],
            commit: sums[3],
            drift: sums[4],
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(())
}

fn snapshot_prefix<F: Real>(params: &Params<F>, codebook: ParamId, level: u8, dim: usize) -> Vec<F> {
    if level < 2 {
        return Vec::new();
    }
    let rows = 1usize << (level - 1);
    params.get(codebook).data[..rows * dim].to_vec()
}

/// Stage 3 of the variable-rate procedure: extends the trainable prefix one
/// level at a time. The whole parameter array starts from the LBG fit, so
/// entering level `l` the entries `2^(l-1)+1 ..= 2^l` still hold their LBG
/// values; gradients never reach entries beyond the active prefix.
pub fn stage3_joint_adaptation<F: Real>(
    model: &mut SplitClassifier<F>,
    lbg_codewords: &[F],
    data: &Dataset<F>,
    plan: &TrainPlan,
    logger: &mut TrainLogger,
) -> Result<JointOutcome<F>, TrainError> {
    plan.validate()?;
    let dim = model.segment_dim();
    let size = plan.codebook_size();
    if lbg_codewords.len() != size * dim {
        return Err(TrainError::BadPlan(format!(
            "LBG codewords have {} values, expected {}",
            lbg_codewords.len(),
            size * dim
        )));
    }
    let codebook = model
        .params
        .add(Tensor::new(vec![size, dim], lbg_codewords.to_vec()).expect("codebook shape"));
    let mut trainable = model.network_param_ids();
    trainable.push(codebook);

    let mut rng = ChaCha20Rng::seed_from_u64(plan.seed);
    rng.set_stream(STREAM_STAGE3);
    let mut level_snapshots = Vec::with_capacity(plan.max_level as usize);
    for level in 1..=plan.max_level {
        let snapshot = snapshot_prefix(&model.params, codebook, level, dim);
        level_snapshots.push(snapshot.clone());
        let mut state = StageState {
            level,
            codebook,
            snapshot,
            optimizer: SgdMomentum::new(plan.learning_rate, plan.momentum),
        };
        run_level_epochs(
            model,
            &mut state,
            data,
            plan,
            plan.epochs_per_level,
            &mut rng,
            logger,
            &trainable,
            None,
            None,
        )?;
    }
    let codebook_tensor = model.params.get(codebook).data.clone();
    Ok(JointOutcome {
        codebook: NestedCodebook::new(dim, plan.max_level, codebook_tensor)?,
        codebook_param: codebook,
        level_snapshots,
    })
}

/// Mixed-resolution stage 3: raises the resolution of segment 1 from level
/// 1 to L, then segment 2, and so on — one training phase per step. The
/// drift penalty applies only in phases that extend the codeword prefix
/// beyond its previously trained size.
pub fn stage3_mixed_resolution<F: Real>(
    model: &mut SplitClassifier<F>,
    lbg_codewords: &[F],
    data: &Dataset<F>,
    plan: &TrainPlan,
    logger: &mut TrainLogger,
) -> Result<JointOutcome<F>, TrainError> {
    plan.validate()?;
    let dim = model.segment_dim();
    let segments = model.segments();
    let size = plan.codebook_size();
    if lbg_codewords.len() != size * dim {
        return Err(TrainError::BadPlan(format!(
            "LBG codewords have {} values, expected {}",
            lbg_codewords.len(),
            size * dim
        )));
    }
    let codebook = model
        .params
        .add(Tensor::new(vec![size, dim], lbg_codewords.to_vec()).expect("codebook shape"));
    let mut trainable = model.network_param_ids();
    trainable.push(codebook);

    let mut rng = ChaCha20Rng::seed_from_u64(plan.seed);
    rng.set_stream(STREAM_MIXED);
    let phases: Vec<(usize, u8)> = if plan.mixed_round_robin {
        (1..=plan.max_level)
            .flat_map(|l| (0..segments).map(move |s| (s, l)))
            .collect()
    } else {
        (0..segments)
            .flat_map(|s| (1..=plan.max_level).map(move |l| (s, l)))
            .collect()
    };
    let mut level_snapshots = Vec::new();
    let mut allocation = vec![1u8; segments];
    let mut trained_prefix_level = 0u8;
    for (segment, level) in phases {
        allocation[segment] = level;
        let newly_extended = level > trained_prefix_level;
        let (snapshot, drift_level) = if newly_extended {
            trained_prefix_level = level;
            let snap = snapshot_prefix(&model.params, codebook, level, dim);
            level_snapshots.push(snap.clone());
            (snap, Some(level))
        } else {
            (Vec::new(), None)
        };
        let mut state = StageState {
            level,
            codebook,
            snapshot,
            optimizer: SgdMomentum::new(plan.learning_rate, plan.momentum),
        };
        let alloc = allocation.clone();
        run_level_epochs(
            model,
            &mut state,
            data,
            plan,
            plan.epochs_per_phase,
            &mut rng,
            logger,
            &trainable,
            Some(&alloc),
            drift_level,
        )?;
    }
    let codebook_tensor = model.params.get(codebook).data.clone();
    Ok(JointOutcome {
        codebook: NestedCodebook::new(dim, plan.max_level, codebook_tensor)?,
        codebook_param: codebook,
        level_snapshots,
    })
}

pub struct ProgressiveOutcome<F: Real> {
    pub codebook: ProgressiveCodebook<F>,
    pub pair_params: Vec<ParamId>,
}

/// Progressive training: warm start, no LBG stage, then one new randomized
/// difference pair per level. Only the new pair is trainable at its level;
/// earlier pairs participate through the materialized codewords. The drift
/// penalty is disabled throughout.
pub fn train_progressive<F: Real>(
    model: &mut SplitClassifier<F>,
    data: &Dataset<F>,
    plan: &TrainPlan,
    logger: &mut TrainLogger,
) -> Result<ProgressiveOutcome<F>, TrainError> {
    plan.validate()?;
    stage1_warmstart(model, data, plan, logger)?;

    let dim = model.segment_dim();
    let mut init_rng = ChaCha20Rng::seed_from_u64(plan.seed);
    init_rng.set_stream(STREAM_PAIR_INIT);
    let mut rng = ChaCha20Rng::seed_from_u64(plan.seed);
    rng.set_stream(STREAM_PROGRESSIVE);

    let bound = 0.5 / (dim as f64).sqrt();
    let network = model.network_param_ids();
    let mut pair_params: Vec<ParamId> = Vec::new();
    for level in 1..=plan.max_level {
        let vals: Vec<F> = (0..2 * dim)
            .map(|_| F::from_f64(init_rng.random_range(-bound..bound)))
            .collect();
        let pair = model
            .params
            .add(Tensor::new(vec![2, dim], vals).expect("pair shape"));
        for &earlier in &pair_params {
            model.params.set_requires_grad(earlier, false);
        }
        pair_params.push(pair);

        let mut trainable = network.clone();
        trainable.push(pair);
        let mut opt = SgdMomentum::new(plan.learning_rate, plan.momentum);
        for epoch in 0..plan.epochs_per_level {
            let t0 = Instant::now();
            let mut sums = [0.0f64; 4];
            for batch_idx in epoch_batches(data.len(), plan.batch_size, &mut rng) {
                let (inputs, labels) = data.batch(&batch_idx);
                let batch = BatchData {
                    inputs: &inputs,
                    rows: batch_idx.len(),
                    labels: &labels,
                };
                let mut g = Graph::new();
                let built =
                    build_progressive_loss(&mut g, model, &pair_params, level, &plan.loss, &batch, None)?;
                let w = batch_idx.len() as f64 / data.len() as f64;
                sums[0] += g.scalar_value(built.total).as_f64() * w;
                sums[1] += built.task * w;
                sums[2] += built.vq * w;
                sums[3] += built.commit * w;
                g.backward(built.total, &mut model.params)?;
                opt.step(&mut model.params, &trainable);
                model.params.zero_grad();
            }
            logger.log(EpochRecord {
                stage: 3,
                level,
                epoch,
                total: sums[0],
                task: sums[1],
                vq: sums[2],
                commit: sums[3],
                drift: 0.0,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    // leave every pair trainable again for downstream use
    for &p in &pair_params {
        model.params.set_requires_grad(p, true);
    }
    let pairs = pair_params
        .iter()
        .map(|&p| {
            let d = &model.params.get(p).data;
            (d[..dim].to_vec(), d[dim..].to_vec())
        })
        .collect();
    Ok(ProgressiveOutcome {
        codebook: ProgressiveCodebook::new(dim, pairs)?,
        pair_params,
    })
}

/// Full variable-rate pipeline: stages 1-3 in sequence.
pub fn train_artoveq<F: Real>(
    model: &mut SplitClassifier<F>,
    data: &Dataset<F>,
    plan: &TrainPlan,
    logger: &mut TrainLogger,
) -> Result<JointOutcome<F>, TrainError> {
    stage1_warmstart(model, data, plan, logger)?;
    let lbg = stage2_codebook_init(model, data, &plan.lbg)?;
    stage3_joint_adaptation(model, &lbg.codewords, data, plan, logger)
}

/// Full mixed-resolution pipeline: stages 1-2, then the per-segment schedule.
pub fn train_mixed<F: Real>(
    model: &mut SplitClassifier<F>,
    data: &Dataset<F>,
    plan: &TrainPlan,
    logger: &mut TrainLogger,
) -> Result<JointOutcome<F>, TrainError> {
    stage1_warmstart(model, data, plan, logger)?;
    let lbg = stage2_codebook_init(model, data, &plan.lbg)?;
    stage3_mixed_resolution(model, &lbg.codewords, data, plan, logger)
}

/// A single-rate baseline: its own warm start, an LBG codebook of size
/// `2^rate`, and joint training at that one level only.
pub fn train_single_rate<F: Real>(
    model: &mut SplitClassifier<F>,
    data: &Dataset<F>,
    rate: u8,
    plan: &TrainPlan,
    logger: &mut TrainLogger,
) -> Result<JointOutcome<F>, TrainError> {
    plan.validate()?;
    if rate == 0 || rate > plan.max_level {
        return Err(TrainError::BadPlan(format!(
            "rate {rate} outside 1..={}",
            plan.max_level
        )));
    }
    stage1_warmstart(model, data, plan, logger)?;
    let lbg_cfg = LbgConfig {
        target_size: 1 << rate,
        ..plan.lbg.clone()
    };
    let lbg = stage2_codebook_init(model, data, &lbg_cfg)?;
    let dim = model.segment_dim();
    let codebook = model
        .params
        .add(Tensor::new(vec![1 << rate, dim], lbg.codewords.clone()).expect("codebook shape"));
    let mut trainable = model.network_param_ids();
    trainable.push(codebook);

    let mut rng = ChaCha20Rng::seed_from_u64(plan.seed);
    rng.set_stream(STREAM_STAGE3);
    let allocation = vec![rate; model.segments()];
    let mut state = StageState {
        level: rate,
        codebook,
        snapshot: Vec::new(),
        optimizer: SgdMomentum::new(plan.learning_rate, plan.momentum),
    };
    run_level_epochs(
        model,
        &mut state,
        data,
        plan,
        plan.single_rate_epochs,
        &mut rng,
        logger,
        &trainable,
        Some(&allocation),
        None,
    )?;
    let codebook_tensor = model.params.get(codebook).data.clone();
    Ok(JointOutcome {
        codebook: NestedCodebook::new(dim, rate, codebook_tensor)?,
        codebook_param: codebook,
        level_snapshots: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub correct: usize,
    pub total: usize,
}

/// Deterministic accuracy and mean task loss at a per-segment allocation.
pub fn evaluate<F: Real>(
    model: &SplitClassifier<F>,
    cb: &CodebookView<'_, F>,
    levels: &[u8],
    data: &Dataset<F>,
) -> Result<EvalReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if levels.len() != model.segments() {
        return Err(TrainError::BadPlan(format!(
            "allocation has {} entries for {} segments",
            levels.len(),
            model.segments()
        )));
    }
    let dim = model.segment_dim();
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(256) {
        let (inputs, labels) = data.batch(chunk);
        let mut g = Graph::new();
        let x = g.constant(chunk.len(), data.input_dim, inputs)?;
        let feat = model.encode_graph(&mut g, x)?;
        let feat_vals = g.value(feat).to_vec();
        let mut z = Vec::with_capacity(feat_vals.len());
        for row in feat_vals.chunks(model.feature_dim()) {
            let fb = FeatureBlock::split(row.to_vec(), dim)?;
            let q = quantize_block(&fb, cb, levels)?;
            for seg in &q.quantized {
                z.extend_from_slice(seg);
            }
        }
        let zn = g.constant(chunk.len(), model.feature_dim(), z)?;
        let logits = model.decode_graph(&mut g, zn)?;
        let ce = g.cross_entropy(logits, &labels)?;
        loss_sum += g.scalar_value(ce).as_f64() * chunk.len() as f64;
        let lv = g.value(logits);
        let classes = model.classes();
        for (i, &label) in labels.iter().enumerate() {
            if argmax(&lv[i * classes..(i + 1) * classes]) == label {
                correct += 1;
            }
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        mean_loss: loss_sum / data.len() as f64,
        correct,
        total: data.len(),
    })
}

/// Value of the level-`level` objective on one batch (drift measured
/// against the supplied per-level snapshots).
#[allow(clippy::too_many_arguments)]
pub fn level_loss_value<F: Real>(
    model: &SplitClassifier<F>,
    codebook: ParamId,
    level: u8,
    loss_cfg: &LossConfig,
    snapshots: &[Vec<F>],
    batch: &BatchData<'_, F>,
) -> Result<F, TrainError> {
    let mut g = Graph::new();
    let built = build_cumulative_loss(
        &mut g,
        model,
        codebook,
        level,
        loss_cfg,
        &snapshots[level as usize - 1],
        batch,
        None,
    )?;
    Ok(g.scalar_value(built.total))
}

/// The overall objective: the sum of the per-level objectives for every
/// level up to `max_level`, folded in ascending level order.
#[allow(clippy::too_many_arguments)]
pub fn overall_loss_value<F: Real>(
    model: &SplitClassifier<F>,
    codebook: ParamId,
    max_level: u8,
    loss_cfg: &LossConfig,
    snapshots: &[Vec<F>],
    batch: &BatchData<'_, F>,
) -> Result<F, TrainError> {
    let mut total = F::zero();
    for level in 1..=max_level {
        total = total + level_loss_value(model, codebook, level, loss_cfg, snapshots, batch)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticTaskSpec};
    use crate::model::{Activation, DecoderSpec, EncoderSpec};

    fn blob_spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec::generated(2, 4, 1.5, 0.2, 500, 100, 21).unwrap()
    }

    fn tiny_plan(seed: u64) -> TrainPlan {
        TrainPlan {
            schedule: Schedule::VariableRate,
            stage1_epochs: 5,
            epochs_per_level: 2,
            epochs_per_phase: 1,
            single_rate_epochs: 3,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            mixed_round_robin: false,
            seed,
            loss: LossConfig::uniform(3, 0.25, 1.0).unwrap(),
            lbg: LbgConfig::with_size(8),
            max_level: 3,
        }
    }

    fn tiny_model(seed: u64, classes: usize) -> SplitClassifier<f64> {
        SplitClassifier::new(
            EncoderSpec {
                widths: vec![4, 16, 8],
                activation: Activation::Relu,
                segment_dim: 2,
            },
            DecoderSpec {
                widths: vec![8, 16, classes],
                activation: Activation::Relu,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn warmstart_zero_epochs_is_noop() {
        let ds = make_synthetic::<f64>(&blob_spec()).unwrap();
        let mut model = tiny_model(1, 2);
        let before: Vec<Vec<f64>> = model.params.ids().map(|i| model.params.get(i).data.clone()).collect();
        let mut plan = tiny_plan(1);
        plan.stage1_epochs = 0;
        stage1_warmstart(&mut model, &ds.train, &plan, &mut TrainLogger::memory()).unwrap();
        for (i, b) in before.iter().enumerate() {
            assert_eq!(&model.params.get(i).data, b);
        }
    }

    #[test]
    fn warmstart_separable_blobs_reach_high_accuracy() {
        let ds = make_synthetic::<f64>(&blob_spec()).unwrap();
        let mut model = tiny_model(2, 2);
        let mut plan = tiny_plan(3);
        plan.stage1_epochs = 40;
        stage1_warmstart(&mut model, &ds.train, &plan, &mut TrainLogger::memory()).unwrap();
        // training accuracy on the unquantized path
        let mut correct = 0;
        for s in &ds.train.samples {
            let fb = model.encode(&s.input).unwrap();
            let pred = model.decode(&fb.source).unwrap();
            if pred.class == s.label {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.train.len() as f64;
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn warmstart_deterministic() {
        let ds = make_synthetic::<f64>(&blob_spec()).unwrap();
        let mut a = tiny_model(4, 2);
        let mut b = tiny_model(4, 2);
        let plan = tiny_plan(5);
        stage1_warmstart(&mut a, &ds.train, &plan, &mut TrainLogger::memory()).unwrap();
        stage1_warmstart(&mut b, &ds.train, &plan, &mut TrainLogger::memory()).unwrap();
        for pid in a.params.ids() {
            assert_eq!(a.params.get(pid).data, b.params.get(pid).data);
        }
    }

    #[test]
    fn stage2_builds_m_times_n_subvectors() {
        let ds = make_synthetic::<f64>(&blob_spec()).unwrap();
        let model = tiny_model(6, 2);
        let subs = encode_all(&model, &ds.train).unwrap();
        assert_eq!(subs.len() / model.segment_dim(), 4 * ds.train.len());
        // stage2 equals calling lbg_fit on those sub-vectors directly
        let got = stage2_codebook_init(&model, &ds.train, &LbgConfig::with_size(8)).unwrap();
        let oracle = lbg_fit(&subs, 2, &LbgConfig::with_size(8)).unwrap();
        assert_eq!(got.codewords, oracle.codewords);
    }

    #[test]
    fn stage2_constant_encoder_degenerates_to_perturbed_mean() {
        let ds = make_synthetic::<f64>(&blob_spec()).unwrap();
        let mut model = tiny_model(7, 2);
        for pid in model.params.ids().collect::<Vec<_>>() {
            for v in model.params.get_mut(pid).data.iter_mut() {
                *v = 0.0;
            }
        }
        // zero encoder network: every sub-vector is the zero vector
        let out = stage2_codebook_init(&model, &ds.train, &LbgConfig::with_size(4)).unwrap();
        for cw in out.codewords.chunks(2) {
            assert!(cw.iter().all(|v| v.abs() < 1e-6), "codeword {cw:?}");
        }
    }

    #[test]
    fn level_one_loss_has_no_drift_and_single_pass() {
        let ds = make_synthetic::<f64>(&blob_spec()).unwrap();
        let mut model = tiny_model(8, 2);
        let plan = tiny_plan(9);
        let lbg = vec![0.1f64; 8 * 2];
        let cb = model.params.add(Tensor::new(vec![8, 2], lbg).unwrap());
        let (inputs, labels) = ds.train.batch(&[0, 1, 2]);
        let batch = BatchData {
            inputs: &inputs,
            rows: 3,
            labels: &labels,
        };
        let mut g = Graph::new();
        let built =
            build_cumulative_loss(&mut g, &model, cb, 1, &plan.loss, &[], &batch, None).unwrap();
        assert_eq!(built.drift, 0.0);
        assert_eq!(built.assignments.len(), 1);
    }

    #[test]
    fn level_l_builds_l_decoder_passes() {
        let ds = make_synthetic::<f64>(&blob_spec()).unwrap();
        let mut model = tiny_model(10, 2);
        let plan = tiny_plan(11);
        let cb = model
            .params
            .add(Tensor::new(vec![8, 2], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap());
        let (inputs, labels) = ds.train.batch(&[0, 1]);
        let batch = BatchData {
            inputs: &inputs,
            rows: 2,
            labels: &labels,
        };
        let mut g = Graph::new();
        let built =
            build_cumulative_loss(&mut g, &model, cb, 3, &plan.loss, &vec![0.0; 8], &batch, None)
                .unwrap();
        // one assignment set per inner level
        assert_eq!(built.assignments.len(), 3);
        for (j, per_seg) in built.assignments.iter().enumerate() {
            for seg in per_seg {
                assert!(seg.iter().all(|&i| i < (1 << (j + 1))));
            }
        }
    }

    #[test]
    fn codewords_beyond_prefix_get_zero_gradient() {
        let ds = make_synthetic::<f64>(&blob_spec()).unwrap();
        let mut model = tiny_model(12, 2);
        let plan = tiny_plan(13);
        let cb = model
            .params
            .add(Tensor::new(vec![8, 2], (0..16).map(|i| i as f64 * 0.07 - 0.5).collect()).unwrap());
        let (inputs, labels) = ds.train.batch(&(0..16).collect::<Vec<_>>());
        let batch = BatchData {
            inputs: &inputs,
            rows: 16,
            labels: &labels,
        };
        let level = 2u8;
        let snapshot = model.params.get(cb).data[..2 * 2].to_vec();
        let mut g = Graph::new();
        let built =
            build_cumulative_loss(&mut g, &model, cb, level, &plan.loss, &snapshot, &batch, None)
                .unwrap();
        g.backward(built.total, &mut model.params).unwrap();
        let grad = model.params.get(cb).grad.as_ref().unwrap();
        // rows with index >= 2^level receive nothing
        assert!(grad[(1 << level) * 2..].iter().all(|&v| v == 0.0));
        // and the active prefix receives something
        assert!(grad[..(1 << level) * 2].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn eq8_sum_decomposes_into_per_level_losses() {
        let ds = make_synthetic::<f64>(&blob_spec()).unwrap();
        let mut model = tiny_model(14, 2);
        let plan = tiny_plan(15);
        let cb = model
            .params
            .add(Tensor::new(vec![8, 2], (0..16).map(|i| i as f64 * 0.11 - 0.8).collect()).unwrap());
        let snapshots: Vec<Vec<f64>> = (1..=3u8)
            .map(|l| {
                if l < 2 {
                    Vec::new()
                } else {
                    model.params.get(cb).data[..(1 << (l - 1)) * 2]
                        .iter()
                        .map(|v| v * 0.9)
                        .collect()
                }
            })
            .collect();
        let (inputs, labels) = ds.train.batch(&[0, 1, 2, 3, 4]);
        let batch = BatchData {
            inputs: &inputs,
            rows: 5,
            labels: &labels,
        };
        let whole = overall_loss_value(&model, cb, 3, &plan.loss, &snapshots, &batch).unwrap();
        let mut folded = 0.0f64;
        for l in 1..=3u8 {
            folded += level_loss_value(&model, cb, l, &plan.loss, &snapshots, &batch).unwrap();
        }
        assert_eq!(whole.to_bits(), folded.to_bits());
    }

    #[test]
    fn huge_eta_drift_penalty_dominates() {
        // Perturb the codeword prefix away from its snapshot, then train at
        // the stiffest stable step size for eta = 1e6. The drift term pulls
        // the prefix back to within 1e-2 of the snapshot; with eta = 0 the
        // perturbation stays.
        let spec = SyntheticTaskSpec::generated(4, 4, 1.5, 0.25, 240, 60, 31).unwrap();
        let ds = make_synthetic::<f64>(&spec).unwrap();
        let mut base = tiny_model(16, 4);
        let mut plan = tiny_plan(17);
        plan.stage1_epochs = 6;
        stage1_warmstart(&mut base, &ds.train, &plan, &mut TrainLogger::memory()).unwrap();
        let lbg = stage2_codebook_init(&base, &ds.train, &plan.lbg).unwrap();

        let run = |eta: f64| -> f64 {
            let mut model = base.clone();
            let cb = model
                .params
                .add(Tensor::new(vec![8, 2], lbg.codewords.clone()).unwrap());
            let level = 3u8;
            let snapshot = model.params.get(cb).data[..4 * 2].to_vec();
            // knock the live prefix off its snapshot
            for v in model.params.get_mut(cb).data[..4 * 2].iter_mut() {
                *v += 0.1;
            }
            let loss = LossConfig::new(vec![0.25; 3], vec![eta; 3]).unwrap();
            let mut trainable = model.network_param_ids();
            trainable.push(cb);
            // stability: step size * curvature (2 eta) must stay below 2
            let mut opt = SgdMomentum::new(4e-7, 0.0);
            let (inputs, labels) = ds.train.batch(&(0..32).collect::<Vec<_>>());
            let batch = BatchData {
                inputs: &inputs,
                rows: 32,
                labels: &labels,
            };
            for _ in 0..40 {
                let mut g = Graph::new();
                let built =
                    build_cumulative_loss(&mut g, &model, cb, level, &loss, &snapshot, &batch, None)
                        .unwrap();
                g.backward(built.total, &mut model.params).unwrap();
                opt.step(&mut model.params, &trainable);
                model.params.zero_grad();
            }
            model.params.get(cb).data[..4 * 2]
                .iter()
                .zip(&snapshot)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let pinned = run(1e6);
        let free = run(0.0);
        assert!(pinned <= 1e-2, "penalized prefix still {pinned} from snapshot");
        assert!(free > 5e-2, "control run should keep the perturbation, moved {free}");
    }

    #[test]
    fn stage3_full_run_is_bit_deterministic() {
        let spec = SyntheticTaskSpec::generated(4, 4, 1.5, 0.25, 240, 60, 31).unwrap();
        let ds = make_synthetic::<f64>(&spec).unwrap();
        let mut plan = tiny_plan(17);
        plan.stage1_epochs = 6;
        plan.epochs_per_level = 2;
        let run = || {
            let mut model = tiny_model(16, 4);
            let out = train_artoveq(&mut model, &ds.train, &plan, &mut TrainLogger::memory()).unwrap();
            (out.codebook.codewords().to_vec(), {
                let mut flat = Vec::new();
                for pid in model.params.ids() {
                    flat.extend_from_slice(&model.params.get(pid).data);
                }
                flat
            })
        };
        let (cb_a, params_a) = run();
        let (cb_b, params_b) = run();
        assert_eq!(cb_a, cb_b);
        assert_eq!(params_a, params_b);
    }

    #[test]
    fn mixed_schedule_phase_count_and_final_allocation() {
        let spec = SyntheticTaskSpec::generated(3, 4, 1.5, 0.3, 120, 40, 41).unwrap();
        let ds = make_synthetic::<f64>(&spec).unwrap();
        let mut model = tiny_model(18, 3);
        let mut plan = tiny_plan(19);
        plan.stage1_epochs = 4;
        plan.epochs_per_phase = 1;
        let mut logger = TrainLogger::memory();
        train_mixed(&mut model, &ds.train, &plan, &mut logger).unwrap();
        let stage3: Vec<&EpochRecord> = logger.records.iter().filter(|r| r.stage == 3).collect();
        // M=4 segments, L=3 -> 12 phases, one epoch each
        assert_eq!(stage3.len(), 12);
    }

    #[test]
    fn progressive_levels_never_add_more_than_one_pair() {
        let spec = SyntheticTaskSpec::generated(3, 4, 1.5, 0.3, 120, 40, 43).unwrap();
        let ds = make_synthetic::<f64>(&spec).unwrap();
        let mut model = tiny_model(20, 3);
        let mut plan = tiny_plan(23);
        plan.stage1_epochs = 4;
        plan.epochs_per_level = 1;
        let params_before = model.params.len();
        let out = train_progressive(&mut model, &ds.train, &plan, &mut TrainLogger::memory()).unwrap();
        assert_eq!(out.pair_params.len(), 3);
        assert_eq!(model.params.len(), params_before + 3);
        for &p in &out.pair_params {
            assert_eq!(model.params.get(p).numel(), 2 * 2);
        }
        // Minkowski structure intact after training
        for l in 1..=3u8 {
            let table = out.codebook.materialize(l).unwrap();
            assert_eq!(table.len(), (1usize << l) * 2);
        }
    }

    #[test]
    fn evaluate_rejects_empty_and_is_deterministic() {
        let ds = make_synthetic::<f64>(&blob_spec()).unwrap();
        let model = tiny_model(24, 2);
        let cb = NestedCodebook::new(2, 3, (0..16).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let empty = Dataset::<f64> {
            samples: vec![],
            input_dim: 4,
            classes: 2,
        };
        assert!(matches!(
            evaluate(&model, &CodebookView::Nested(&cb), &[3; 4], &empty),
            Err(TrainError::EmptyDataset)
        ));
        let a = evaluate(&model, &CodebookView::Nested(&cb), &[3; 4], &ds.test).unwrap();
        let b = evaluate(&model, &CodebookView::Nested(&cb), &[3; 4], &ds.test).unwrap();
        assert_eq!(a, b);
    }
}
