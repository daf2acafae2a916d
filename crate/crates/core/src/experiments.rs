//! Experiment orchestration: the budget-to-allocation generator, baseline
//! training (per-rate fixed models, decoder-tuned LBG), accuracy-vs-bits
//! sweeps, the mixed-vs-identical comparison, and the dynamic-channel
//! table.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::autodiff::Graph;
use crate::channel::{
    simulate_session, ChannelError, ChannelTrace, ScenarioSpec, SchemeKind, SchemeProfile,
    SessionConfig,
};
use crate::codebook::{lbg_fit, LbgConfig, NestedCodebook, ProgressiveCodebook};
use crate::data::Dataset;
use crate::model::SplitClassifier;
use crate::train::{
    encode_all, evaluate, stage1_warmstart, train_single_rate, SgdMomentum, TrainError,
    TrainLogger, TrainPlan,
};
use crate::vq::CodebookView;

// derived seeds for independently initialized baseline models
const FIXED_RATE_SEED_BASE: u64 = 0x0f1c;
const SESSION_STREAM_BASE: u64 = 0x5e55;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("budget {budget} outside [{min}, {max}]")]
    BudgetOutOfRange { budget: u32, min: u32, max: u32 },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("{0}")]
    Invalid(String),
}

/// Non-increasing per-segment allocation for a total budget, biased toward
/// the first segment. Bits fill along anti-diagonals: each round hands one
/// bit to segments `r, r-1, ..., 1`, so budget 10 over four segments gives
/// (4, 3, 2, 1). Defined for every integer budget in `[M, M*L]`.
pub fn mixed_allocation(budget: u32, segments: usize, max_level: u8) -> Result<Vec<u8>, ExperimentError> {
    let min = segments as u32;
    let max = segments as u32 * max_level as u32;
    if budget < min || budget > max {
        return Err(ExperimentError::BudgetOutOfRange { budget, min, max });
    }
    let mut alloc = vec![1u8; segments];
    let mut extra = budget - min;
    let mut round = 1usize;
    while extra > 0 {
        let width = round.min(segments);
        for seg in (0..width).rev() {
            if extra == 0 {
                break;
            }
            if alloc[seg] < max_level {
                alloc[seg] += 1;
                extra -= 1;
            }
        }
        round += 1;
    }
    debug_assert!(alloc.windows(2).all(|w| w[0] >= w[1]));
    debug_assert_eq!(alloc.iter().map(|&a| a as u32).sum::<u32>(), budget);
    Ok(alloc)
}

/// The uniform allocation `B/M` per segment, when the budget divides evenly.
pub fn identical_allocation(budget: u32, segments: usize, max_level: u8) -> Option<Vec<u8>> {
    if budget % segments as u32 != 0 {
        return None;
    }
    let per = budget / segments as u32;
    if per == 0 || per > max_level as u32 {
        return None;
    }
    Some(vec![per as u8; segments])
}

/// One evaluated operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub scheme: String,
    pub dim: usize,
    pub segments: usize,
    pub allocation: Vec<u8>,
    pub bits: u32,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    fn push_eval(
        &mut self,
        scheme: &str,
        model: &SplitClassifier<f32>,
        cb: &CodebookView<'_, f32>,
        allocation: Vec<u8>,
        data: &Dataset<f32>,
        seed: u64,
    ) -> Result<(), ExperimentError> {
        let report = evaluate(model, cb, &allocation, data)?;
        let bits = allocation.iter().map(|&a| a as u32).sum();
        self.rows.push(SweepRow {
            scheme: scheme.to_string(),
            dim: cb.dim(),
            segments: allocation.len(),
            allocation,
            bits,
            accuracy: report.accuracy,
            mean_loss: report.mean_loss,
            seed,
        });
        Ok(())
    }
}

/// A trained variable-rate model with its nested codebook.
pub struct ArtoveqArtifacts {
    pub model: SplitClassifier<f32>,
    pub codebook: NestedCodebook<f32>,
}

pub struct ProgressiveArtifacts {
    pub model: SplitClassifier<f32>,
    pub codebook: ProgressiveCodebook<f32>,
}

pub struct FixedRateModel {
    pub rate: u8,
    pub model: SplitClassifier<f32>,
    pub codebook: NestedCodebook<f32>,
}

/// Trains one independently seeded fixed-rate model per level.
pub fn train_fixed_rate_set(
    data: &Dataset<f32>,
    plan: &TrainPlan,
    template: &SplitClassifier<f32>,
    logger: &mut TrainLogger,
) -> Result<Vec<FixedRateModel>, ExperimentError> {
    let mut out = Vec::new();
    for rate in 1..=plan.max_level {
        let mut model = SplitClassifier::new(
            template.encoder.clone(),
            template.decoder.clone(),
            plan.seed
                .wrapping_add(FIXED_RATE_SEED_BASE)
                .wrapping_add(rate as u64),
        )?;
        let mut rate_plan = plan.clone();
        rate_plan.seed = plan.seed.wrapping_add(rate as u64);
        let outcome = train_single_rate(&mut model, data, rate, &rate_plan, logger)?;
        out.push(FixedRateModel {
            rate,
            model,
            codebook: outcome.codebook,
        });
    }
    Ok(out)
}

/// Per-rate LBG baseline: codebook refit on the frozen encoder's outputs,
/// decoder fine-tuned for a fifth of the stage-3 epoch budget.
pub struct LbgBaseline {
    pub rate: u8,
    pub model: SplitClassifier<f32>,
    pub codebook: NestedCodebook<f32>,
}

pub fn train_lbg_baseline(
    artoveq: &SplitClassifier<f32>,
    data: &Dataset<f32>,
    rate: u8,
    plan: &TrainPlan,
) -> Result<LbgBaseline, ExperimentError> {
    let dim = artoveq.segment_dim();
    let sub_vectors = encode_all(artoveq, data)?;
    let lbg = lbg_fit(
        &sub_vectors,
        dim,
        &LbgConfig {
            target_size: 1 << rate,
            ..plan.lbg.clone()
        },
    )
    .map_err(TrainError::from)?;
    let codebook = NestedCodebook::new(dim, rate, lbg.codewords).map_err(TrainError::from)?;

    // frozen encoder, frozen codebook: precompute quantized features once
    let mut model = artoveq.clone();
    let feature_dim = model.feature_dim();
    let features = encode_all(&model, data)?;
    let mut quantized = Vec::with_capacity(features.len());
    let view = CodebookView::Nested(&codebook);
    let levels = vec![rate; model.segments()];
    for row in features.chunks(feature_dim) {
        let fb = crate::vq::FeatureBlock::split(row.to_vec(), dim).map_err(TrainError::from)?;
        let q = crate::vq::quantize_block(&fb, &view, &levels).map_err(TrainError::from)?;
        for seg in &q.quantized {
            quantized.extend_from_slice(seg);
        }
    }

    let epochs = (plan.max_level as usize * plan.epochs_per_level).div_ceil(5).max(1);
    let decoder_ids = model.decoder_param_ids();
    let mut opt = SgdMomentum::new(plan.learning_rate, plan.momentum);
    let mut rng = ChaCha20Rng::seed_from_u64(plan.seed.wrapping_add(rate as u64));
    rng.set_stream(SESSION_STREAM_BASE ^ 0x1b6);
    for _ in 0..epochs {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(plan.batch_size) {
            let mut z = Vec::with_capacity(chunk.len() * feature_dim);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                z.extend_from_slice(&quantized[i * feature_dim..(i + 1) * feature_dim]);
                labels.push(data.samples[i].label);
            }
            let mut g = Graph::new();
            let zn = g.constant(chunk.len(), feature_dim, z).map_err(TrainError::from)?;
            let logits = model.decode_graph(&mut g, zn).map_err(TrainError::from)?;
            let loss = g.cross_entropy(logits, &labels).map_err(TrainError::from)?;
            g.backward(loss, &mut model.params).map_err(TrainError::from)?;
            opt.step(&mut model.params, &decoder_ids);
            model.params.zero_grad();
        }
    }
    Ok(LbgBaseline {
        rate,
        model,
        codebook,
    })
}

/// Accuracy-vs-bits sweep: the single nested codebook evaluated at every
/// level, per-rate fixed baselines, and per-rate LBG baselines.
pub fn run_rate_sweep(
    artoveq: &ArtoveqArtifacts,
    fixed: &[FixedRateModel],
    lbg: &[LbgBaseline],
    data: &Dataset<f32>,
    seed: u64,
) -> Result<SweepResult, ExperimentError> {
    let mut out = SweepResult::default();
    let segments = artoveq.model.segments();
    for level in 1..=artoveq.codebook.max_level() {
        out.push_eval(
            "artoveq",
            &artoveq.model,
            &CodebookView::Nested(&artoveq.codebook),
            vec![level; segments],
            data,
            seed,
        )?;
    }
    for fm in fixed {
        out.push_eval(
            "fixed_rate",
            &fm.model,
            &CodebookView::Nested(&fm.codebook),
            vec![fm.rate; segments],
            data,
            seed,
        )?;
    }
    for lb in lbg {
        out.push_eval(
            "lbg",
            &lb.model,
            &CodebookView::Nested(&lb.codebook),
            vec![lb.rate; segments],
            data,
            seed,
        )?;
    }
    Ok(out)
}

/// Mixed-vs-identical comparison over every attainable budget.
pub fn run_mixed_vs_identical(
    mixed: &ArtoveqArtifacts,
    data: &Dataset<f32>,
    seed: u64,
) -> Result<SweepResult, ExperimentError> {
    let mut out = SweepResult::default();
    let segments = mixed.model.segments();
    let max_level = mixed.codebook.max_level();
    let min = segments as u32;
    let max = segments as u32 * max_level as u32;
    for budget in min..=max {
        let alloc = mixed_allocation(budget, segments, max_level)?;
        out.push_eval(
            "mixed",
            &mixed.model,
            &CodebookView::Nested(&mixed.codebook),
            alloc,
            data,
            seed,
        )?;
        if let Some(alloc) = identical_allocation(budget, segments, max_level) {
            out.push_eval(
                "identical",
                &mixed.model,
                &CodebookView::Nested(&mixed.codebook),
                alloc,
                data,
                seed,
            )?;
        }
    }
    Ok(out)
}

/// Every scheme of the dynamic-channel study, reduced to per-level correct
/// counts on the evaluation set.
pub fn build_scheme_profiles(
    artoveq: &ArtoveqArtifacts,
    progressive: &ProgressiveArtifacts,
    fixed: &[FixedRateModel],
    data: &Dataset<f32>,
) -> Result<Vec<SchemeProfile>, ExperimentError> {
    let max_level = artoveq.codebook.max_level();
    let segments = artoveq.model.segments();
    let eval_total = data.len() as u64;

    let mut multi = vec![0u64; max_level as usize];
    for fm in fixed {
        let report = evaluate(
            &fm.model,
            &CodebookView::Nested(&fm.codebook),
            &vec![fm.rate; segments],
            data,
        )?;
        multi[fm.rate as usize - 1] = report.correct as u64;
    }

    let mut profiles = vec![SchemeProfile {
        name: "multiple_fixed_rate".to_string(),
        kind: SchemeKind::MultiFixedRate,
        correct_at_level: multi.clone(),
        eval_total,
    }];

    for &rate in &[1u8, 4, 8] {
        if rate > max_level {
            continue;
        }
        let mut correct = vec![0u64; max_level as usize];
        correct[rate as usize - 1] = multi[rate as usize - 1];
        profiles.push(SchemeProfile {
            name: format!("single_rate_{rate}bit"),
            kind: SchemeKind::FixedRate(rate),
            correct_at_level: correct,
            eval_total,
        });
    }

    let mut adaptive = vec![0u64; max_level as usize];
    for level in 1..=max_level {
        let report = evaluate(
            &artoveq.model,
            &CodebookView::Nested(&artoveq.codebook),
            &vec![level; segments],
            data,
        )?;
        adaptive[level as usize - 1] = report.correct as u64;
    }
    profiles.push(SchemeProfile {
        name: "artoveq".to_string(),
        kind: SchemeKind::Adaptive,
        correct_at_level: adaptive,
        eval_total,
    });

    let mut prog = vec![0u64; max_level as usize];
    for level in 1..=progressive.codebook.max_level().min(max_level) {
        let report = evaluate(
            &progressive.model,
            &CodebookView::Progressive(&progressive.codebook),
            &vec![level; segments],
            data,
        )?;
        prog[level as usize - 1] = report.correct as u64;
    }
    profiles.push(SchemeProfile {
        name: "progressive_artoveq".to_string(),
        kind: SchemeKind::Progressive,
        correct_at_level: prog,
        eval_total,
    });

    Ok(profiles)
}

#[derive(Debug, Clone)]
pub struct DynamicCell {
    pub scheme: String,
    pub scenario: String,
    pub skew: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DynamicTable {
    pub cells: Vec<DynamicCell>,
    pub scheme_names: Vec<String>,
    pub scenario_labels: Vec<String>,
}

impl DynamicTable {
    pub fn accuracy(&self, scheme: &str, scenario: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.scheme == scheme && c.scenario == scenario)
            .map(|c| c.accuracy)
    }
}

/// One session per scenario; all schemes share each scenario's budget draws.
pub fn run_dynamic_table(
    profiles: &[SchemeProfile],
    scenarios: &[ScenarioSpec],
    steps: usize,
    tau_max: f64,
    capacity_scale: f64,
    rule: crate::channel::LatencyRule,
    seed: u64,
    keep_trace: bool,
) -> Result<(DynamicTable, Vec<ChannelTrace>), ExperimentError> {
    let mut table = DynamicTable {
        cells: Vec::new(),
        scheme_names: profiles.iter().map(|p| p.name.clone()).collect(),
        scenario_labels: scenarios.iter().map(|s| s.label()).collect(),
    };
    let mut traces = Vec::new();
    for (i, scenario) in scenarios.iter().enumerate() {
        let cfg = SessionConfig {
            scenario: scenario.clone(),
            steps,
            tau_max,
            capacity_scale,
            rule,
            keep_trace,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(SESSION_STREAM_BASE + i as u64);
        let outcome = simulate_session(profiles, &cfg, &mut rng)?;
        for (p, &acc) in profiles.iter().zip(&outcome.accuracy) {
            table.cells.push(DynamicCell {
                scheme: p.name.clone(),
                scenario: scenario.label(),
                skew: scenario.skew,
                accuracy: acc,
            });
        }
        traces.push(outcome.trace);
    }
    Ok((table, traces))
}

/// Spearman rank correlation with tie-averaged ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let rank = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = rank;
            }
            i = j + 1;
        }
        out
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Convenience wrapper used by tests and the CLI when a pre-trained model
/// is not supplied: full stage-1 warm start on a fresh model.
pub fn warm_started_model(
    template: &SplitClassifier<f32>,
    data: &Dataset<f32>,
    plan: &TrainPlan,
    logger: &mut TrainLogger,
) -> Result<SplitClassifier<f32>, ExperimentError> {
    let mut model = SplitClassifier::new(template.encoder.clone(), template.decoder.clone(), plan.seed)?;
    stage1_warmstart(&mut model, data, plan, logger)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_matches_staircase_example() {
        assert_eq!(mixed_allocation(10, 4, 8).unwrap(), vec![4, 3, 2, 1]);
        assert_eq!(mixed_allocation(4, 4, 8).unwrap(), vec![1, 1, 1, 1]);
        assert_eq!(mixed_allocation(32, 4, 8).unwrap(), vec![8, 8, 8, 8]);
        assert_eq!(mixed_allocation(5, 4, 8).unwrap(), vec![2, 1, 1, 1]);
    }

    #[test]
    fn allocation_total_and_deterministic_over_every_budget() {
        for segments in 1..=6usize {
            for max_level in 1..=8u8 {
                let min = segments as u32;
                let max = segments as u32 * max_level as u32;
                for budget in min..=max {
                    let a = mixed_allocation(budget, segments, max_level).unwrap();
                    let b = mixed_allocation(budget, segments, max_level).unwrap();
                    assert_eq!(a, b);
                    assert_eq!(a.iter().map(|&x| x as u32).sum::<u32>(), budget);
                    assert!(a.windows(2).all(|w| w[0] >= w[1]), "{a:?}");
                    assert!(a.iter().all(|&x| x >= 1 && x <= max_level));
                }
                assert!(mixed_allocation(min - 1, segments, max_level).is_err());
                assert!(mixed_allocation(max + 1, segments, max_level).is_err());
            }
        }
    }

    #[test]
    fn identical_allocation_divisibility() {
        assert_eq!(identical_allocation(12, 4, 8), Some(vec![3, 3, 3, 3]));
        assert_eq!(identical_allocation(10, 4, 8), None);
        assert_eq!(identical_allocation(36, 4, 8), None);
    }

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // ties get averaged ranks
        let r = spearman(&x, &[1.0, 1.0, 2.0, 2.0]);
        assert!(r > 0.8);
    }
}
