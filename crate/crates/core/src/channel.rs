//! Time-varying channel model: latency-constrained quantization-level
//! selection, the skewed budget distributions for the S1/S2/S3 scenarios,
//! and session simulation over precomputed per-level scheme accuracies.
//!
//! The capacity process is piecewise constant: one budget draw per
//! coherence interval, with the capacity derived so the drawn per-segment
//! budget is exactly the largest feasible level under the active latency
//! rule at `capacity_scale = 1`.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("capacity must be positive, got {0}")]
    BadCapacity(f64),
    #[error("no quantization level satisfies the latency bound (capacity {capacity}, tau_max {tau_max})")]
    Infeasible { capacity: f64, tau_max: f64 },
    #[error("{0}")]
    Invalid(String),
}

/// Which latency expression bounds the level choice.
///
/// `Eq4` bounds `l / (M * C_t)`; `Consistent` bounds the transmission time
/// of all `M * l` bits, `M * l / C_t`. The two disagree by a factor `M^2`;
/// both are available behind this switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LatencyRule {
    #[default]
    #[serde(rename = "eq4")]
    Eq4,
    #[serde(rename = "consistent")]
    Consistent,
}

/// Channel capacity state over one coherence interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    /// Bits per time unit.
    pub capacity: f64,
    /// Coherence duration in time units.
    pub coherence: f64,
    /// Lower bound on capacity; `capacity >= c_min` always.
    pub c_min: f64,
}

impl ChannelState {
    pub fn new(capacity: f64, coherence: f64, c_min: f64) -> Result<Self, ChannelError> {
        if c_min <= 0.0 || capacity < c_min {
            return Err(ChannelError::BadCapacity(capacity));
        }
        if coherence <= 0.0 {
            return Err(ChannelError::Invalid("coherence must be positive".into()));
        }
        Ok(ChannelState {
            capacity,
            coherence,
            c_min,
        })
    }
}

/// Per-segment bit budgets live on this support.
pub const BUDGET_SUPPORT: std::ops::RangeInclusive<u8> = 1..=8;

/// Skewed budget distribution over `b in 1..=8`:
/// `Pr(b) = exp(k b) / sum_b' exp(k b')`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub skew: f64,
    pub segments: usize,
}

impl ScenarioSpec {
    pub fn new(skew: f64, segments: usize) -> Result<Self, ChannelError> {
        if segments == 0 {
            return Err(ChannelError::Invalid("segments must be positive".into()));
        }
        Ok(ScenarioSpec { skew, segments })
    }

    /// Conventional scenario label for the three skews used throughout.
    pub fn label(&self) -> String {
        match self.skew {
            k if k == 0.0 => "S1".to_string(),
            k if k == -0.25 => "S2".to_string(),
            k if k == 0.25 => "S3".to_string(),
            k => format!("k={k}"),
        }
    }
}

/// Closed-form PMF over the support; sums to 1 within 1e-12.
pub fn budget_pmf(skew: f64) -> [f64; 8] {
    let mut weights = [0.0f64; 8];
    for (i, w) in weights.iter_mut().enumerate() {
        *w = (skew * (i + 1) as f64).exp();
    }
    let z: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= z;
    }
    weights
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetDraw {
    /// Bits per feature segment, in `1..=8`.
    pub per_segment_bits: u8,
    /// Total budget `B_t = M * b`.
    pub total_bits: u32,
}

/// Inverse-CDF draw from the scenario distribution.
pub fn draw_budget(spec: &ScenarioSpec, rng: &mut ChaCha20Rng) -> BudgetDraw {
    let pmf = budget_pmf(spec.skew);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut b = 8u8;
    for (i, &p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            b = (i + 1) as u8;
            break;
        }
    }
    BudgetDraw {
        per_segment_bits: b,
        total_bits: spec.segments as u32 * b as u32,
    }
}

/// Latency implied by quantizing at `level` under the chosen rule.
pub fn rule_latency(level: u8, segments: usize, capacity: f64, rule: LatencyRule) -> f64 {
    match rule {
        LatencyRule::Eq4 => level as f64 / (segments as f64 * capacity),
        LatencyRule::Consistent => segments as f64 * level as f64 / capacity,
    }
}

/// The largest level in `1..=max_level` whose latency stays within
/// `tau_max`; an error when even level 1 violates the bound, signalling the
/// caller must defer transmission.
pub fn select_level(
    capacity: f64,
    segments: usize,
    tau_max: f64,
    max_level: u8,
    rule: LatencyRule,
) -> Result<u8, ChannelError> {
    if capacity <= 0.0 {
        return Err(ChannelError::BadCapacity(capacity));
    }
    let mut best = None;
    for level in 1..=max_level {
        if rule_latency(level, segments, capacity, rule) <= tau_max {
            best = Some(level);
        }
    }
    best.ok_or(ChannelError::Infeasible {
        capacity,
        tau_max,
    })
}

/// Capacity for which the drawn per-segment budget is exactly the largest
/// feasible level (at unit scale). The half-level headroom puts the
/// feasibility boundary between integer levels, away from float rounding.
pub fn capacity_for_budget(b: u8, segments: usize, tau_max: f64, rule: LatencyRule, scale: f64) -> f64 {
    let effective = b as f64 + 0.5;
    let base = match rule {
        LatencyRule::Eq4 => effective / (segments as f64 * tau_max),
        LatencyRule::Consistent => segments as f64 * effective / tau_max,
    };
    scale * base
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    /// Variable-rate quantizer: adapts its level every interval.
    Adaptive,
    /// Successive-refinement decoder: adapts like `Adaptive`, decoding up
    /// to the budgeted number of bits per segment.
    Progressive,
    /// Quantizes at one fixed per-segment rate; fails when the budget
    /// cannot carry it.
    FixedRate(u8),
    /// Oracle that keeps a separately trained model per rate.
    MultiFixedRate,
}

/// One inference scheme reduced to its per-level evaluation outcome.
#[derive(Debug, Clone)]
pub struct SchemeProfile {
    pub name: String,
    pub kind: SchemeKind,
    /// Correct predictions on the evaluation set at levels `1..=L`.
    pub correct_at_level: Vec<u64>,
    /// Evaluation set size.
    pub eval_total: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    pub capacity: f64,
    pub budget_bits: u32,
    pub scheme: usize,
    /// Level transmitted; 0 when the step was deferred or failed.
    pub level: u8,
    pub latency: f64,
    pub delivered: bool,
    pub correct: u64,
}

#[derive(Debug, Clone)]
pub struct ChannelTrace {
    pub skew: f64,
    pub scheme_names: Vec<String>,
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub scenario: ScenarioSpec,
    pub steps: usize,
    pub tau_max: f64,
    pub capacity_scale: f64,
    pub rule: LatencyRule,
    /// Record per-step trace rows (skip for long accuracy-only sessions).
    pub keep_trace: bool,
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    /// Average accuracy per scheme, in input order.
    pub accuracy: Vec<f64>,
    pub trace: ChannelTrace,
}

/// Runs one session: per step, one budget draw shared by every scheme.
/// Adaptive schemes transmit at the largest feasible level; fixed-rate
/// schemes score zero on steps whose budget cannot carry their rate.
pub fn simulate_session(
    schemes: &[SchemeProfile],
    cfg: &SessionConfig,
    rng: &mut ChaCha20Rng,
) -> Result<SessionOutcome, ChannelError> {
    if schemes.is_empty() || cfg.steps == 0 {
        return Err(ChannelError::Invalid(
            "need at least one scheme and one step".into(),
        ));
    }
    let segments = cfg.scenario.segments;
    let max_level = schemes
        .iter()
        .map(|s| s.correct_at_level.len())
        .max()
        .unwrap() as u8;
    let mut correct_sums = vec![0u64; schemes.len()];
    let mut records = Vec::new();
    for t in 0..cfg.steps {
        let draw = draw_budget(&cfg.scenario, rng);
        let capacity = capacity_for_budget(
            draw.per_segment_bits,
            segments,
            cfg.tau_max,
            cfg.rule,
            cfg.capacity_scale,
        );
        for (si, scheme) in schemes.iter().enumerate() {
            let (level, latency, delivered) = match scheme.kind {
                SchemeKind::Adaptive | SchemeKind::Progressive | SchemeKind::MultiFixedRate => {
                    match select_level(capacity, segments, cfg.tau_max, max_level, cfg.rule) {
                        Ok(l) => (l, rule_latency(l, segments, capacity, cfg.rule), true),
                        Err(_) => (0, 0.0, false),
                    }
                }
                SchemeKind::FixedRate(r) => {
                    let lat = rule_latency(r, segments, capacity, cfg.rule);
                    (r, lat, lat <= cfg.tau_max)
                }
            };
            let correct = if delivered && level >= 1 {
                scheme.correct_at_level[level as usize - 1]
            } else {
                0
            };
            correct_sums[si] += correct;
            if cfg.keep_trace {
                records.push(TraceRecord {
                    t,
                    capacity,
                    budget_bits: draw.total_bits,
                    scheme: si,
                    level: if delivered { level } else { 0 },
                    latency: if delivered { latency } else { 0.0 },
                    delivered,
                    correct,
                });
            }
        }
    }
    let accuracy = schemes
        .iter()
        .zip(&correct_sums)
        .map(|(s, &c)| c as f64 / (cfg.steps as f64 * s.eval_total as f64))
        .collect();
    Ok(SessionOutcome {
        accuracy,
        trace: ChannelTrace {
            skew: cfg.scenario.skew,
            scheme_names: schemes.iter().map(|s| s.name.clone()).collect(),
            records,
        },
    })
}
