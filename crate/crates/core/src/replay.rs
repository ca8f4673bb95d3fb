//! The simulation driver.
//!
//! Think-stage steps are replayed in order. At step `t` every head builds the
//! attention its compressed cache would see, appends the entry for `t` and
//! runs one compression step. Every `realloc_interval` steps the LRFU budgets
//! are recomputed from utilization. The retained sets at the first answer step
//! form the boundary snapshot scored by the metrics module.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{apply_plan, reallocate, snapshot_utilization, AllocError, BudgetPlan, UtilizationSnapshot};
use crate::baselines::select_policy;
use crate::error::ErrorClass;
use crate::policy::{visible_scores, BudgetMode, CachePolicy, Eviction, PolicyConfig, PolicyError, PolicyKind};
use crate::trace::{AttentionTrace, TraceHeader};

pub const RUNLOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error("per-head budget {per_head} is below the minimum {b_min}")]
    BudgetBelowMin { per_head: u64, b_min: u32 },
    #[error("trace has no row for (layer {layer}, head {head}, position {t})")]
    MissingRow { layer: u32, head: u32, t: u32 },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl ReplayError {
    pub fn class(&self) -> ErrorClass {
        match self {
            ReplayError::Config(_) | ReplayError::BudgetBelowMin { .. } | ReplayError::Alloc(_) => {
                ErrorClass::Config
            }
            ReplayError::Policy(e) => e.class(),
            ReplayError::MissingRow { .. } => ErrorClass::Io,
            ReplayError::Invariant(_) => ErrorClass::Invariant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct RunConfig {
    pub policy: PolicyConfig,
    /// Expected (layers, heads) of the trace, if the caller knows them.
    pub expect_shape: Option<(u32, u32)>,
    /// Keep every policy-visible row in the log.
    pub record_visible: bool,
}


impl RunConfig {
    pub fn new(policy: PolicyConfig) -> Self {
        RunConfig { policy, ..RunConfig::default() }
    }
}

/// Initial budgets derived from the budget mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedBudget {
    pub per_head: u32,
    pub b_total: u64,
}

pub fn resolve_budgets(mode: BudgetMode, b_min: u32, header: &TraceHeader) -> Result<ResolvedBudget, ReplayError> {
    let per_head: u64 = match mode {
        BudgetMode::Fixed(b) => b as u64,
        BudgetMode::Ratio(r) => {
            if !(r > 0.0 && r.is_finite()) {
                return Err(ReplayError::Config(format!("budget ratio {r} must be positive")));
            }
            (r * header.think_len() as f64).round() as u64
        }
    };
    if per_head < b_min as u64 {
        return Err(ReplayError::BudgetBelowMin { per_head, b_min });
    }
    let per_head = u32::try_from(per_head)
        .map_err(|_| ReplayError::Config(format!("per-head budget {per_head} is too large")))?;
    Ok(ResolvedBudget { per_head, b_total: per_head as u64 * header.num_head_pairs() as u64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvictionCause {
    Compress,
    Realloc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionEvent {
    pub step: u32,
    pub layer: u32,
    pub head: u32,
    pub cause: EvictionCause,
    pub evicted: Vec<Eviction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReallocRecord {
    pub step: u32,
    pub snapshot: UtilizationSnapshot,
    pub plan: BudgetPlan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundarySnapshot {
    pub layer: u32,
    pub head: u32,
    pub budget: u32,
    /// Retained think positions, ascending.
    pub retained: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleRow {
    pub step: u32,
    pub layer: u32,
    pub head: u32,
    pub positions: Vec<u32>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub schema_version: u32,
    pub config: RunConfig,
    pub trace_fingerprint: String,
    pub num_layers: u32,
    pub num_heads: u32,
    pub think_range: (u32, u32),
    pub answer_range: (u32, u32),
    pub initial_budget: ResolvedBudget,
    pub evictions: Vec<EvictionEvent>,
    pub reallocations: Vec<ReallocRecord>,
    pub boundary: Vec<BoundarySnapshot>,
    /// Largest total retained count across heads right after compression.
    pub peak_retained_total: u64,
    /// Largest total including the entries appended before compression.
    pub peak_transient_total: u64,
    pub visible_rows: Option<Vec<VisibleRow>>,
}

impl RunLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run log serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn policy(&self) -> PolicyKind {
        self.config.policy.policy
    }

    pub fn boundary_for(&self, layer: u32, head: u32) -> Option<&BoundarySnapshot> {
        self.boundary.iter().find(|b| b.layer == layer && b.head == head)
    }
}

struct HeadOutput {
    events: Vec<(u32, Vec<Eviction>)>,
    sizes: Vec<usize>,
    visible: Vec<VisibleRow>,
}

fn run_head_segment(
    policy: &mut Box<dyn CachePolicy>,
    trace: &AttentionTrace,
    layer: u32,
    head: u32,
    steps: std::ops::Range<u32>,
    config: &RunConfig,
) -> Result<HeadOutput, ReplayError> {
    let mut out = HeadOutput { events: Vec::new(), sizes: Vec::new(), visible: Vec::new() };
    for t in steps {
        let row = trace.row(layer, head, t).ok_or(ReplayError::MissingRow { layer, head, t })?;
        let mut scores = visible_scores(row, &policy.state().retained, config.policy.renormalize)?;
        if config.record_visible {
            out.visible.push(VisibleRow {
                step: t,
                layer,
                head,
                positions: policy.state().retained.clone(),
                scores: scores.clone(),
            });
        }
        policy.append(t, t)?;
        scores.push(0.0);
        let evicted = policy.compress_step(&scores, t)?;
        let st = policy.state();
        if st.len() > st.budget as usize {
            return Err(ReplayError::Invariant(format!(
                "head ({layer}, {head}) retains {} entries over budget {} at step {t}",
                st.len(),
                st.budget
            )));
        }
        out.sizes.push(st.len());
        if !evicted.is_empty() {
            out.events.push((t, evicted));
        }
    }
    Ok(out)
}

/// Replays `trace` under `config`.
pub fn run_simulation(trace: &AttentionTrace, config: &RunConfig) -> Result<RunLog, ReplayError> {
    let header = &trace.header;
    if let Some((l, h)) = config.expect_shape {
        if (l, h) != (header.num_layers, header.num_heads) {
            return Err(ReplayError::Config(format!(
                "trace has {}x{} heads but the run expects {l}x{h}",
                header.num_layers, header.num_heads
            )));
        }
    }
    for w in config.policy.validate()? {
        log::warn!("{w}");
    }
    let pc = &config.policy;
    let budget = resolve_budgets(pc.budget_mode, pc.b_min, header)?;
    let pairs = header.num_head_pairs();
    let mut policies = (0..pairs)
        .map(|_| select_policy(pc, budget.per_head))
        .collect::<Result<Vec<_>, _>>()?;

    let think = header.think_range();
    let answer = header.answer_range();
    let end = if pc.compress_answer { answer.end } else { think.end };
    let realloc = pc.realloc_interval > 0 && pc.policy == PolicyKind::Lrfu;

    let mut evictions = Vec::new();
    let mut reallocations = Vec::new();
    let mut visible = Vec::new();
    let mut boundary = None;
    let mut peak_retained = 0u64;
    let mut peak_transient = 0u64;
    let mut sizes_before: u64 = 0;

    let mut t0 = think.start;
    while t0 < end {
        let mut t1 = end;
        if realloc {
            let done = t0 - think.start;
            let next = (done / pc.realloc_interval + 1) * pc.realloc_interval;
            t1 = t1.min(think.start + next);
        }
        if t0 < think.end {
            t1 = t1.min(think.end);
        }
        let nh = header.num_heads;
        let outputs: Vec<HeadOutput> = policies
            .par_iter_mut()
            .enumerate()
            .map(|(i, p)| run_head_segment(p, trace, i as u32 / nh, i as u32 % nh, t0..t1, config))
            .collect::<Result<_, _>>()?;

        for k in 0..(t1 - t0) as usize {
            let total: u64 = outputs.iter().map(|o| o.sizes[k] as u64).sum();
            peak_retained = peak_retained.max(total);
            peak_transient = peak_transient.max(sizes_before + pairs as u64);
            sizes_before = total;
        }
        let mut merged: Vec<EvictionEvent> = outputs
            .iter()
            .enumerate()
            .flat_map(|(i, o)| {
                o.events.iter().map(move |(step, ev)| EvictionEvent {
                    step: *step,
                    layer: i as u32 / nh,
                    head: i as u32 % nh,
                    cause: EvictionCause::Compress,
                    evicted: ev.clone(),
                })
            })
            .collect();
        merged.sort_by_key(|e| (e.step, e.layer, e.head));
        evictions.extend(merged);
        if config.record_visible {
            let mut rows: Vec<VisibleRow> = outputs.into_iter().flat_map(|o| o.visible).collect();
            rows.sort_by_key(|r| (r.step, r.layer, r.head));
            visible.extend(rows);
        }

        let last = t1 - 1;
        if realloc && t1 <= think.end && (t1 - think.start).is_multiple_of(pc.realloc_interval) {
            let snapshot = snapshot_utilization(&policies, header.num_layers, nh, last)?;
            let plan = reallocate(&snapshot, budget.b_total, pc.b_min)?;
            let ev = apply_plan(&mut policies, &plan, last)?;
            if pc.reset_crf_on_realloc {
                policies.iter_mut().for_each(|p| p.reset_scores(last));
            }
            for (i, evicted) in ev.into_iter().enumerate() {
                if !evicted.is_empty() {
                    evictions.push(EvictionEvent {
                        step: last,
                        layer: i as u32 / nh,
                        head: i as u32 % nh,
                        cause: EvictionCause::Realloc,
                        evicted,
                    });
                }
            }
            sizes_before = policies.iter().map(|p| p.state().len() as u64).sum();
            reallocations.push(ReallocRecord { step: last, snapshot, plan });
        }

        if t1 == think.end {
            boundary = Some(boundary_snapshot(&policies, nh, think.end));
        }
        t0 = t1;
    }

    let boundary = boundary.unwrap_or_else(|| boundary_snapshot(&policies, header.num_heads, think.end));
    let held: u64 = boundary.iter().map(|b| b.retained.len() as u64).sum();
    let budget_sum: u64 = boundary.iter().map(|b| b.budget as u64).sum();
    if held > budget.b_total || budget_sum != budget.b_total {
        return Err(ReplayError::Invariant(format!(
            "boundary holds {held} entries with budgets summing to {budget_sum}, total is {}",
            budget.b_total
        )));
    }

    Ok(RunLog {
        schema_version: RUNLOG_SCHEMA_VERSION,
        config: config.clone(),
        trace_fingerprint: trace.fingerprint(),
        num_layers: header.num_layers,
        num_heads: header.num_heads,
        think_range: (think.start, think.end),
        answer_range: (answer.start, answer.end),
        initial_budget: budget,
        evictions,
        reallocations,
        boundary,
        peak_retained_total: peak_retained,
        peak_transient_total: peak_transient,
        visible_rows: config.record_visible.then_some(visible),
    })
}

fn boundary_snapshot(policies: &[Box<dyn CachePolicy>], num_heads: u32, think_end: u32) -> Vec<BoundarySnapshot> {
    policies
        .iter()
        .enumerate()
        .map(|(i, p)| BoundarySnapshot {
            layer: i as u32 / num_heads,
            head: i as u32 % num_heads,
            budget: p.state().budget,
            retained: p.state().retained.iter().copied().filter(|&x| x < think_end).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{generate_synthetic, SyntheticSpec};

    fn small_trace() -> AttentionTrace {
        let spec = SyntheticSpec {
            think_len: 120,
            answer_len: 10,
            prompt_len: 4,
            num_layers: 2,
            num_heads: 2,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec).unwrap().0
    }

    #[test]
    fn resolve_budget_examples() {
        let h = TraceHeader::from_lengths(32, 8, 10, 9350, 10);
        let fixed = resolve_budgets(BudgetMode::Fixed(1024), 16, &h).unwrap();
        assert_eq!(fixed, ResolvedBudget { per_head: 1024, b_total: 262_144 });
        let ratio = resolve_budgets(BudgetMode::Ratio(0.10), 16, &h).unwrap();
        assert_eq!(ratio.per_head, 935);
        let small = TraceHeader::from_lengths(1, 1, 1, 50, 1);
        assert!(matches!(
            resolve_budgets(BudgetMode::Ratio(0.10), 16, &small),
            Err(ReplayError::BudgetBelowMin { per_head: 5, b_min: 16 })
        ));
    }

    #[test]
    fn large_budget_never_evicts() {
        let trace = small_trace();
        let mut pc = PolicyConfig::default();
        pc.budget_mode = BudgetMode::Fixed(200);
        let log = run_simulation(&trace, &RunConfig::new(pc)).unwrap();
        assert!(log.evictions.is_empty());
        for b in &log.boundary {
            assert_eq!(b.retained, (4..124).collect::<Vec<_>>());
        }
    }

    #[test]
    fn realloc_disabled_keeps_budgets() {
        let trace = small_trace();
        let mut pc = PolicyConfig::default();
        pc.budget_mode = BudgetMode::Fixed(20);
        pc.realloc_interval = 0;
        let log = run_simulation(&trace, &RunConfig::new(pc)).unwrap();
        assert!(log.reallocations.is_empty());
        assert!(log.boundary.iter().all(|b| b.budget == 20 && b.retained.len() == 20));
    }

    #[test]
    fn realloc_runs_on_schedule_and_conserves() {
        let trace = small_trace();
        let mut pc = PolicyConfig::default();
        pc.budget_mode = BudgetMode::Fixed(24);
        pc.realloc_interval = 50;
        let log = run_simulation(&trace, &RunConfig::new(pc)).unwrap();
        let steps: Vec<u32> = log.reallocations.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![4 + 49, 4 + 99]);
        for r in &log.reallocations {
            assert_eq!(r.plan.budgets.iter().map(|&b| b as u64).sum::<u64>(), 96);
        }
        assert!(log.peak_retained_total <= 96);
        assert!(log.peak_transient_total <= 96 + 4);
    }

    #[test]
    fn baselines_ignore_realloc() {
        let trace = small_trace();
        let mut pc = PolicyConfig::with_policy(PolicyKind::Lru);
        pc.budget_mode = BudgetMode::Fixed(20);
        pc.realloc_interval = 10;
        let log = run_simulation(&trace, &RunConfig::new(pc)).unwrap();
        assert!(log.reallocations.is_empty());
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let trace = small_trace();
        let cfg = RunConfig { expect_shape: Some((3, 2)), ..RunConfig::default() };
        let err = run_simulation(&trace, &cfg).unwrap_err();
        assert_eq!(err.class(), ErrorClass::Config);
    }

    #[test]
    fn open_loop_rows_match_trace_without_renormalization() {
        let trace = small_trace();
        let mut pc = PolicyConfig::default();
        pc.renormalize = false;
        pc.budget_mode = BudgetMode::Fixed(1000);
        let cfg = RunConfig { record_visible: true, ..RunConfig::new(pc) };
        let log = run_simulation(&trace, &cfg).unwrap();
        for row in log.visible_rows.as_ref().unwrap() {
            let full = trace.row(row.layer, row.head, row.step).unwrap();
            let think: Vec<f64> = full[4..].iter().map(|&x| x as f64).collect();
            assert_eq!(row.scores, think);
        }
    }

    #[test]
    fn compress_answer_keeps_appending() {
        let trace = small_trace();
        let mut pc = PolicyConfig::default();
        pc.budget_mode = BudgetMode::Fixed(20);
        pc.compress_answer = true;
        let log = run_simulation(&trace, &RunConfig::new(pc)).unwrap();
        assert!(log.evictions.iter().any(|e| e.step >= 124));
        assert_eq!(log.boundary.len(), 4);
    }
}
