//! Answer-first evaluation of a run.
//!
//! Ground truth ranks every think position of a head by the mean attention it
//! receives from answer-stage queries: the top fraction are crystals and the
//! bottom fraction slips. A run is scored at the think/answer boundary.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ErrorClass;
use crate::policy::{PolicyConfig, PolicyKind};
use crate::replay::RunLog;
use crate::trace::AttentionTrace;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_LABEL_FRACTION: f64 = 0.30;

/// Fixed header of the flat per-head table.
pub const CSV_HEADER: &str =
    "policy,layer,head,budget,crystal_retention,answer_mass_retained,slip_occupancy,oracle_mass,normalized_score";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trace has no answer stage, so there is no ground truth")]
    NoAnswer,
    #[error("label fraction {0} outside (0, 0.5]")]
    Fraction(f64),
    #[error("inconsistent inputs: {0}")]
    Mismatch(String),
    #[error("nothing to compare")]
    Empty,
}

impl MetricsError {
    pub fn class(&self) -> ErrorClass {
        ErrorClass::Config
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadGroundTruth {
    pub layer: u32,
    pub head: u32,
    pub crystal: Vec<u32>,
    pub slip: Vec<u32>,
    /// Mean answer attention per think position, indexed from the think start.
    pub mean_answer: Vec<f64>,
    /// Mean answer attention on all non-think positions together.
    pub non_think_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLabels {
    pub fraction: f64,
    pub trace_fingerprint: String,
    pub think_start: u32,
    pub think_len: u32,
    pub heads: Vec<HeadGroundTruth>,
}

/// Means closer than this, relative to their size, are treated as tied. Trace
/// scores are f32, so smaller differences are quantization residue.
pub const TIE_TOLERANCE: f64 = 1e-6;

/// Top-`k` and bottom-`k` indices by `mean`, both ascending. Near-equal means
/// form tie groups that are ordered by position, earlier first, at both ends.
/// Slips are drawn from the positions not labeled crystal.
fn split_labels(mean: &[f64], k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..mean.len()).collect();
    order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &i in &order {
        match groups.last_mut() {
            Some(g) if mean[g[g.len() - 1]] - mean[i] <= TIE_TOLERANCE * mean[i].abs().max(f64::MIN_POSITIVE) => {
                g.push(i)
            }
            _ => groups.push(vec![i]),
        }
    }
    groups.iter_mut().for_each(|g| g.sort_unstable());
    let mut crystal: Vec<usize> = groups.iter().flatten().copied().take(k).collect();
    let taken: std::collections::HashSet<usize> = crystal.iter().copied().collect();
    let mut slip: Vec<usize> =
        groups.iter().rev().flatten().copied().filter(|i| !taken.contains(i)).take(k).collect();
    crystal.sort_unstable();
    slip.sort_unstable();
    (crystal, slip)
}

/// Labels crystals and slips per head from answer-stage attention.
pub fn label_ground_truth(trace: &AttentionTrace, fraction: f64) -> Result<GroundTruthLabels, MetricsError> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(MetricsError::Fraction(fraction));
    }
    let header = &trace.header;
    let answer = header.answer_range();
    if answer.is_empty() {
        return Err(MetricsError::NoAnswer);
    }
    let think = header.think_range();
    let k = (fraction * think.len() as f64 + 1e-9).floor() as usize;
    let nh = header.num_heads;
    let heads = (0..header.num_head_pairs() as u32)
        .into_par_iter()
        .map(|i| {
            let (layer, head) = (i / nh, i % nh);
            let mut mean = vec![0.0f64; think.len()];
            let mut other = 0.0f64;
            for t in answer.clone() {
                let row = trace.row(layer, head, t).ok_or_else(|| {
                    MetricsError::Mismatch(format!("trace lacks row ({layer}, {head}, {t})"))
                })?;
                for (p, &s) in row.iter().enumerate() {
                    let p = p as u32;
                    if think.contains(&p) {
                        mean[(p - think.start) as usize] += s as f64;
                    } else {
                        other += s as f64;
                    }
                }
            }
            let n = answer.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            let (crystal, slip) = split_labels(&mean, k);
            let crystal = crystal.into_iter().map(|o| think.start + o as u32).collect();
            let slip = slip.into_iter().map(|o| think.start + o as u32).collect();
            Ok(HeadGroundTruth { layer, head, crystal, slip, mean_answer: mean, non_think_mass: other / n })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(GroundTruthLabels {
        fraction,
        trace_fingerprint: trace.fingerprint(),
        think_start: think.start,
        think_len: think.len() as u32,
        heads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub layer: u32,
    pub head: u32,
    pub budget: u32,
    pub crystal_retention: f64,
    pub answer_mass_retained: f64,
    pub slip_occupancy: f64,
    pub oracle_mass: f64,
    pub normalized_score: f64,
}

/// Unweighted means over heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub crystal_retention: f64,
    pub answer_mass_retained: f64,
    pub slip_occupancy: f64,
    pub oracle_mass: f64,
    pub normalized_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetStats {
    pub initial_per_head: u32,
    pub b_total: u64,
    pub boundary_min: u32,
    pub boundary_max: u32,
    pub peak_retained_total: u64,
    pub reallocations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub policy: PolicyKind,
    pub config: PolicyConfig,
    pub trace_fingerprint: String,
    pub label_fraction: f64,
    pub budget: BudgetStats,
    pub heads: Vec<HeadMetrics>,
    pub aggregate: AggregateMetrics,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

fn score_head(
    gt: &HeadGroundTruth,
    log: &RunLog,
    evicted_at: &HashMap<u32, u32>,
    trace: &AttentionTrace,
) -> Result<HeadMetrics, MetricsError> {
    let (layer, head) = (gt.layer, gt.head);
    let snap = log
        .boundary_for(layer, head)
        .ok_or_else(|| MetricsError::Mismatch(format!("run log lacks head ({layer}, {head})")))?;
    let budget = snap.budget;
    let retained: std::collections::HashSet<u32> = snap.retained.iter().copied().collect();

    let crystal_retention = if gt.crystal.is_empty() {
        1.0
    } else {
        gt.crystal.iter().filter(|p| retained.contains(p)).count() as f64 / gt.crystal.len() as f64
    };
    let slip_occupancy = gt.slip.iter().filter(|p| retained.contains(p)).count() as f64 / budget as f64;

    let answer = trace.header.answer_range();
    let mut mass = 0.0;
    for t in answer.clone() {
        let row = trace
            .row(layer, head, t)
            .ok_or_else(|| MetricsError::Mismatch(format!("trace lacks row ({layer}, {head}, {t})")))?;
        mass += row
            .iter()
            .enumerate()
            .filter(|(p, _)| evicted_at.get(&(*p as u32)).is_none_or(|&s| s >= t))
            .map(|(_, &s)| s as f64)
            .sum::<f64>();
    }
    let answer_mass_retained = mass / answer.len() as f64;

    let mut best = gt.mean_answer.clone();
    best.sort_by(|a, b| b.total_cmp(a));
    let oracle_mass = gt.non_think_mass + best.iter().take(budget as usize).sum::<f64>();
    let normalized_score = if oracle_mass > 0.0 { answer_mass_retained / oracle_mass } else { 1.0 };
    Ok(HeadMetrics {
        layer,
        head,
        budget,
        crystal_retention,
        answer_mass_retained,
        slip_occupancy,
        oracle_mass,
        normalized_score,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores a run log against ground-truth labels.
pub fn score_run(log: &RunLog, labels: &GroundTruthLabels, trace: &AttentionTrace) -> Result<MetricsReport, MetricsError> {
    if log.trace_fingerprint != labels.trace_fingerprint {
        return Err(MetricsError::Mismatch("run log and labels refer to different traces".into()));
    }
    if log.think_range != (labels.think_start, labels.think_start + labels.think_len) {
        return Err(MetricsError::Mismatch("run log and labels disagree on the think stage".into()));
    }
    let boundary_budget: u64 = log.boundary.iter().map(|b| b.budget as u64).sum();
    if boundary_budget != log.initial_budget.b_total {
        return Err(MetricsError::Mismatch(format!(
            "boundary budgets sum to {boundary_budget}, run total is {}",
            log.initial_budget.b_total
        )));
    }
    let mut evicted: HashMap<(u32, u32), HashMap<u32, u32>> = HashMap::new();
    for e in &log.evictions {
        let m = evicted.entry((e.layer, e.head)).or_default();
        for ev in &e.evicted {
            m.entry(ev.position).or_insert(e.step);
        }
    }
    let empty = HashMap::new();
    let heads = labels
        .heads
        .par_iter()
        .map(|gt| {
            let ev = evicted.get(&(gt.layer, gt.head)).unwrap_or(&empty);
            score_head(gt, log, ev, trace)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let aggregate = AggregateMetrics {
        crystal_retention: mean(heads.iter().map(|h| h.crystal_retention)),
        answer_mass_retained: mean(heads.iter().map(|h| h.answer_mass_retained)),
        slip_occupancy: mean(heads.iter().map(|h| h.slip_occupancy)),
        oracle_mass: mean(heads.iter().map(|h| h.oracle_mass)),
        normalized_score: mean(heads.iter().map(|h| h.normalized_score)),
    };
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        policy: log.policy(),
        config: log.config.policy.clone(),
        trace_fingerprint: log.trace_fingerprint.clone(),
        label_fraction: labels.fraction,
        budget: BudgetStats {
            initial_per_head: log.initial_budget.per_head,
            b_total: log.initial_budget.b_total,
            boundary_min: log.boundary.iter().map(|b| b.budget).min().unwrap_or(0),
            boundary_max: log.boundary.iter().map(|b| b.budget).max().unwrap_or(0),
            peak_retained_total: log.peak_retained_total,
            reallocations: log.reallocations.len(),
        },
        heads,
        aggregate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: PolicyKind,
    pub metrics: AggregateMetrics,
    /// This row minus the baseline row.
    pub delta: AggregateMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub schema_version: u32,
    pub trace_fingerprint: String,
    pub b_total: u64,
    pub baseline: PolicyKind,
    pub rows: Vec<ComparisonRow>,
}

fn sub(a: &AggregateMetrics, b: &AggregateMetrics) -> AggregateMetrics {
    AggregateMetrics {
        crystal_retention: a.crystal_retention - b.crystal_retention,
        answer_mass_retained: a.answer_mass_retained - b.answer_mass_retained,
        slip_occupancy: a.slip_occupancy - b.slip_occupancy,
        oracle_mass: a.oracle_mass - b.oracle_mass,
        normalized_score: a.normalized_score - b.normalized_score,
    }
}

/// Side-by-side comparison; deltas are taken against `reports[baseline]`.
pub fn compare_runs(reports: &[MetricsReport], baseline: usize) -> Result<ComparisonTable, MetricsError> {
    let first = reports.first().ok_or(MetricsError::Empty)?;
    let base = reports
        .get(baseline)
        .ok_or_else(|| MetricsError::Mismatch(format!("baseline index {baseline} out of range")))?;
    for r in reports {
        if r.trace_fingerprint != first.trace_fingerprint {
            return Err(MetricsError::Mismatch("reports come from different traces".into()));
        }
        if r.budget.b_total != first.budget.b_total {
            return Err(MetricsError::Mismatch(format!(
                "reports use different budgets ({} vs {})",
                r.budget.b_total, first.budget.b_total
            )));
        }
    }
    Ok(ComparisonTable {
        schema_version: REPORT_SCHEMA_VERSION,
        trace_fingerprint: first.trace_fingerprint.clone(),
        b_total: first.budget.b_total,
        baseline: base.policy,
        rows: reports
            .iter()
            .map(|r| ComparisonRow {
                policy: r.policy,
                metrics: r.aggregate.clone(),
                delta: sub(&r.aggregate, &base.aggregate),
            })
            .collect(),
    })
}

impl ComparisonTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Human-readable fixed-width rendering.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<6} {:>9} {:>9} {:>9} {:>9} {:>9}  {:>9}",
            "policy", "crystal", "ans_mass", "slip_occ", "oracle", "norm", "d_crystal"
        );
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{:<6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}  {:>+9.4}",
                r.policy.name(),
                m.crystal_retention,
                m.answer_mass_retained,
                m.slip_occupancy,
                m.oracle_mass,
                m.normalized_score,
                r.delta.crystal_retention
            );
        }
        s
    }
}

fn csv_line(s: &mut String, policy: &str, layer: &str, head: &str, budget: &str, m: [f64; 5]) {
    let _ = writeln!(
        s,
        "{policy},{layer},{head},{budget},{:.9},{:.9},{:.9},{:.9},{:.9}",
        m[0], m[1], m[2], m[3], m[4]
    );
}

/// Flat per-head table for plotting, with one aggregate row per report.
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::new();
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in reports {
        let name = r.policy.name();
        for h in &r.heads {
            csv_line(
                &mut s,
                name,
                &h.layer.to_string(),
                &h.head.to_string(),
                &h.budget.to_string(),
                [h.crystal_retention, h.answer_mass_retained, h.slip_occupancy, h.oracle_mass, h.normalized_score],
            );
        }
        let a = &r.aggregate;
        let mean_budget = r.budget.b_total as f64 / r.heads.len().max(1) as f64;
        csv_line(
            &mut s,
            name,
            "all",
            "all",
            &format!("{mean_budget}"),
            [a.crystal_retention, a.answer_mass_retained, a.slip_occupancy, a.oracle_mass, a.normalized_score],
        );
    }
    s
}

/// One cell of a lambda by top-p sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda: f64,
    pub top_p: f64,
    pub metrics: AggregateMetrics,
}

pub const SWEEP_CSV_HEADER: &str =
    "lambda,top_p,crystal_retention,answer_mass_retained,slip_occupancy,oracle_mass,normalized_score";

pub fn sweep_to_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for c in cells {
        let m = &c.metrics;
        let _ = writeln!(
            s,
            "{:.4},{:.4},{:.9},{:.9},{:.9},{:.9},{:.9}",
            c.lambda,
            c.top_p,
            m.crystal_retention,
            m.answer_mass_retained,
            m.slip_occupancy,
            m.oracle_mass,
            m.normalized_score
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::BudgetMode;
    use crate::replay::{run_simulation, BoundarySnapshot, RunConfig};
    use crate::trace::{generate_synthetic, StepRecord, SyntheticSpec, TraceHeader};

    /// Think positions 1..=4 after one prompt position, two answer queries.
    fn hand_trace() -> AttentionTrace {
        let header = TraceHeader::from_lengths(1, 1, 1, 4, 2);
        let mut steps = Vec::new();
        for t in 1..5u32 {
            let n = t as usize;
            steps.push(StepRecord { layer: 0, head: 0, query_position: t, scores: vec![1.0 / n as f32; n] });
        }
        steps.push(StepRecord { layer: 0, head: 0, query_position: 5, scores: vec![0.1, 0.4, 0.1, 0.3, 0.1] });
        steps.push(StepRecord {
            layer: 0,
            head: 0,
            query_position: 6,
            scores: vec![0.1, 0.2, 0.1, 0.3, 0.1, 0.2],
        });
        AttentionTrace::new(header, steps)
    }

    #[test]
    fn labels_rank_by_mean_answer_attention() {
        let trace = hand_trace();
        let gt = label_ground_truth(&trace, 0.5).unwrap();
        let h = &gt.heads[0];
        // Means: p1 = 0.3, p2 = 0.1, p3 = 0.3, p4 = 0.1 (ties broken toward earlier).
        assert_eq!(h.crystal, vec![1, 3]);
        assert_eq!(h.slip, vec![2, 4]);
        assert!((h.non_think_mass - 0.2).abs() < 1e-7);
    }

    #[test]
    fn uniform_answer_attention_labels_by_position() {
        let header = TraceHeader::from_lengths(1, 1, 1, 4, 1);
        let mut steps: Vec<StepRecord> = (1..5u32)
            .map(|t| StepRecord { layer: 0, head: 0, query_position: t, scores: vec![1.0 / t as f32; t as usize] })
            .collect();
        steps.push(StepRecord { layer: 0, head: 0, query_position: 5, scores: vec![0.2; 5] });
        let gt = label_ground_truth(&AttentionTrace::new(header, steps), 0.25).unwrap();
        assert_eq!(gt.heads[0].crystal, vec![1]);
        assert_eq!(gt.heads[0].slip, vec![2]);
    }

    #[test]
    fn quantization_residue_counts_as_a_tie() {
        let mean = [0.5, 0.2 + 1e-12, 0.2, 0.2 + 2e-12, 0.1, 0.1 - 1e-13];
        let (crystal, slip) = split_labels(&mean, 2);
        assert_eq!(crystal, vec![0, 1]);
        assert_eq!(slip, vec![4, 5]);
        let (crystal, slip) = split_labels(&[0.3, 0.3, 0.3, 0.3], 2);
        assert_eq!((crystal, slip), (vec![0, 1], vec![2, 3]));
    }

    #[test]
    fn missing_answer_stage_is_an_error() {
        let header = TraceHeader::from_lengths(1, 1, 1, 1, 0);
        let steps = vec![StepRecord { layer: 0, head: 0, query_position: 1, scores: vec![1.0] }];
        assert_eq!(
            label_ground_truth(&AttentionTrace::new(header, steps), 0.3),
            Err(MetricsError::NoAnswer)
        );
    }

    fn log_with_boundary(trace: &AttentionTrace, retained: Vec<u32>, budget: u32) -> RunLog {
        let mut pc = PolicyConfig::default();
        pc.budget_mode = BudgetMode::Fixed(100);
        pc.b_min = 1;
        let mut log = run_simulation(trace, &RunConfig::new(pc)).unwrap();
        log.initial_budget.b_total = budget as u64;
        log.boundary = vec![BoundarySnapshot { layer: 0, head: 0, budget, retained: retained.clone() }];
        let all: Vec<u32> = (1..5).filter(|p| !retained.contains(p)).collect();
        if !all.is_empty() {
            log.evictions.push(crate::replay::EvictionEvent {
                step: 4,
                layer: 0,
                head: 0,
                cause: crate::replay::EvictionCause::Compress,
                evicted: all.into_iter().map(|position| crate::policy::Eviction { position, score: 0.0 }).collect(),
            });
        }
        log
    }

    #[test]
    fn oracle_set_scores_one() {
        let trace = hand_trace();
        let gt = label_ground_truth(&trace, 0.5).unwrap();
        let report = score_run(&log_with_boundary(&trace, vec![1, 3], 2), &gt, &trace).unwrap();
        let h = &report.heads[0];
        assert!((h.normalized_score - 1.0).abs() < 1e-9);
        assert_eq!(h.crystal_retention, 1.0);
        assert_eq!(h.slip_occupancy, 0.0);
        // Oracle: non-think 0.2 plus 0.3 + 0.3.
        assert!((h.oracle_mass - 0.8).abs() < 1e-7);
    }

    #[test]
    fn disjoint_boundary_has_zero_crystal_retention() {
        let trace = hand_trace();
        let gt = label_ground_truth(&trace, 0.5).unwrap();
        let report = score_run(&log_with_boundary(&trace, vec![2, 4], 2), &gt, &trace).unwrap();
        let h = &report.heads[0];
        assert_eq!(h.crystal_retention, 0.0);
        assert_eq!(h.slip_occupancy, 1.0);
        assert!((h.answer_mass_retained - 0.4).abs() < 1e-7);
        assert!(h.normalized_score <= 1.0);
    }

    #[test]
    fn full_budget_retains_everything() {
        let spec = SyntheticSpec { think_len: 80, answer_len: 8, num_layers: 1, num_heads: 2, ..SyntheticSpec::default() };
        let (trace, _) = generate_synthetic(&spec).unwrap();
        let gt = label_ground_truth(&trace, 0.3).unwrap();
        let mut pc = PolicyConfig::default();
        pc.budget_mode = BudgetMode::Fixed(80);
        let log = run_simulation(&trace, &RunConfig::new(pc)).unwrap();
        let r = score_run(&log, &gt, &trace).unwrap();
        for h in &r.heads {
            assert!((h.answer_mass_retained - 1.0).abs() < 1e-6);
            assert_eq!(h.crystal_retention, 1.0);
            assert!((h.normalized_score - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn comparison_checks_identity_and_budget() {
        let spec = SyntheticSpec { think_len: 80, answer_len: 8, num_layers: 1, num_heads: 2, ..SyntheticSpec::default() };
        let (trace, _) = generate_synthetic(&spec).unwrap();
        let gt = label_ground_truth(&trace, 0.3).unwrap();
        let run = |k: PolicyKind, b: u32| {
            let mut pc = PolicyConfig::with_policy(k);
            pc.budget_mode = BudgetMode::Fixed(b);
            score_run(&run_simulation(&trace, &RunConfig::new(pc)).unwrap(), &gt, &trace).unwrap()
        };
        let lrfu = run(PolicyKind::Lrfu, 20);
        let lru = run(PolicyKind::Lru, 20);
        let table = compare_runs(&[lrfu.clone(), lru.clone()], 0).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].delta.crystal_retention, 0.0);
        assert_eq!(
            table.rows[1].delta.crystal_retention,
            lru.aggregate.crystal_retention - lrfu.aggregate.crystal_retention
        );
        let single = compare_runs(std::slice::from_ref(&lrfu), 0).unwrap();
        assert_eq!(single.rows[0].delta, sub(&lrfu.aggregate, &lrfu.aggregate));
        assert!(compare_runs(&[lrfu.clone(), run(PolicyKind::Lru, 24)], 0).is_err());
        assert_eq!(compare_runs(&[], 0), Err(MetricsError::Empty));

        let csv = reports_to_csv(&[lrfu, lru]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[3].starts_with("lrfu,all,all,20,"));
    }
}
