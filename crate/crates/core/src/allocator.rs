//! Utilization-driven budget reallocation across layers and heads.
//!
//! Utilization is aggregated decayed CRF divided by budget. Each layer gets a
//! share of the total proportional to its utilization, and each head a share
//! of its layer's budget proportional to its own utilization. Real-valued
//! targets are integerized with one global largest-remainder pass, after which
//! cells below the floor are raised and the deficit is taken from the cells
//! above it, proportionally to their excess.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{CachePolicy, Eviction, PolicyKind};

/// Snap applied before flooring so that targets like `31.999999999` count as 32.
const FLOOR_SNAP: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("total budget {b_total} cannot give {cells} heads at least {b_min} each")]
    Infeasible { b_total: u64, cells: usize, b_min: u32 },
    #[error("expected {expected} heads, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("head {index} has a zero budget")]
    ZeroBudget { index: usize },
    #[error("policy {0} has no utilization measure and cannot be reallocated")]
    Unsupported(PolicyKind),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationSnapshot {
    pub num_layers: u32,
    pub num_heads: u32,
    /// Aggregated decayed CRF per head, flat in (layer, head) order.
    pub crf_sum: Vec<f64>,
    pub budget: Vec<u32>,
    pub eta_head: Vec<f64>,
    pub eta_layer: Vec<f64>,
    pub snapshot_step: u32,
}

impl UtilizationSnapshot {
    pub fn new(
        num_layers: u32,
        num_heads: u32,
        crf_sum: Vec<f64>,
        budget: Vec<u32>,
        snapshot_step: u32,
    ) -> Result<Self, AllocError> {
        let cells = (num_layers * num_heads) as usize;
        for len in [crf_sum.len(), budget.len()] {
            if len != cells {
                return Err(AllocError::Shape { expected: cells, got: len });
            }
        }
        if let Some(index) = budget.iter().position(|&b| b == 0) {
            return Err(AllocError::ZeroBudget { index });
        }
        let eta_head = crf_sum.iter().zip(&budget).map(|(&c, &b)| c / b as f64).collect();
        let h = num_heads as usize;
        let eta_layer = (0..num_layers as usize)
            .map(|i| {
                let c: f64 = crf_sum[i * h..(i + 1) * h].iter().sum();
                let b: u64 = budget[i * h..(i + 1) * h].iter().map(|&b| b as u64).sum();
                c / b as f64
            })
            .collect();
        Ok(UtilizationSnapshot { num_layers, num_heads, crf_sum, budget, eta_head, eta_layer, snapshot_step })
    }

    pub fn cells(&self) -> usize {
        self.crf_sum.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub num_layers: u32,
    pub num_heads: u32,
    /// Integer budget per head, flat in (layer, head) order.
    pub budgets: Vec<u32>,
    pub total: u64,
    /// Real-valued targets before integerization and floors.
    pub targets: Vec<f64>,
}

/// Reads the aggregated CRF of every head at step `t`.
pub fn snapshot_utilization(
    policies: &[Box<dyn CachePolicy>],
    num_layers: u32,
    num_heads: u32,
    t: u32,
) -> Result<UtilizationSnapshot, AllocError> {
    let mut crf = Vec::with_capacity(policies.len());
    let mut budget = Vec::with_capacity(policies.len());
    for p in policies {
        crf.push(p.utilization_mass(t).ok_or(AllocError::Unsupported(p.kind()))?);
        budget.push(p.state().budget);
    }
    UtilizationSnapshot::new(num_layers, num_heads, crf, budget, t)
}

/// Real-valued per-head targets.
pub fn real_targets(snapshot: &UtilizationSnapshot, b_total: u64) -> Vec<f64> {
    let l = snapshot.num_layers as usize;
    let h = snapshot.num_heads as usize;
    let total = b_total as f64;
    let eta_sum: f64 = snapshot.eta_layer.iter().sum();
    let mut out = Vec::with_capacity(l * h);
    for i in 0..l {
        let layer = if eta_sum > 0.0 { total * snapshot.eta_layer[i] / eta_sum } else { total / l as f64 };
        let heads = &snapshot.eta_head[i * h..(i + 1) * h];
        let head_sum: f64 = heads.iter().sum();
        for &e in heads {
            out.push(if head_sum > 0.0 { layer * e / head_sum } else { layer / h as f64 });
        }
    }
    out
}

/// Integer apportionment of `total` by largest remainder. Ties go to the
/// lower index.
pub fn largest_remainder(targets: &[f64], total: u64) -> Vec<u64> {
    let mut out: Vec<u64> = targets.iter().map(|&x| (x + FLOOR_SNAP).floor().max(0.0) as u64).collect();
    let rem: Vec<f64> = targets.iter().zip(&out).map(|(&x, &f)| x - f as f64).collect();
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..targets.len()).collect();
    if assigned <= total {
        order.sort_by(|&a, &b| rem[b].total_cmp(&rem[a]).then(a.cmp(&b)));
        let short = (total - assigned) as usize;
        for k in 0..short {
            out[order[k % order.len()]] += 1;
        }
    } else {
        order.sort_by(|&a, &b| rem[a].total_cmp(&rem[b]).then(b.cmp(&a)));
        let mut over = assigned - total;
        for &i in order.iter().cycle() {
            if over == 0 {
                break;
            }
            if out[i] > 0 {
                out[i] -= 1;
                over -= 1;
            }
        }
    }
    out
}

/// Raises every cell to at least `b_min`, funding the deficit from cells above
/// `b_min` in proportion to their excess. The total is unchanged.
fn enforce_floor(budgets: &mut [u64], b_min: u64) {
    let deficit: u64 = budgets.iter().map(|&b| b_min.saturating_sub(b)).sum();
    if deficit == 0 {
        return;
    }
    let excess: Vec<u64> = budgets.iter().map(|&b| b.saturating_sub(b_min)).collect();
    let excess_sum: u64 = excess.iter().sum();
    let shares: Vec<f64> = excess
        .iter()
        .map(|&e| deficit as f64 * e as f64 / excess_sum as f64)
        .collect();
    let mut cut = largest_remainder(&shares, deficit);
    // Rounding may ask a cell for one more than its excess; move that unit on.
    let mut spill = 0;
    for (c, &e) in cut.iter_mut().zip(&excess) {
        if *c > e {
            spill += *c - e;
            *c = e;
        }
    }
    for (c, &e) in cut.iter_mut().zip(&excess) {
        let room = (e - *c).min(spill);
        *c += room;
        spill -= room;
    }
    for (b, c) in budgets.iter_mut().zip(cut) {
        *b = (*b).max(b_min) - c;
    }
}

/// Computes the new budget plan from a snapshot.
pub fn reallocate(snapshot: &UtilizationSnapshot, b_total: u64, b_min: u32) -> Result<BudgetPlan, AllocError> {
    let cells = snapshot.cells();
    if b_total < cells as u64 * b_min as u64 {
        return Err(AllocError::Infeasible { b_total, cells, b_min });
    }
    let targets = real_targets(snapshot, b_total);
    let mut budgets = largest_remainder(&targets, b_total);
    enforce_floor(&mut budgets, b_min as u64);
    debug_assert_eq!(budgets.iter().sum::<u64>(), b_total);
    Ok(BudgetPlan {
        num_layers: snapshot.num_layers,
        num_heads: snapshot.num_heads,
        budgets: budgets.into_iter().map(|b| b as u32).collect(),
        total: b_total,
        targets,
    })
}

/// Installs `plan`; heads whose retained count exceeds the new budget evict
/// immediately. Returns the evictions per head index.
pub fn apply_plan(
    policies: &mut [Box<dyn CachePolicy>],
    plan: &BudgetPlan,
    t: u32,
) -> Result<Vec<Vec<Eviction>>, AllocError> {
    if policies.len() != plan.budgets.len() {
        return Err(AllocError::Shape { expected: plan.budgets.len(), got: policies.len() });
    }
    Ok(policies
        .par_iter_mut()
        .zip(plan.budgets.par_iter())
        .map(|(p, &b)| if p.state().budget == b { Vec::new() } else { p.set_budget(b, t) })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lrfu::LrfuPolicy;
    use proptest::prelude::*;

    fn snap(l: u32, h: u32, crf: &[f64], budget: &[u32]) -> UtilizationSnapshot {
        UtilizationSnapshot::new(l, h, crf.to_vec(), budget.to_vec(), 0).unwrap()
    }

    #[test]
    fn utilization_examples() {
        let s = snap(1, 1, &[8.0], &[16]);
        assert_eq!((s.eta_layer[0], s.eta_head[0]), (0.5, 0.5));
        let s = snap(1, 2, &[6.0, 2.0], &[16, 16]);
        assert_eq!(s.eta_layer[0], 0.25);
        let s = snap(2, 2, &[0.0; 4], &[16; 4]);
        assert!(s.eta_head.iter().chain(&s.eta_layer).all(|&e| e == 0.0));
    }

    #[test]
    fn worked_two_by_two_plan() {
        let s = snap(2, 2, &[6.0, 2.0, 2.0, 2.0], &[16; 4]);
        assert_eq!(s.eta_layer, vec![0.25, 0.125]);
        assert_eq!(&s.eta_head[..2], &[0.375, 0.125]);
        let plan = reallocate(&s, 64, 1).unwrap();
        assert_eq!(plan.budgets[0] + plan.budgets[1], 43);
        assert_eq!(plan.budgets[2] + plan.budgets[3], 21);
        assert_eq!(&plan.budgets[..2], &[32, 11]);
        assert_eq!(plan.budgets.iter().map(|&b| b as u64).sum::<u64>(), 64);
    }

    #[test]
    fn equal_utilization_gives_uniform_plan() {
        let s = snap(2, 3, &[3.0; 6], &[10; 6]);
        let plan = reallocate(&s, 62, 1).unwrap();
        assert!(plan.budgets.iter().all(|&b| b == 10 || b == 11));
        assert_eq!(plan.budgets.iter().sum::<u32>(), 62);
    }

    #[test]
    fn idle_head_is_raised_to_floor() {
        let s = snap(1, 4, &[0.0, 5.0, 5.0, 10.0], &[16; 4]);
        let plan = reallocate(&s, 64, 4).unwrap();
        assert_eq!(plan.budgets[0], 4);
        assert_eq!(plan.budgets.iter().sum::<u32>(), 64);
        assert!(plan.budgets.iter().all(|&b| b >= 4));
    }

    #[test]
    fn all_zero_falls_back_to_uniform() {
        let s = snap(2, 2, &[0.0; 4], &[8; 4]);
        assert_eq!(reallocate(&s, 40, 2).unwrap().budgets, vec![10; 4]);
    }

    #[test]
    fn infeasible_total_is_rejected() {
        let s = snap(2, 2, &[1.0; 4], &[8; 4]);
        assert_eq!(
            reallocate(&s, 15, 4),
            Err(AllocError::Infeasible { b_total: 15, cells: 4, b_min: 4 })
        );
    }

    #[test]
    fn zero_budget_snapshot_is_rejected() {
        assert!(matches!(
            UtilizationSnapshot::new(1, 2, vec![1.0, 1.0], vec![4, 0], 0),
            Err(AllocError::ZeroBudget { index: 1 })
        ));
    }

    #[test]
    fn apply_plan_shrinks_by_rank() {
        let mut heads: Vec<Box<dyn CachePolicy>> = Vec::new();
        for _ in 0..2 {
            let mut p = LrfuPolicy::new(32, 0.5, 0.9);
            for pos in 0..32 {
                p.append(pos, pos).unwrap();
            }
            heads.push(Box::new(p));
        }
        let plan = BudgetPlan { num_layers: 1, num_heads: 2, budgets: vec![20, 44], total: 64, targets: vec![20.0, 44.0] };
        let ev = apply_plan(&mut heads, &plan, 40).unwrap();
        assert_eq!(ev[0].len(), 12);
        assert!(ev[1].is_empty());
        // All entries only saw their arrival, so older positions rank lower.
        assert_eq!(ev[0].iter().map(|e| e.position).collect::<Vec<_>>(), (0..12).collect::<Vec<_>>());
        assert_eq!(heads[0].state().retained, (12..32).collect::<Vec<_>>());
        assert_eq!(heads[1].state().budget, 44);
        assert_eq!(heads[1].state().len(), 32);
    }

    #[test]
    fn snapshot_requires_crf_policies() {
        let heads: Vec<Box<dyn CachePolicy>> = vec![Box::new(crate::baselines::LfuPolicy::new(4, 0.9))];
        assert_eq!(snapshot_utilization(&heads, 1, 1, 0), Err(AllocError::Unsupported(PolicyKind::Lfu)));
    }

    fn arb_snapshot() -> impl Strategy<Value = (UtilizationSnapshot, u32)> {
        (1u32..4, 1u32..5).prop_flat_map(|(l, h)| {
            let n = (l * h) as usize;
            (
                prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..50.0], n),
                prop::collection::vec(1u32..64, n),
                1u32..8,
            )
                .prop_map(move |(c, b, m)| (UtilizationSnapshot::new(l, h, c, b, 0).unwrap(), m))
        })
    }

    proptest! {
        #[test]
        fn plans_conserve_and_respect_floor((s, b_min) in arb_snapshot(), extra in 0u64..500) {
            let total = s.cells() as u64 * b_min as u64 + extra;
            let plan = reallocate(&s, total, b_min).unwrap();
            prop_assert_eq!(plan.budgets.iter().map(|&b| b as u64).sum::<u64>(), total);
            prop_assert!(plan.budgets.iter().all(|&b| b >= b_min));
            let raw = largest_remainder(&plan.targets, total);
            for (r, t) in raw.iter().zip(&plan.targets) {
                prop_assert!((*r as f64 - t).abs() < 1.0 + 1e-9);
            }
            prop_assert_eq!(reallocate(&s, total, b_min).unwrap(), plan);
        }

        #[test]
        fn raising_a_head_never_lowers_its_target((s, _) in arb_snapshot(), pick in any::<prop::sample::Index>(), bump in 0.0f64..20.0) {
            let i = pick.index(s.cells());
            let before = real_targets(&s, 1000)[i];
            let mut crf = s.crf_sum.clone();
            crf[i] += bump;
            let s2 = UtilizationSnapshot::new(s.num_layers, s.num_heads, crf, s.budget.clone(), 0).unwrap();
            prop_assert!(real_targets(&s2, 1000)[i] >= before - 1e-9);
        }
    }
}
