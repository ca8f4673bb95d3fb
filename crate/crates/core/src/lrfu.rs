//! Attention-based LRFU compression.
//!
//! An entry's combined recency and frequency score is `Σ_j λ^(t - t_j)` over
//! its hit times `t_j`. Only the score at the last hit and that hit's time are
//! stored; decay to the current step is applied lazily when ranking. A hit is
//! membership in the smallest top-p set of the current attention row.

use serde::{Deserialize, Serialize};

use crate::policy::{select_keep, CachePolicy, Eviction, HeadCacheState, PolicyError, PolicyKind};

/// Slack allowed when checking whether a cumulative sum reached `p`.
pub const MASK_EPS: f64 = 1e-12;

/// `λ^(t - tau)` with `0^0 = 1`.
fn decay_factor(tau: u32, t: u32, lambda: f64) -> f64 {
    let gap = t - tau;
    if gap == 0 {
        1.0
    } else {
        lambda.powf(gap as f64)
    }
}

/// Smallest set of entries whose cumulative score reaches `p`.
///
/// Entries are taken in descending score order, larger index first on ties.
/// Zero scores never count as hits. For `p >= 1` the mask is every nonzero
/// entry.
pub fn compute_hit_mask(scores: &[f64], p: f64) -> Vec<bool> {
    let mut mask = vec![false; scores.len()];
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > 0.0).collect();
    if p >= 1.0 {
        for i in order {
            mask[i] = true;
        }
        return mask;
    }
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a)));
    let mut cum = 0.0;
    for i in order {
        mask[i] = true;
        cum += scores[i];
        if cum >= p - MASK_EPS {
            break;
        }
    }
    mask
}

/// Score after a hit at `t`: `λ^(t - tau) * crf + 1`, stamped with `t`.
pub fn crf_update_hit(crf: f64, tau: u32, t: u32, lambda: f64) -> Result<(f64, u32), PolicyError> {
    if t < tau {
        return Err(PolicyError::Timestamp { tau, t });
    }
    Ok((decay_factor(tau, t, lambda) * crf + 1.0, t))
}

/// Score decayed from its last update to `t`, for ranking only.
pub fn crf_decay(crf: f64, tau: u32, t: u32, lambda: f64) -> Result<f64, PolicyError> {
    if t < tau {
        return Err(PolicyError::Timestamp { tau, t });
    }
    Ok(decay_factor(tau, t, lambda) * crf)
}

/// Full hit-time history of one entry, for checking the incremental path.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitHistory {
    times: Vec<u32>,
}

impl HitHistory {
    pub fn new() -> Self {
        HitHistory::default()
    }

    pub fn from_times(times: Vec<u32>) -> Result<Self, PolicyError> {
        if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
            return Err(PolicyError::Timestamp { tau: w[0], t: w[1] });
        }
        Ok(HitHistory { times })
    }

    pub fn record(&mut self, t: u32) -> Result<(), PolicyError> {
        match self.times.last() {
            Some(&last) if t <= last => Err(PolicyError::Timestamp { tau: last, t }),
            _ => {
                self.times.push(t);
                Ok(())
            }
        }
    }

    pub fn times(&self) -> &[u32] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Direct evaluation of `Σ_j λ^(t - t_j)`.
pub fn crf_bruteforce(history: &HitHistory, t: u32, lambda: f64) -> f64 {
    history
        .times()
        .iter()
        .map(|&tj| {
            debug_assert!(tj <= t);
            if tj == t {
                1.0
            } else {
                lambda.powf((t - tj) as f64)
            }
        })
        .sum()
}

/// Per-head LRFU policy.
#[derive(Debug, Clone)]
pub struct LrfuPolicy {
    state: HeadCacheState,
    lambda: f64,
    top_p: f64,
    protect_recent: usize,
    warmup_tracking: bool,
}

impl LrfuPolicy {
    pub fn new(budget: u32, lambda: f64, top_p: f64) -> Self {
        LrfuPolicy {
            state: HeadCacheState::new(budget),
            lambda,
            top_p,
            protect_recent: 0,
            warmup_tracking: false,
        }
    }

    pub fn with_protect_recent(mut self, w: u32) -> Self {
        self.protect_recent = w as usize;
        self
    }

    pub fn with_warmup_tracking(mut self, on: bool) -> Self {
        self.warmup_tracking = on;
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Applies hits from `scores` and returns every entry's decayed score.
    fn record_hits(&mut self, scores: &[f64], t: u32) -> Result<Vec<f64>, PolicyError> {
        let mask = compute_hit_mask(scores, self.top_p);
        let s = &mut self.state;
        let mut temp = Vec::with_capacity(s.len());
        for i in 0..s.len() {
            if mask[i] {
                let (crf, tau) = crf_update_hit(s.crf[i], s.last_hit[i], t, self.lambda)?;
                s.crf[i] = crf;
                s.last_hit[i] = tau;
                temp.push(crf);
            } else {
                temp.push(crf_decay(s.crf[i], s.last_hit[i], t, self.lambda)?);
            }
        }
        Ok(temp)
    }

    fn decayed(&self, t: u32) -> Vec<f64> {
        let s = &self.state;
        (0..s.len())
            .map(|i| decay_factor(s.last_hit[i].min(t), t, self.lambda) * s.crf[i])
            .collect()
    }

    /// Keeps the `budget` best entries by (decayed score, last hit, stored
    /// score, position).
    fn evict_to_budget(&mut self, temp: &[f64]) -> Vec<Eviction> {
        let s = &self.state;
        let (keep, evict) = select_keep(s.len(), s.budget as usize, self.protect_recent, |a, b| {
            temp[a]
                .total_cmp(&temp[b])
                .then(s.last_hit[a].cmp(&s.last_hit[b]))
                .then(s.crf[a].total_cmp(&s.crf[b]))
                .then(s.retained[a].cmp(&s.retained[b]))
        });
        let evicted = evict
            .iter()
            .map(|&i| Eviction { position: s.retained[i], score: temp[i] })
            .collect();
        self.state.retain_indices(&keep);
        evicted
    }
}

impl CachePolicy for LrfuPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Lrfu
    }

    fn state(&self) -> &HeadCacheState {
        &self.state
    }

    fn append(&mut self, position: u32, t: u32) -> Result<(), PolicyError> {
        self.state.append_entry(position, t)
    }

    fn compress_step(&mut self, scores: &[f64], t: u32) -> Result<Vec<Eviction>, PolicyError> {
        self.state.check_alignment(scores)?;
        if self.state.len() < self.state.budget as usize {
            if self.warmup_tracking {
                self.record_hits(scores, t)?;
            }
            return Ok(Vec::new());
        }
        let temp = self.record_hits(scores, t)?;
        Ok(self.evict_to_budget(&temp))
    }

    fn set_budget(&mut self, budget: u32, t: u32) -> Vec<Eviction> {
        self.state.budget = budget;
        if self.state.len() <= budget as usize {
            return Vec::new();
        }
        let temp = self.decayed(t);
        self.evict_to_budget(&temp)
    }

    fn utilization_mass(&self, t: u32) -> Option<f64> {
        Some(self.decayed(t).iter().sum())
    }

    fn reset_scores(&mut self, t: u32) {
        for (crf, tau) in self.state.crf.iter_mut().zip(self.state.last_hit.iter_mut()) {
            *crf = 1.0;
            *tau = t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hits(mask: &[bool]) -> Vec<usize> {
        mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    #[test]
    fn hit_mask_examples() {
        assert_eq!(hits(&compute_hit_mask(&[0.5, 0.3, 0.15, 0.05], 0.7)), vec![0, 1]);
        assert_eq!(hits(&compute_hit_mask(&[1.0], 0.3)), vec![0]);
        assert_eq!(hits(&compute_hit_mask(&[0.4, 0.4, 0.2], 0.3)), vec![1]);
        assert_eq!(hits(&compute_hit_mask(&[0.4, 0.4, 0.2], 0.5)), vec![0, 1]);
        assert_eq!(hits(&compute_hit_mask(&[0.2, 0.3, 0.3, 0.2], 0.7)), vec![1, 2, 3]);
        assert_eq!(hits(&compute_hit_mask(&[0.5, 0.0, 0.5], 1.0)), vec![0, 2]);
        assert!(compute_hit_mask(&[], 0.9).is_empty());
    }

    #[test]
    fn hit_mask_is_inclusive_at_threshold() {
        assert_eq!(hits(&compute_hit_mask(&[0.7, 0.2, 0.1], 0.7)), vec![0]);
    }

    #[test]
    fn hit_mask_stops_at_mass_shortfall() {
        // Unnormalized rows never reach p, so every nonzero entry is a hit.
        assert_eq!(hits(&compute_hit_mask(&[0.2, 0.0, 0.3], 0.9)), vec![0, 2]);
    }

    #[test]
    fn crf_examples() {
        assert_eq!(crf_update_hit(2.0, 5, 7, 0.5).unwrap(), (1.5, 7));
        assert_eq!(crf_update_hit(0.0, 3, 90, 0.3).unwrap(), (1.0, 90));
        assert_eq!(crf_update_hit(3.0, 1, 9, 1.0).unwrap(), (4.0, 9));
        assert_eq!(crf_update_hit(2.0, 4, 4, 0.0).unwrap(), (3.0, 4));
        assert_eq!(crf_decay(4.0, 0, 2, 0.5).unwrap(), 1.0);
        assert_eq!(crf_decay(4.0, 3, 3, 0.5).unwrap(), 4.0);
        assert_eq!(crf_decay(4.0, 3, 5, 0.0).unwrap(), 0.0);
        assert_eq!(crf_update_hit(1.0, 5, 4, 0.5), Err(PolicyError::Timestamp { tau: 5, t: 4 }));
        assert!(crf_decay(1.0, 5, 4, 0.5).is_err());
    }

    #[test]
    fn bruteforce_examples() {
        let h = HitHistory::from_times(vec![1, 3]).unwrap();
        assert_eq!(crf_bruteforce(&h, 3, 0.5), 1.25);
        assert_eq!(crf_bruteforce(&HitHistory::new(), 10, 0.5), 0.0);
        let h = HitHistory::from_times(vec![2, 4, 8, 9]).unwrap();
        assert_eq!(crf_bruteforce(&h, 20, 1.0), 4.0);
        assert!(HitHistory::from_times(vec![3, 3]).is_err());
    }

    #[test]
    fn incremental_hit_matches_history() {
        let mut h = HitHistory::new();
        let (mut crf, mut tau) = (0.0, 0);
        for t in [2, 5, 7] {
            (crf, tau) = crf_update_hit(crf, tau, t, 0.5).unwrap();
            h.record(t).unwrap();
            assert!((crf - crf_bruteforce(&h, t, 0.5)).abs() < 1e-12);
        }
        assert_eq!(tau, 7);
    }

    #[test]
    fn early_return_below_budget() {
        let mut p = LrfuPolicy::new(4, 0.6, 0.9);
        for pos in 0..3 {
            p.append(pos, pos).unwrap();
        }
        let before = p.state().clone();
        let ev = p.compress_step(&[0.2, 0.8, 0.0], 3).unwrap();
        assert!(ev.is_empty());
        assert_eq!(p.state(), &before);
    }

    #[test]
    fn warmup_tracking_records_hits() {
        let mut p = LrfuPolicy::new(4, 0.5, 0.9).with_warmup_tracking(true);
        for pos in 0..3 {
            p.append(pos, pos).unwrap();
        }
        p.compress_step(&[0.0, 1.0, 0.0], 3).unwrap();
        assert_eq!(p.state().crf[1], 0.5f64.powi(2) + 1.0);
        assert_eq!(p.state().last_hit, vec![0, 3, 2]);
    }

    #[test]
    fn evicts_lowest_decayed_score() {
        // B=2, entries a(0), b(1), c(2). At t=3 a and c are hit.
        let mut p = LrfuPolicy::new(2, 0.5, 0.9);
        for pos in 0..3 {
            p.append(pos, pos).unwrap();
        }
        let ev = p.compress_step(&[0.45, 0.1, 0.45], 3).unwrap();
        // temps: a = 0.5^3 + 1, b = 0.5^2, c = 0.5 + 1.
        assert_eq!(ev, vec![Eviction { position: 1, score: 0.25 }]);
        assert_eq!(p.state().retained, vec![0, 2]);
        assert_eq!(p.state().crf, vec![1.125, 1.5]);
        assert_eq!(p.state().last_hit, vec![3, 3]);
    }

    #[test]
    fn ties_break_toward_recent_hit_then_position() {
        let mut p = LrfuPolicy::new(1, 0.0, 0.9);
        p.append(0, 0).unwrap();
        p.append(1, 1).unwrap();
        // No hits at all (zero scores): both decay to zero, last hit decides.
        let ev = p.compress_step(&[0.0, 0.0], 5).unwrap();
        assert_eq!(ev[0].position, 0);
        assert_eq!(p.state().retained, vec![1]);
    }

    #[test]
    fn set_budget_shrinks_by_rank() {
        let mut p = LrfuPolicy::new(8, 0.5, 0.5);
        for pos in 0..8 {
            p.append(pos, 0).unwrap();
        }
        let scores: Vec<f64> = (0..8).map(|i| (i + 1) as f64 / 36.0).collect();
        p.compress_step(&scores, 1).unwrap();
        let ev = p.set_budget(5, 2);
        assert_eq!(ev.len(), 3);
        assert_eq!(p.state().retained.len(), 5);
        assert!(p.set_budget(9, 2).is_empty());
        assert_eq!(p.state().budget, 9);
    }

    #[test]
    fn protect_recent_keeps_newest() {
        let mut p = LrfuPolicy::new(2, 0.5, 0.9).with_protect_recent(1);
        for pos in 0..3 {
            p.append(pos, pos).unwrap();
        }
        p.compress_step(&[0.5, 0.5, 0.0], 3).unwrap();
        assert_eq!(p.state().retained, vec![1, 2]);
    }

    #[test]
    fn misaligned_scores_are_rejected() {
        let mut p = LrfuPolicy::new(2, 0.5, 0.9);
        p.append(0, 0).unwrap();
        assert_eq!(
            p.compress_step(&[0.5, 0.5], 1),
            Err(PolicyError::Alignment { expected: 1, got: 2 })
        );
    }

    fn brute_min_card(scores: &[f64], p: f64) -> usize {
        let n = scores.len();
        (0u32..1 << n)
            .filter(|m| (0..n).filter(|i| m >> i & 1 == 1).map(|i| scores[i]).sum::<f64>() >= p - MASK_EPS)
            .map(|m| m.count_ones() as usize)
            .min()
            .unwrap_or(n)
    }

    proptest! {
        #[test]
        fn hit_mask_is_minimal(raw in prop::collection::vec(0u32..20, 1..9), pi in 0usize..4) {
            let total: u32 = raw.iter().sum();
            prop_assume!(total > 0);
            let scores: Vec<f64> = raw.iter().map(|&x| x as f64 / total as f64).collect();
            let p = [0.5, 0.7, 0.9, 1.0][pi];
            let mask = compute_hit_mask(&scores, p);
            let mass: f64 = scores.iter().zip(&mask).filter(|(_, &m)| m).map(|(s, _)| s).sum();
            prop_assert!(mass >= p - MASK_EPS);
            prop_assert_eq!(hits(&mask).len(), brute_min_card(&scores, p));
        }

        #[test]
        fn incremental_equals_bruteforce(gaps in prop::collection::vec(0u32..30, 1..60), lambda in 0.01f64..0.99) {
            let mut h = HitHistory::new();
            let (mut crf, mut tau, mut t) = (0.0, 0u32, 0u32);
            for (k, g) in gaps.iter().enumerate() {
                t += if k == 0 { *g } else { g + 1 };
                (crf, tau) = crf_update_hit(crf, tau, t, lambda).unwrap();
                h.record(t).unwrap();
                let probe = t + g;
                let lazy = crf_decay(crf, tau, probe, lambda).unwrap();
                let exact = crf_bruteforce(&h, probe, lambda);
                prop_assert!((lazy - exact).abs() <= 1e-9 * exact.max(f64::MIN_POSITIVE));
            }
        }

        #[test]
        fn decay_never_increases(crf in 0.0f64..50.0, lambda in 0.0f64..=1.0, tau in 0u32..100, d in 0u32..50) {
            let a = crf_decay(crf, tau, tau + d, lambda).unwrap();
            let b = crf_decay(crf, tau, tau + d + 1, lambda).unwrap();
            prop_assert!(b <= a);
        }
    }
}
