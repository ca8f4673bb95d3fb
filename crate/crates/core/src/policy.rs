//! Per-head cache state, policy configuration and the common policy interface.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ErrorClass;

/// Retained mass below which renormalization is considered degenerate.
pub const DEGENERATE_MASS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("invalid policy configuration: {0}")]
    Config(String),
    #[error("position {position} appended after position {last}")]
    Ordering { position: u32, last: u32 },
    #[error("scores have length {got} but {expected} entries are retained")]
    Alignment { expected: usize, got: usize },
    #[error("timestamp {t} precedes last update {tau}")]
    Timestamp { tau: u32, t: u32 },
    #[error("retained position {position} outside a row of length {len}")]
    OutOfRow { position: u32, len: usize },
    #[error("retained attention mass {mass:e} is too small to renormalize")]
    DegenerateRow { mass: f64 },
}

impl PolicyError {
    pub fn class(&self) -> ErrorClass {
        match self {
            PolicyError::Config(_) => ErrorClass::Config,
            _ => ErrorClass::Invariant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "lrfu")]
    Lrfu,
    #[serde(rename = "lru")]
    Lru,
    #[serde(rename = "lfu")]
    Lfu,
    #[serde(rename = "sink")]
    SinkWindow,
    #[serde(rename = "accum")]
    AccumScore,
    #[serde(rename = "obs")]
    ObsWindow,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Lrfu,
        PolicyKind::Lru,
        PolicyKind::Lfu,
        PolicyKind::SinkWindow,
        PolicyKind::AccumScore,
        PolicyKind::ObsWindow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Lrfu => "lrfu",
            PolicyKind::Lru => "lru",
            PolicyKind::Lfu => "lfu",
            PolicyKind::SinkWindow => "sink",
            PolicyKind::AccumScore => "accum",
            PolicyKind::ObsWindow => "obs",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lrfu" => Ok(PolicyKind::Lrfu),
            "lru" => Ok(PolicyKind::Lru),
            "lfu" => Ok(PolicyKind::Lfu),
            "sink" | "sinkwindow" | "sink_window" => Ok(PolicyKind::SinkWindow),
            "accum" | "accumscore" | "accum_score" | "h2o" => Ok(PolicyKind::AccumScore),
            "obs" | "obswindow" | "obs_window" | "snapkv" => Ok(PolicyKind::ObsWindow),
            other => Err(PolicyError::Config(format!("unknown policy {other:?}"))),
        }
    }
}

/// How the initial per-head budget is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetMode {
    /// The same number of entries for every head.
    Fixed(u32),
    /// A fraction of the think length per head.
    Ratio(f64),
}

impl fmt::Display for BudgetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BudgetMode::Fixed(n) => write!(f, "fixed:{n}"),
            BudgetMode::Ratio(r) => write!(f, "ratio:{r}"),
        }
    }
}

impl FromStr for BudgetMode {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PolicyError::Config(format!("budget {s:?} is not fixed:N or ratio:R"));
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        match kind.trim().to_ascii_lowercase().as_str() {
            "fixed" => value.trim().parse().map(BudgetMode::Fixed).map_err(|_| bad()),
            "ratio" => {
                let r: f64 = value.trim().parse().map_err(|_| bad())?;
                if r > 0.0 && r.is_finite() {
                    Ok(BudgetMode::Ratio(r))
                } else {
                    Err(PolicyError::Config(format!("budget ratio {r} must be positive")))
                }
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub policy: PolicyKind,
    pub lambda: f64,
    pub top_p: f64,
    pub alpha_bound: f64,
    pub beta_bound: f64,
    /// Reject a lambda outside (alpha, beta) instead of warning.
    pub strict_bounds: bool,
    pub budget_mode: BudgetMode,
    /// Reallocation period in decode steps; 0 disables reallocation.
    pub realloc_interval: u32,
    pub b_min: u32,
    pub renormalize: bool,
    pub sink_size: u32,
    /// Recent window always kept by the accumulated-score policy (0 = none).
    pub window_size: u32,
    pub obs_window: u32,
    pub protect_recent: u32,
    /// Record hits while the cache is still under budget.
    pub warmup_tracking: bool,
    /// Keep appending and compressing through the answer stage.
    pub compress_answer: bool,
    /// Reset stored CRF to zero-age after every reallocation.
    pub reset_crf_on_realloc: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            policy: PolicyKind::Lrfu,
            lambda: 0.6,
            top_p: 0.9,
            alpha_bound: 0.3,
            beta_bound: 0.9,
            strict_bounds: false,
            budget_mode: BudgetMode::Ratio(0.10),
            realloc_interval: 128,
            b_min: 16,
            renormalize: true,
            sink_size: 4,
            window_size: 0,
            obs_window: 32,
            protect_recent: 0,
            warmup_tracking: false,
            compress_answer: false,
            reset_crf_on_realloc: false,
        }
    }
}

impl PolicyConfig {
    pub fn with_policy(policy: PolicyKind) -> Self {
        PolicyConfig { policy, ..PolicyConfig::default() }
    }

    /// Checks the policy-independent invariants. Returns warnings for soft
    /// violations that are allowed unless `strict_bounds` is set.
    pub fn validate(&self) -> Result<Vec<String>, PolicyError> {
        let fail = |m: String| Err(PolicyError::Config(m));
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return fail(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(0.0 < self.alpha_bound && self.alpha_bound < self.beta_bound && self.beta_bound < 1.0) {
            return fail(format!(
                "bounds must satisfy 0 < alpha < beta < 1, got alpha={} beta={}",
                self.alpha_bound, self.beta_bound
            ));
        }
        if self.b_min == 0 {
            return fail("b_min must be at least 1".into());
        }
        if self.policy == PolicyKind::ObsWindow && self.obs_window == 0 {
            return fail("obs_window must be positive".into());
        }
        let mut warnings = Vec::new();
        if self.policy == PolicyKind::Lrfu
            && !(self.alpha_bound < self.lambda && self.lambda < self.beta_bound)
        {
            let msg = format!(
                "lambda {} outside the recommended bounds ({}, {})",
                self.lambda, self.alpha_bound, self.beta_bound
            );
            if self.strict_bounds {
                return fail(msg);
            }
            warnings.push(msg);
        }
        Ok(warnings)
    }
}

/// Retained think positions of one head and their per-entry bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCacheState {
    pub retained: Vec<u32>,
    pub crf: Vec<f64>,
    pub last_hit: Vec<u32>,
    pub aux: Vec<f64>,
    pub budget: u32,
}

impl HeadCacheState {
    pub fn new(budget: u32) -> Self {
        HeadCacheState { retained: Vec::new(), crf: Vec::new(), last_hit: Vec::new(), aux: Vec::new(), budget }
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    /// Appends a newly arrived entry. Arrival counts as a hit at `t`.
    pub fn append_entry(&mut self, position: u32, t: u32) -> Result<(), PolicyError> {
        if let Some(&last) = self.retained.last() {
            if position <= last {
                return Err(PolicyError::Ordering { position, last });
            }
        }
        self.retained.push(position);
        self.crf.push(1.0);
        self.last_hit.push(t);
        self.aux.push(0.0);
        Ok(())
    }

    /// Keeps only the entries at `keep` (ascending indices).
    pub fn retain_indices(&mut self, keep: &[usize]) {
        gather(&mut self.retained, keep);
        gather(&mut self.crf, keep);
        gather(&mut self.last_hit, keep);
        gather(&mut self.aux, keep);
    }

    pub fn check_alignment(&self, scores: &[f64]) -> Result<(), PolicyError> {
        if scores.len() != self.len() {
            return Err(PolicyError::Alignment { expected: self.len(), got: scores.len() });
        }
        Ok(())
    }
}

/// Keeps `v[i]` for every `i` in `keep` (ascending), in order.
pub(crate) fn gather<T: Copy>(v: &mut Vec<T>, keep: &[usize]) {
    for (dst, &src) in keep.iter().enumerate() {
        v[dst] = v[src];
    }
    v.truncate(keep.len());
}

/// An entry removed from a head's cache with the score it was ranked by.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eviction {
    pub position: u32,
    pub score: f64,
}

/// Splits entries `0..n` into kept and evicted indices.
///
/// The `protect` highest indices (the most recent positions) are always kept;
/// the rest of the budget goes to the entries ranked highest by `better`,
/// which must be a total order. Both returned lists are ascending.
pub(crate) fn select_keep(
    n: usize,
    budget: usize,
    protect: usize,
    better: impl Fn(usize, usize) -> Ordering,
) -> (Vec<usize>, Vec<usize>) {
    if n <= budget {
        return ((0..n).collect(), Vec::new());
    }
    let protect = protect.min(budget);
    let open = n - protect;
    let mut idx: Vec<usize> = (0..open).collect();
    let take = budget - protect;
    if take < open {
        idx.select_nth_unstable_by(take, |&a, &b| better(b, a));
        idx[..take].sort_by(|&a, &b| better(b, a));
    }
    let mut keep: Vec<usize> = idx[..take].to_vec();
    let mut evict: Vec<usize> = idx[take..].to_vec();
    keep.extend(open..n);
    keep.sort_unstable();
    evict.sort_unstable();
    (keep, evict)
}

/// Gathers `full_row` at `retained` and optionally renormalizes.
pub fn restricted_scores(full_row: &[f32], retained: &[u32], renormalize: bool) -> Result<Vec<f64>, PolicyError> {
    let mut out = Vec::with_capacity(retained.len());
    for &p in retained {
        let v = *full_row
            .get(p as usize)
            .ok_or(PolicyError::OutOfRow { position: p, len: full_row.len() })?;
        out.push(v as f64);
    }
    if renormalize && !out.is_empty() {
        let mass: f64 = out.iter().sum();
        if mass < DEGENERATE_MASS {
            return Err(PolicyError::DegenerateRow { mass });
        }
        for v in out.iter_mut() {
            *v /= mass;
        }
    }
    Ok(out)
}

/// [`restricted_scores`] with the uniform fallback for degenerate rows.
pub fn visible_scores(full_row: &[f32], retained: &[u32], renormalize: bool) -> Result<Vec<f64>, PolicyError> {
    match restricted_scores(full_row, retained, renormalize) {
        Err(PolicyError::DegenerateRow { mass }) => {
            log::warn!(
                "retained mass {mass:e} over {} entries is degenerate; using uniform scores",
                retained.len()
            );
            Ok(vec![1.0 / retained.len() as f64; retained.len()])
        }
        other => other,
    }
}

/// The per-head policy interface driven by the replay engine.
pub trait CachePolicy: Send {
    fn kind(&self) -> PolicyKind;

    fn state(&self) -> &HeadCacheState;

    /// Adds the entry for `position`, which arrived at step `t`.
    fn append(&mut self, position: u32, t: u32) -> Result<(), PolicyError>;

    /// One compression step. `scores` aligns with the retained entries,
    /// including the entry appended at this step.
    fn compress_step(&mut self, scores: &[f64], t: u32) -> Result<Vec<Eviction>, PolicyError>;

    /// Changes the budget, evicting down to it immediately if needed.
    fn set_budget(&mut self, budget: u32, t: u32) -> Vec<Eviction>;

    /// Aggregated utilization at `t`, for policies that support reallocation.
    fn utilization_mass(&self, _t: u32) -> Option<f64> {
        None
    }

    /// Restarts per-entry scores after a reallocation (ablation hook).
    fn reset_scores(&mut self, _t: u32) {}
}
