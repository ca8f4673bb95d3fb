//! Comparison policies behind the [`CachePolicy`] interface.
//!
//! LRU and LFU use the same top-p hit definition as LRFU and the same
//! early-return rule, so they coincide with LRFU at its limits. SinkWindow is
//! purely positional. AccumScore and ObsWindow rank by attention received,
//! summed over all past queries or over a trailing window of queries.

use std::collections::VecDeque;

use crate::lrfu::{compute_hit_mask, LrfuPolicy};
use crate::policy::{
    gather, select_keep, CachePolicy, Eviction, HeadCacheState, PolicyConfig, PolicyError, PolicyKind,
};

/// Number of steps before the last hit that LRU consults to break ties.
///
/// This is the recency pattern LRFU still resolves as λ approaches zero in
/// double precision: with λ = 1e-6, λ³ falls below the unit roundoff relative
/// to the leading term, so only hits one and two steps back are visible.
pub const LRU_TIE_WINDOW: u32 = 2;

/// Hit pattern after a hit at `t` given the previous last hit `tau`.
/// Bit 1 is a hit one step before the last hit, bit 0 two steps before.
fn shift_pattern(pattern: u8, tau: u32, t: u32) -> u8 {
    match t - tau {
        1 => 0b10 | (pattern >> 1),
        2 => 0b01,
        _ => 0,
    }
}

fn evictions(state: &HeadCacheState, evict: &[usize], score: impl Fn(usize) -> f64) -> Vec<Eviction> {
    evict
        .iter()
        .map(|&i| Eviction { position: state.retained[i], score: score(i) })
        .collect()
}

/// Least recently used. `last_hit` holds the most recent hit; ties on it are
/// broken by hits in the [`LRU_TIE_WINDOW`] steps before it, then by position.
#[derive(Debug, Clone)]
pub struct LruPolicy {
    state: HeadCacheState,
    pattern: Vec<u8>,
    top_p: f64,
    protect_recent: usize,
    warmup_tracking: bool,
}

impl LruPolicy {
    pub fn new(budget: u32, top_p: f64) -> Self {
        LruPolicy {
            state: HeadCacheState::new(budget),
            pattern: Vec::new(),
            top_p,
            protect_recent: 0,
            warmup_tracking: false,
        }
    }

    fn evict_to_budget(&mut self) -> Vec<Eviction> {
        let s = &self.state;
        let h = &self.pattern;
        let (keep, evict) = select_keep(s.len(), s.budget as usize, self.protect_recent, |a, b| {
            s.last_hit[a]
                .cmp(&s.last_hit[b])
                .then(h[a].cmp(&h[b]))
                .then(s.retained[a].cmp(&s.retained[b]))
        });
        let out = evictions(s, &evict, |i| s.last_hit[i] as f64);
        self.state.retain_indices(&keep);
        gather(&mut self.pattern, &keep);
        out
    }
}

fn gather_vecs<T>(v: &mut Vec<T>, keep: &[usize]) {
    let mut k = keep.iter().peekable();
    let mut i = 0;
    v.retain(|_| {
        let hit = k.peek() == Some(&&i);
        if hit {
            k.next();
        }
        i += 1;
        hit
    });
}

impl CachePolicy for LruPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Lru
    }

    fn state(&self) -> &HeadCacheState {
        &self.state
    }

    fn append(&mut self, position: u32, t: u32) -> Result<(), PolicyError> {
        self.state.append_entry(position, t)?;
        self.pattern.push(0);
        Ok(())
    }

    fn compress_step(&mut self, scores: &[f64], t: u32) -> Result<Vec<Eviction>, PolicyError> {
        self.state.check_alignment(scores)?;
        let under = self.state.len() < self.state.budget as usize;
        if under && !self.warmup_tracking {
            return Ok(Vec::new());
        }
        for (i, hit) in compute_hit_mask(scores, self.top_p).into_iter().enumerate() {
            let tau = self.state.last_hit[i];
            if hit && tau != t {
                self.pattern[i] = shift_pattern(self.pattern[i], tau, t);
                self.state.last_hit[i] = t;
            }
        }
        if under {
            return Ok(Vec::new());
        }
        Ok(self.evict_to_budget())
    }

    fn set_budget(&mut self, budget: u32, _t: u32) -> Vec<Eviction> {
        self.state.budget = budget;
        self.evict_to_budget()
    }
}

/// Least frequently used. `aux` holds the hit count (arrival included).
#[derive(Debug, Clone)]
pub struct LfuPolicy {
    state: HeadCacheState,
    top_p: f64,
    protect_recent: usize,
    warmup_tracking: bool,
}

impl LfuPolicy {
    pub fn new(budget: u32, top_p: f64) -> Self {
        LfuPolicy { state: HeadCacheState::new(budget), top_p, protect_recent: 0, warmup_tracking: false }
    }

    fn evict_to_budget(&mut self) -> Vec<Eviction> {
        let s = &self.state;
        let (keep, evict) = select_keep(s.len(), s.budget as usize, self.protect_recent, |a, b| {
            s.aux[a]
                .total_cmp(&s.aux[b])
                .then(s.last_hit[a].cmp(&s.last_hit[b]))
                .then(s.retained[a].cmp(&s.retained[b]))
        });
        let out = evictions(s, &evict, |i| s.aux[i]);
        self.state.retain_indices(&keep);
        out
    }
}

impl CachePolicy for LfuPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Lfu
    }

    fn state(&self) -> &HeadCacheState {
        &self.state
    }

    fn append(&mut self, position: u32, t: u32) -> Result<(), PolicyError> {
        self.state.append_entry(position, t)?;
        *self.state.aux.last_mut().unwrap() = 1.0;
        Ok(())
    }

    fn compress_step(&mut self, scores: &[f64], t: u32) -> Result<Vec<Eviction>, PolicyError> {
        self.state.check_alignment(scores)?;
        let under = self.state.len() < self.state.budget as usize;
        if under && !self.warmup_tracking {
            return Ok(Vec::new());
        }
        for (i, hit) in compute_hit_mask(scores, self.top_p).into_iter().enumerate() {
            if hit {
                self.state.aux[i] += 1.0;
                self.state.last_hit[i] = t;
            }
        }
        if under {
            return Ok(Vec::new());
        }
        Ok(self.evict_to_budget())
    }

    fn set_budget(&mut self, budget: u32, _t: u32) -> Vec<Eviction> {
        self.state.budget = budget;
        self.evict_to_budget()
    }
}

/// Keeps the first `sink_size` entries and the most recent remainder.
#[derive(Debug, Clone)]
pub struct SinkWindowPolicy {
    state: HeadCacheState,
    sink_size: usize,
}

impl SinkWindowPolicy {
    pub fn new(budget: u32, sink_size: u32) -> Result<Self, PolicyError> {
        if sink_size >= budget {
            return Err(PolicyError::Config(format!(
                "sink_size {sink_size} leaves no window inside budget {budget}"
            )));
        }
        Ok(SinkWindowPolicy { state: HeadCacheState::new(budget), sink_size: sink_size as usize })
    }

    fn evict_to_budget(&mut self) -> Vec<Eviction> {
        let n = self.state.len();
        let b = self.state.budget as usize;
        if n <= b {
            return Vec::new();
        }
        let sink = self.sink_size.min(b);
        let keep: Vec<usize> = (0..sink).chain(n - (b - sink)..n).collect();
        let out = evictions(&self.state, &(sink..n - (b - sink)).collect::<Vec<_>>(), |_| 0.0);
        self.state.retain_indices(&keep);
        out
    }
}

impl CachePolicy for SinkWindowPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::SinkWindow
    }

    fn state(&self) -> &HeadCacheState {
        &self.state
    }

    fn append(&mut self, position: u32, t: u32) -> Result<(), PolicyError> {
        self.state.append_entry(position, t)
    }

    fn compress_step(&mut self, scores: &[f64], _t: u32) -> Result<Vec<Eviction>, PolicyError> {
        self.state.check_alignment(scores)?;
        Ok(self.evict_to_budget())
    }

    fn set_budget(&mut self, budget: u32, _t: u32) -> Vec<Eviction> {
        self.state.budget = budget;
        self.evict_to_budget()
    }
}

/// Ranks by attention accumulated over every query since arrival. `aux`
/// holds the running sum.
#[derive(Debug, Clone)]
pub struct AccumScorePolicy {
    state: HeadCacheState,
    protect_recent: usize,
}

impl AccumScorePolicy {
    pub fn new(budget: u32, recent_window: u32) -> Self {
        AccumScorePolicy { state: HeadCacheState::new(budget), protect_recent: recent_window as usize }
    }
}

fn evict_by_aux(state: &mut HeadCacheState, protect: usize) -> (Vec<usize>, Vec<Eviction>) {
    let s = &*state;
    let (keep, evict) = select_keep(s.len(), s.budget as usize, protect, |a, b| {
        s.aux[a].total_cmp(&s.aux[b]).then(s.retained[a].cmp(&s.retained[b]))
    });
    let out = evictions(s, &evict, |i| s.aux[i]);
    state.retain_indices(&keep);
    (keep, out)
}

impl CachePolicy for AccumScorePolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::AccumScore
    }

    fn state(&self) -> &HeadCacheState {
        &self.state
    }

    fn append(&mut self, position: u32, t: u32) -> Result<(), PolicyError> {
        self.state.append_entry(position, t)
    }

    fn compress_step(&mut self, scores: &[f64], _t: u32) -> Result<Vec<Eviction>, PolicyError> {
        self.state.check_alignment(scores)?;
        for (a, s) in self.state.aux.iter_mut().zip(scores) {
            *a += s;
        }
        Ok(evict_by_aux(&mut self.state, self.protect_recent).1)
    }

    fn set_budget(&mut self, budget: u32, _t: u32) -> Vec<Eviction> {
        self.state.budget = budget;
        evict_by_aux(&mut self.state, self.protect_recent).1
    }
}

/// Ranks by attention received from the last `obs_window` queries. `aux`
/// holds the windowed sum.
#[derive(Debug, Clone)]
pub struct ObsWindowPolicy {
    state: HeadCacheState,
    windows: Vec<VecDeque<f64>>,
    obs_window: usize,
    protect_recent: usize,
}

impl ObsWindowPolicy {
    pub fn new(budget: u32, obs_window: u32) -> Result<Self, PolicyError> {
        if obs_window == 0 {
            return Err(PolicyError::Config("obs_window must be positive".into()));
        }
        Ok(ObsWindowPolicy {
            state: HeadCacheState::new(budget),
            windows: Vec::new(),
            obs_window: obs_window as usize,
            protect_recent: 0,
        })
    }

    fn evict_to_budget(&mut self) -> Vec<Eviction> {
        let (keep, out) = evict_by_aux(&mut self.state, self.protect_recent);
        gather_vecs(&mut self.windows, &keep);
        out
    }
}

impl CachePolicy for ObsWindowPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::ObsWindow
    }

    fn state(&self) -> &HeadCacheState {
        &self.state
    }

    fn append(&mut self, position: u32, t: u32) -> Result<(), PolicyError> {
        self.state.append_entry(position, t)?;
        self.windows.push(VecDeque::with_capacity(self.obs_window));
        Ok(())
    }

    fn compress_step(&mut self, scores: &[f64], _t: u32) -> Result<Vec<Eviction>, PolicyError> {
        self.state.check_alignment(scores)?;
        for ((ring, aux), &s) in self.windows.iter_mut().zip(self.state.aux.iter_mut()).zip(scores) {
            if ring.len() == self.obs_window {
                ring.pop_front();
            }
            ring.push_back(s);
            *aux = ring.iter().sum();
        }
        Ok(self.evict_to_budget())
    }

    fn set_budget(&mut self, budget: u32, _t: u32) -> Vec<Eviction> {
        self.state.budget = budget;
        self.evict_to_budget()
    }
}

/// Builds the policy selected by `config` for one head with `budget` entries.
pub fn select_policy(config: &PolicyConfig, budget: u32) -> Result<Box<dyn CachePolicy>, PolicyError> {
    if budget == 0 {
        return Err(PolicyError::Config("budget must be positive".into()));
    }
    let protect = config.protect_recent as usize;
    let policy: Box<dyn CachePolicy> = match config.policy {
        PolicyKind::Lrfu => Box::new(
            LrfuPolicy::new(budget, config.lambda, config.top_p)
                .with_protect_recent(config.protect_recent)
                .with_warmup_tracking(config.warmup_tracking),
        ),
        PolicyKind::Lru => {
            let mut p = LruPolicy::new(budget, config.top_p);
            p.protect_recent = protect;
            p.warmup_tracking = config.warmup_tracking;
            Box::new(p)
        }
        PolicyKind::Lfu => {
            let mut p = LfuPolicy::new(budget, config.top_p);
            p.protect_recent = protect;
            p.warmup_tracking = config.warmup_tracking;
            Box::new(p)
        }
        PolicyKind::SinkWindow => Box::new(SinkWindowPolicy::new(budget, config.sink_size)?),
        PolicyKind::AccumScore => {
            Box::new(AccumScorePolicy::new(budget, config.window_size.max(config.protect_recent)))
        }
        PolicyKind::ObsWindow => {
            let mut p = ObsWindowPolicy::new(budget, config.obs_window)?;
            p.protect_recent = protect;
            Box::new(p)
        }
    };
    Ok(policy)
}
