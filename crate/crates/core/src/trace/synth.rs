//! Synthetic traces with planted crystal and slip positions.
//!
//! Every think position is a slip unless it is planted as a crystal. A slip
//! created at position `s` receives weight `2^-(t-s)/h` from the query at `t`
//! (prompt positions behave like slips). A crystal receives spikes of
//! `spike_weight` at renewal times with geometric gaps of mean
//! `crystal_gap_mean`, from creation to the end of the think stage. Answer
//! queries give `crystal_answer_mass` to the crystals in equal shares and
//! spread the rest uniformly over every other position.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AttentionTrace, StepRecord, TraceError, TraceHeader};

/// Relative size of the noise floor added to every position when
/// `noise_scale > 0`.
const NOISE_FLOOR: f64 = 1e-3;

/// Largest quantization carry, relative to the entry, folded into one entry.
const MAX_RELATIVE_CARRY: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub prompt_len: u32,
    pub think_len: u32,
    pub answer_len: u32,
    pub crystal_fraction: f64,
    pub crystal_gap_mean: f64,
    pub slip_halflife: f64,
    pub crystal_answer_mass: f64,
    pub noise_scale: f64,
    pub num_layers: u32,
    pub num_heads: u32,
    pub heterogeneity: f64,
    /// Unnormalized weight of one crystal spike.
    pub spike_weight: f64,
    /// Whether crystals also get the slip-style local attention after creation.
    pub crystal_local: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            prompt_len: 16,
            think_len: 400,
            answer_len: 40,
            crystal_fraction: 0.3,
            crystal_gap_mean: 1.2,
            slip_halflife: 4.0,
            crystal_answer_mass: 0.8,
            noise_scale: 0.0,
            num_layers: 2,
            num_heads: 4,
            heterogeneity: 1.0,
            spike_weight: 2.5,
            crystal_local: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), TraceError> {
        let fail = |msg: String| Err(TraceError::Synthetic(msg));
        if self.num_layers == 0 || self.num_heads == 0 {
            return fail("num_layers and num_heads must be positive".into());
        }
        if self.prompt_len == 0 {
            return fail("prompt_len must be at least 1".into());
        }
        if self.think_len == 0 {
            return fail("think_len must be at least 1".into());
        }
        if !(self.crystal_fraction > 0.0 && self.crystal_fraction <= 0.5) {
            return fail(format!("crystal_fraction {} outside (0, 0.5]", self.crystal_fraction));
        }
        if self.crystal_fraction * (self.think_len as f64) < 1.0 {
            return fail(format!(
                "crystal_fraction * think_len = {} plants no crystal",
                self.crystal_fraction * self.think_len as f64
            ));
        }
        if !(self.crystal_answer_mass > 0.0 && self.crystal_answer_mass <= 1.0) {
            return fail(format!("crystal_answer_mass {} outside (0, 1]", self.crystal_answer_mass));
        }
        if !(self.crystal_gap_mean >= 1.0 && self.crystal_gap_mean.is_finite()) {
            return fail(format!("crystal_gap_mean {} must be >= 1", self.crystal_gap_mean));
        }
        if !(self.slip_halflife > 0.0 && self.slip_halflife.is_finite()) {
            return fail(format!("slip_halflife {} must be positive", self.slip_halflife));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return fail(format!("noise_scale {} must be nonnegative", self.noise_scale));
        }
        if !(self.heterogeneity >= 1.0 && self.heterogeneity.is_finite()) {
            return fail(format!("heterogeneity {} must be >= 1", self.heterogeneity));
        }
        if !(self.spike_weight > 0.0 && self.spike_weight.is_finite()) {
            return fail(format!("spike_weight {} must be positive", self.spike_weight));
        }
        Ok(())
    }

    pub fn num_positions(&self) -> u32 {
        self.prompt_len + self.think_len + self.answer_len
    }
}

/// Planted crystal positions of one head, as absolute positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLabels {
    pub layer: u32,
    pub head: u32,
    pub crystal: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedLabels {
    pub spec: SyntheticSpec,
    pub heads: Vec<HeadLabels>,
}

/// Per-head crystal fraction multipliers, log-spaced over `[1/het, 1]`.
fn head_factors(spec: &SyntheticSpec) -> Vec<f64> {
    let n = (spec.num_layers * spec.num_heads) as usize;
    if n == 1 || spec.heterogeneity <= 1.0 {
        return vec![1.0; n];
    }
    let lo = -spec.heterogeneity.ln();
    let mut f: Vec<f64> = (0..n)
        .map(|i| (lo + (0.0 - lo) * i as f64 / (n - 1) as f64).exp())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    f.shuffle(&mut rng);
    f
}

struct HeadPlan {
    crystal: Vec<u32>,
    /// For each think query offset, the crystal positions spiking at it.
    spikes: Vec<Vec<u32>>,
}

fn plan_head(spec: &SyntheticSpec, factor: f64, rng: &mut ChaCha8Rng) -> HeadPlan {
    let think = spec.think_len as usize;
    let target = (spec.crystal_fraction * factor * spec.think_len as f64 + 1e-9).floor() as usize;
    let count = target.clamp(1, think);
    let mut offsets = index::sample(rng, think, count).into_vec();
    offsets.sort_unstable();

    let gap = Geometric::new(1.0 / spec.crystal_gap_mean).expect("gap mean validated");
    let mut spikes = vec![Vec::new(); think];
    for &c in &offsets {
        let mut q = c as u64;
        loop {
            q += 1 + gap.sample(rng);
            if q >= think as u64 {
                break;
            }
            spikes[q as usize].push(spec.prompt_len + c as u32);
        }
    }
    HeadPlan {
        crystal: offsets.iter().map(|&c| spec.prompt_len + c as u32).collect(),
        spikes,
    }
}

/// Normalizes `w` in f64 and quantizes to f32 so that the f64 sum of the
/// stored values stays within about 1e-12 of one.
fn normalize_row(w: &[f64]) -> Vec<f32> {
    let total: f64 = w.iter().sum();
    let p: Vec<f64> = w.iter().map(|x| x / total).collect();
    let mut out: Vec<f32> = p.iter().map(|&x| x as f32).collect();
    let mut order: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(b.cmp(&a)));
    let mut carry = 0.0f64;
    for i in order {
        // Never let the carry distort an entry by more than a relative 1e-2.
        let target = if carry.abs() <= MAX_RELATIVE_CARRY * p[i] { p[i] + carry } else { p[i] };
        out[i] = target as f32;
        carry += p[i] - out[i] as f64;
    }
    out
}

fn jitter(w: &mut [f64], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    let mean = w.iter().sum::<f64>() / w.len().max(1) as f64;
    let floor = sigma * NOISE_FLOOR * mean;
    for x in w.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x = *x * (sigma * z).exp() + floor;
    }
}

/// Generates a trace and the planted crystal labels of every head.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(AttentionTrace, PlantedLabels), TraceError> {
    spec.validate()?;
    let header = TraceHeader::from_lengths(
        spec.num_layers,
        spec.num_heads,
        spec.prompt_len,
        spec.think_len,
        spec.answer_len,
    );
    let n = header.num_positions as usize;
    let decay: Vec<f64> = (0..=n).map(|k| (-(k as f64) / spec.slip_halflife).exp2()).collect();
    let factors = head_factors(spec);
    let pairs = header.num_head_pairs();

    let mut rows: Vec<Vec<Vec<f32>>> = Vec::with_capacity(pairs);
    let mut labels = Vec::with_capacity(pairs);
    for (idx, &factor) in factors.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(idx as u64);
        let plan = plan_head(spec, factor, &mut rng);
        let mut is_crystal = vec![false; n];
        for &c in &plan.crystal {
            is_crystal[c as usize] = true;
        }
        let mut head_rows = Vec::with_capacity(n - spec.prompt_len as usize);
        let mut w = Vec::with_capacity(n);
        for t in spec.prompt_len as usize..n {
            w.clear();
            let q = t - spec.prompt_len as usize;
            if q < spec.think_len as usize {
                w.extend((0..t).map(|s| {
                    if is_crystal[s] && !spec.crystal_local {
                        0.0
                    } else {
                        decay[t - s]
                    }
                }));
                for &c in &plan.spikes[q] {
                    w[c as usize] += spec.spike_weight;
                }
            } else {
                let crystals = plan.crystal.len() as f64;
                let others = (t as f64 - crystals).max(1.0);
                let cm = spec.crystal_answer_mass / crystals;
                let om = (1.0 - spec.crystal_answer_mass) / others;
                w.extend((0..t).map(|s| if is_crystal[s] { cm } else { om }));
            }
            jitter(&mut w, spec.noise_scale, &mut rng);
            head_rows.push(normalize_row(&w));
        }
        rows.push(head_rows);
        labels.push(HeadLabels {
            layer: idx as u32 / spec.num_heads,
            head: idx as u32 % spec.num_heads,
            crystal: plan.crystal,
        });
    }

    let mut steps = Vec::with_capacity(pairs * (n - spec.prompt_len as usize));
    let mut iters: Vec<_> = rows.into_iter().map(|r| r.into_iter()).collect();
    for t in spec.prompt_len..n as u32 {
        for (idx, it) in iters.iter_mut().enumerate() {
            steps.push(StepRecord {
                layer: idx as u32 / spec.num_heads,
                head: idx as u32 % spec.num_heads,
                query_position: t,
                scores: it.next().expect("one row per decode position"),
            });
        }
    }
    Ok((
        AttentionTrace::new(header, steps),
        PlantedLabels { spec: spec.clone(), heads: labels },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::validate_trace;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            think_len: 60,
            answer_len: 8,
            prompt_len: 4,
            num_layers: 1,
            num_heads: 2,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generated_trace_is_valid_and_rows_sum_to_one() {
        let (trace, labels) = generate_synthetic(&small()).unwrap();
        assert!(validate_trace(&trace).is_empty());
        assert_eq!(labels.heads.len(), 2);
        for rec in &trace.steps {
            let s: f64 = rec.scores.iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() <= 1e-9, "row sum {s}");
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.0.fingerprint(), b.0.fingerprint());
        assert_eq!(a.1, b.1);
        let c = generate_synthetic(&SyntheticSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.0.fingerprint(), c.0.fingerprint());
    }

    #[test]
    fn slip_attention_halves_per_step_at_halflife_one() {
        let spec = SyntheticSpec { slip_halflife: 1.0, ..small() };
        let (trace, labels) = generate_synthetic(&spec).unwrap();
        let crystal = &labels.heads[0].crystal;
        let t = spec.prompt_len + 30;
        let row = trace.row(0, 0, t).unwrap();
        let slips: Vec<u32> = (t - 8..t).filter(|p| !crystal.contains(p)).collect();
        for w in slips.windows(2) {
            let (a, b) = (w[0], w[1]);
            if row[a as usize] == 0.0 || row[b as usize] == 0.0 {
                continue;
            }
            let want = (-((b - a) as f64)).exp2();
            let got = row[a as usize] as f64 / row[b as usize] as f64;
            // Spikes only land on crystals, so slip ratios are exact up to f32 rounding.
            assert!((got - want).abs() < 1e-5 * want, "ratio {got} vs {want}");
        }
    }

    #[test]
    fn crystal_count_follows_fraction() {
        let (_, labels) = generate_synthetic(&SyntheticSpec::default()).unwrap();
        for h in &labels.heads {
            assert_eq!(h.crystal.len(), 120);
            assert!(h.crystal.windows(2).all(|w| w[0] < w[1]));
            assert!(h.crystal.iter().all(|&c| (16..416).contains(&c)));
        }
    }

    #[test]
    fn heterogeneity_spreads_crystal_counts() {
        let spec = SyntheticSpec { heterogeneity: 3.0, ..SyntheticSpec::default() };
        let (_, labels) = generate_synthetic(&spec).unwrap();
        let mut counts: Vec<usize> = labels.heads.iter().map(|h| h.crystal.len()).collect();
        counts.sort_unstable();
        assert_eq!(counts[0], 40);
        assert_eq!(*counts.last().unwrap(), 120);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            SyntheticSpec { crystal_fraction: 0.0, ..small() },
            SyntheticSpec { crystal_fraction: 0.6, ..small() },
            SyntheticSpec { think_len: 2, crystal_fraction: 0.3, ..small() },
            SyntheticSpec { crystal_answer_mass: 0.0, ..small() },
            SyntheticSpec { crystal_gap_mean: 0.5, ..small() },
            SyntheticSpec { heterogeneity: 0.5, ..small() },
            SyntheticSpec { prompt_len: 0, ..small() },
        ] {
            assert!(matches!(generate_synthetic(&bad), Err(TraceError::Synthetic(_))), "{bad:?}");
        }
    }

    #[test]
    fn noisy_rows_are_still_normalized() {
        let spec = SyntheticSpec { noise_scale: 0.5, ..small() };
        let (trace, _) = generate_synthetic(&spec).unwrap();
        assert!(validate_trace(&trace).is_empty());
        for rec in &trace.steps {
            let s: f64 = rec.scores.iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn quantization_keeps_zeros_and_sum() {
        let w = [3.0, 0.0, 1e-30, 1.0, 1.0 / 3.0, 0.0];
        let q = normalize_row(&w);
        assert_eq!(q[1], 0.0);
        assert_eq!(q[5], 0.0);
        let s: f64 = q.iter().map(|&x| x as f64).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
