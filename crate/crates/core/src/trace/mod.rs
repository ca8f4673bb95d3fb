//! Attention traces: per-(layer, head) post-softmax rows for every decode
//! position of a prompt/think/answer sequence.

mod format;
pub mod synth;

use std::fmt;
use std::io;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::ErrorClass;

pub use format::{read_trace, write_trace, write_trace_text, TraceReader};
pub use synth::{generate_synthetic, PlantedLabels, SyntheticSpec};

/// Current on-disk schema version.
pub const SCHEMA_VERSION: u32 = 1;

/// Tolerance on the row-sum invariant of stored rows.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prompt,
    Think,
    Answer,
}

impl Phase {
    pub(crate) fn code(self) -> u8 {
        match self {
            Phase::Prompt => 0,
            Phase::Think => 1,
            Phase::Answer => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Phase> {
        match code {
            0 => Some(Phase::Prompt),
            1 => Some(Phase::Think),
            2 => Some(Phase::Answer),
            _ => None,
        }
    }

    pub(crate) fn letter(self) -> char {
        match self {
            Phase::Prompt => 'P',
            Phase::Think => 'T',
            Phase::Answer => 'A',
        }
    }

    pub(crate) fn from_letter(c: char) -> Option<Phase> {
        match c {
            'P' => Some(Phase::Prompt),
            'T' => Some(Phase::Think),
            'A' => Some(Phase::Answer),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Prompt => "prompt",
            Phase::Think => "think",
            Phase::Answer => "answer",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub num_layers: u32,
    pub num_heads: u32,
    pub num_positions: u32,
    /// Phase of every position, indexed by absolute position.
    pub phases: Vec<Phase>,
}

impl TraceHeader {
    /// Builds a header from contiguous phase lengths.
    pub fn from_lengths(
        num_layers: u32,
        num_heads: u32,
        prompt_len: u32,
        think_len: u32,
        answer_len: u32,
    ) -> Self {
        let mut phases = Vec::with_capacity((prompt_len + think_len + answer_len) as usize);
        phases.extend(std::iter::repeat_n(Phase::Prompt, prompt_len as usize));
        phases.extend(std::iter::repeat_n(Phase::Think, think_len as usize));
        phases.extend(std::iter::repeat_n(Phase::Answer, answer_len as usize));
        TraceHeader {
            schema_version: SCHEMA_VERSION,
            num_layers,
            num_heads,
            num_positions: phases.len() as u32,
            phases,
        }
    }

    pub fn num_head_pairs(&self) -> usize {
        self.num_layers as usize * self.num_heads as usize
    }

    fn count(&self, phase: Phase) -> u32 {
        self.phases.iter().filter(|&&p| p == phase).count() as u32
    }

    pub fn prompt_len(&self) -> u32 {
        self.count(Phase::Prompt)
    }

    pub fn think_len(&self) -> u32 {
        self.count(Phase::Think)
    }

    pub fn answer_len(&self) -> u32 {
        self.count(Phase::Answer)
    }

    /// Absolute positions of the think stage (assumes ordered phases).
    pub fn think_range(&self) -> Range<u32> {
        let start = self.prompt_len();
        start..start + self.think_len()
    }

    pub fn answer_range(&self) -> Range<u32> {
        let start = self.prompt_len() + self.think_len();
        start..start + self.answer_len()
    }

    /// Positions that carry step records (think and answer).
    pub fn decode_range(&self) -> Range<u32> {
        self.prompt_len()..self.num_positions
    }

    pub fn phase_at(&self, position: u32) -> Option<Phase> {
        self.phases.get(position as usize).copied()
    }

    /// Run-length encoding of the phase list.
    pub fn phase_runs(&self) -> Vec<(Phase, u32)> {
        let mut runs: Vec<(Phase, u32)> = Vec::new();
        for &p in &self.phases {
            match runs.last_mut() {
                Some((last, n)) if *last == p => *n += 1,
                _ => runs.push((p, 1)),
            }
        }
        runs
    }

    /// Flat index of a (layer, head) pair.
    pub fn head_index(&self, layer: u32, head: u32) -> usize {
        layer as usize * self.num_heads as usize + head as usize
    }
}

/// Attention of one query position over all earlier positions of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub layer: u32,
    pub head: u32,
    pub query_position: u32,
    pub scores: Vec<f32>,
}

impl StepRecord {
    fn key(&self) -> (u32, u32, u32) {
        (self.query_position, self.layer, self.head)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub header: TraceHeader,
    /// Records sorted by (query_position, layer, head).
    pub steps: Vec<StepRecord>,
}

impl AttentionTrace {
    pub fn new(header: TraceHeader, steps: Vec<StepRecord>) -> Self {
        AttentionTrace { header, steps }
    }

    /// The attention row of `(layer, head)` at query position `t`.
    pub fn row(&self, layer: u32, head: u32, t: u32) -> Option<&[f32]> {
        let decode_start = self.header.prompt_len();
        if t >= decode_start {
            // Fast path for complete, canonically ordered traces.
            let idx = (t - decode_start) as usize * self.header.num_head_pairs()
                + self.header.head_index(layer, head);
            if let Some(rec) = self.steps.get(idx) {
                if rec.key() == (t, layer, head) {
                    return Some(&rec.scores);
                }
            }
        }
        self.steps
            .binary_search_by_key(&(t, layer, head), StepRecord::key)
            .ok()
            .map(|i| self.steps[i].scores.as_slice())
    }

    /// SHA-256 of the canonical binary encoding, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        let mut sink = HashWriter(&mut hasher);
        format::encode_unchecked(self, &mut sink).expect("hashing never fails");
        hex::encode(hasher.finalize())
    }
}

struct HashWriter<'a>(&'a mut Sha256);

impl io::Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Which invariant a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    HeaderShape,
    PositionCount,
    PhaseOrder,
    EmptyThink,
    LayerRange,
    HeadRange,
    PositionRange,
    PromptRecord,
    RowLength,
    NonFinite,
    NegativeScore,
    RowSum,
    Duplicate,
    Ordering,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub layer: Option<u32>,
    pub head: Option<u32>,
    pub position: Option<u32>,
    pub detail: String,
}

impl Violation {
    fn global(rule: Rule, detail: impl Into<String>) -> Self {
        Violation {
            rule,
            layer: None,
            head: None,
            position: None,
            detail: detail.into(),
        }
    }

    fn at(rule: Rule, layer: u32, head: u32, position: u32, detail: impl Into<String>) -> Self {
        Violation {
            rule,
            layer: Some(layer),
            head: Some(head),
            position: Some(position),
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.rule)?;
        if let (Some(l), Some(h), Some(p)) = (self.layer, self.head, self.position) {
            write!(f, " at (layer {l}, head {h}, position {p})")?;
        } else if let Some(p) = self.position {
            write!(f, " at position {p}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error ({context}): {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated trace: {records_read} of {records_expected} records read, last good record {last_good}")]
    Truncated {
        records_read: u64,
        records_expected: u64,
        last_good: LastGood,
    },
    #[error("trace is invalid ({} violation(s)); first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Invalid(Vec<Violation>),
    #[error("synthetic spec rejected: {0}")]
    Synthetic(String),
}

impl TraceError {
    pub fn class(&self) -> ErrorClass {
        match self {
            TraceError::Synthetic(_) => ErrorClass::Config,
            _ => ErrorClass::Io,
        }
    }
}

/// Location of the last fully decoded record, for truncation reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LastGood(pub Option<(u32, u32, u32)>);

impl fmt::Display for LastGood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some((l, h, t)) => write!(f, "(layer {l}, head {h}, position {t})"),
            None => f.write_str("<none>"),
        }
    }
}

/// Checks every trace invariant. An empty result means the trace is valid.
pub fn validate_trace(trace: &AttentionTrace) -> Vec<Violation> {
    let mut out = validate_header(&trace.header);
    let header = &trace.header;
    if out.iter().any(|v| matches!(v.rule, Rule::HeaderShape | Rule::PositionCount)) {
        return out;
    }

    let pairs = header.num_head_pairs();
    let decode = header.decode_range();
    let mut seen = vec![false; pairs * decode.len()];
    let mut prev: Option<(u32, u32, u32)> = None;

    for rec in &trace.steps {
        let (l, h, t) = (rec.layer, rec.head, rec.query_position);
        if let Some(p) = prev {
            if rec.key() <= p {
                let rule = if rec.key() == p { Rule::Duplicate } else { Rule::Ordering };
                out.push(Violation::at(rule, l, h, t, "records must be strictly sorted by (position, layer, head)"));
            }
        }
        prev = Some(rec.key());

        if l >= header.num_layers {
            out.push(Violation::at(Rule::LayerRange, l, h, t, format!("layer {l} >= {}", header.num_layers)));
            continue;
        }
        if h >= header.num_heads {
            out.push(Violation::at(Rule::HeadRange, l, h, t, format!("head {h} >= {}", header.num_heads)));
            continue;
        }
        match header.phase_at(t) {
            None => {
                out.push(Violation::at(Rule::PositionRange, l, h, t, format!("position {t} >= {}", header.num_positions)));
                continue;
            }
            Some(Phase::Prompt) => {
                out.push(Violation::at(Rule::PromptRecord, l, h, t, "prompt positions carry no records"));
                continue;
            }
            Some(_) => {}
        }
        let slot = (t - decode.start) as usize * pairs + header.head_index(l, h);
        if seen[slot]
            && !matches!(out.last(), Some(v) if v.rule == Rule::Duplicate) {
                out.push(Violation::at(Rule::Duplicate, l, h, t, "duplicate record"));
            }
        seen[slot] = true;

        if rec.scores.len() != t as usize {
            out.push(Violation::at(
                Rule::RowLength,
                l,
                h,
                t,
                format!("row has {} scores, expected {t}", rec.scores.len()),
            ));
            continue;
        }
        if let Some(i) = rec.scores.iter().position(|s| !s.is_finite()) {
            out.push(Violation::at(Rule::NonFinite, l, h, t, format!("score {i} is not finite")));
            continue;
        }
        if let Some(i) = rec.scores.iter().position(|&s| s < 0.0) {
            out.push(Violation::at(Rule::NegativeScore, l, h, t, format!("score {i} is negative")));
            continue;
        }
        if !rec.scores.is_empty() {
            let sum: f64 = rec.scores.iter().map(|&s| s as f64).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                out.push(Violation::at(Rule::RowSum, l, h, t, format!("row sums to {sum}")));
            }
        }
    }

    for (slot, present) in seen.iter().enumerate() {
        if !present {
            let t = decode.start + (slot / pairs) as u32;
            let pair = slot % pairs;
            let l = (pair / header.num_heads as usize) as u32;
            let h = (pair % header.num_heads as usize) as u32;
            out.push(Violation::at(Rule::Missing, l, h, t, "missing record"));
        }
    }
    out
}

fn validate_header(header: &TraceHeader) -> Vec<Violation> {
    let mut out = Vec::new();
    if header.num_layers == 0 || header.num_heads == 0 {
        out.push(Violation::global(
            Rule::HeaderShape,
            format!("need at least one layer and head, got L={} H={}", header.num_layers, header.num_heads),
        ));
    }
    if header.num_positions as usize != header.phases.len() {
        out.push(Violation::global(
            Rule::PositionCount,
            format!("num_positions {} but {} phase entries", header.num_positions, header.phases.len()),
        ));
    }
    if let Some(i) = header.phases.windows(2).position(|w| w[1] < w[0]) {
        let mut v = Violation::global(
            Rule::PhaseOrder,
            format!("{} follows {}", header.phases[i + 1], header.phases[i]),
        );
        v.position = Some(i as u32 + 1);
        out.push(v);
    }
    if !header.phases.contains(&Phase::Think) {
        out.push(Violation::global(Rule::EmptyThink, "think stage is empty"));
    }
    out
}
