//! Binary and text encodings of [`AttentionTrace`].
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "CKVT" | schema u32 | L u32 | H u32 | N u32 | runs u32 | (phase u8, len u32)*
//!        | records u64 | (layer u32, head u32, t u32, len u32, f32 * len)*
//! ```
//!
//! The text form starts with `#CKVT,<schema>,<L>,<H>,<N>,<runs>` where runs are
//! written like `P16/T400/A40`, followed by one `layer,head,t,s0,s1,...` line
//! per record.

use std::io::{self, BufRead, BufReader, Read, Write};

use super::{
    validate_trace, AttentionTrace, LastGood, Phase, StepRecord, TraceError, TraceHeader,
    SCHEMA_VERSION,
};

const MAGIC: &[u8; 4] = b"CKVT";
const TEXT_MAGIC: &str = "#CKVT";

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> TraceError {
    let context = context.into();
    move |source| TraceError::Io { context, source }
}

struct CountingWriter<W> {
    inner: W,
    count: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.count += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Validates `trace` and writes its binary encoding. Returns the byte count.
pub fn write_trace<W: Write>(trace: &AttentionTrace, sink: W) -> Result<u64, TraceError> {
    let violations = validate_trace(trace);
    if !violations.is_empty() {
        return Err(TraceError::Invalid(violations));
    }
    let mut w = CountingWriter { inner: sink, count: 0 };
    encode_unchecked(trace, &mut w)?;
    w.flush().map_err(io_err("flushing trace"))?;
    Ok(w.count)
}

pub(crate) fn encode_unchecked<W: Write>(trace: &AttentionTrace, w: &mut W) -> Result<(), TraceError> {
    let h = &trace.header;
    let mut head = Vec::with_capacity(32);
    head.extend_from_slice(MAGIC);
    for v in [h.schema_version, h.num_layers, h.num_heads, h.num_positions] {
        head.extend_from_slice(&v.to_le_bytes());
    }
    let runs = h.phase_runs();
    head.extend_from_slice(&(runs.len() as u32).to_le_bytes());
    for (phase, len) in runs {
        head.push(phase.code());
        head.extend_from_slice(&len.to_le_bytes());
    }
    head.extend_from_slice(&(trace.steps.len() as u64).to_le_bytes());
    w.write_all(&head).map_err(io_err("writing header"))?;

    let mut buf = Vec::new();
    for rec in &trace.steps {
        buf.clear();
        for v in [rec.layer, rec.head, rec.query_position, rec.scores.len() as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for s in &rec.scores {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        w.write_all(&buf).map_err(|source| TraceError::Io {
            context: format!(
                "writing record (layer {}, head {}, position {})",
                rec.layer, rec.head, rec.query_position
            ),
            source,
        })?;
    }
    Ok(())
}

fn fmt_score(s: f32) -> String {
    if s != 0.0 && s.abs() < 1e-4 {
        format!("{s:e}")
    } else {
        format!("{s}")
    }
}

/// Writes the line-oriented text form. Intended for small fixtures.
pub fn write_trace_text<W: Write>(trace: &AttentionTrace, sink: W) -> Result<(), TraceError> {
    let violations = validate_trace(trace);
    if !violations.is_empty() {
        return Err(TraceError::Invalid(violations));
    }
    let h = &trace.header;
    let mut w = io::BufWriter::new(sink);
    let runs: Vec<String> = h
        .phase_runs()
        .iter()
        .map(|(p, n)| format!("{}{}", p.letter(), n))
        .collect();
    writeln!(
        w,
        "{TEXT_MAGIC},{},{},{},{},{}",
        h.schema_version,
        h.num_layers,
        h.num_heads,
        h.num_positions,
        runs.join("/")
    )
    .map_err(io_err("writing text header"))?;
    for rec in &trace.steps {
        let mut line = format!("{},{},{}", rec.layer, rec.head, rec.query_position);
        for &s in &rec.scores {
            line.push(',');
            line.push_str(&fmt_score(s));
        }
        writeln!(w, "{line}").map_err(io_err("writing text record"))?;
    }
    w.flush().map_err(io_err("flushing text trace"))
}

/// Reads and validates a trace in either encoding.
pub fn read_trace<R: Read>(source: R) -> Result<AttentionTrace, TraceError> {
    let mut reader = TraceReader::new(BufReader::new(source))?;
    let mut steps = Vec::new();
    while let Some(rec) = reader.next_record()? {
        steps.push(rec);
    }
    let trace = AttentionTrace::new(reader.header, steps);
    let violations = validate_trace(&trace);
    if violations.is_empty() {
        Ok(trace)
    } else {
        Err(TraceError::Invalid(violations))
    }
}

enum Encoding {
    Binary { expected: u64 },
    Text { line_no: u64 },
}

/// Streaming record reader. Records come back in file order without the whole
/// trace being materialized; callers wanting validation should use
/// [`read_trace`] or [`validate_trace`].
pub struct TraceReader<R> {
    source: R,
    header: TraceHeader,
    encoding: Encoding,
    read: u64,
    last_good: Option<(u32, u32, u32)>,
    line: String,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(mut source: R) -> Result<Self, TraceError> {
        let peek = source.fill_buf().map_err(io_err("reading header"))?;
        if peek.is_empty() {
            return Err(TraceError::Format("empty stream".into()));
        }
        if peek.first() == Some(&b'#') {
            let mut line = String::new();
            source.read_line(&mut line).map_err(io_err("reading text header"))?;
            let header = parse_text_header(line.trim_end())?;
            Ok(TraceReader {
                source,
                header,
                encoding: Encoding::Text { line_no: 1 },
                read: 0,
                last_good: None,
                line: String::new(),
            })
        } else {
            let (header, expected) = read_binary_header(&mut source)?;
            Ok(TraceReader {
                source,
                header,
                encoding: Encoding::Binary { expected },
                read: 0,
                last_good: None,
                line: String::new(),
            })
        }
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn into_header(self) -> TraceHeader {
        self.header
    }

    pub fn next_record(&mut self) -> Result<Option<StepRecord>, TraceError> {
        let rec = match self.encoding {
            Encoding::Binary { expected } => {
                if self.read == expected {
                    return Ok(None);
                }
                self.read_binary_record(expected)?
            }
            Encoding::Text { .. } => match self.read_text_record()? {
                Some(r) => r,
                None => return Ok(None),
            },
        };
        self.read += 1;
        self.last_good = Some((rec.layer, rec.head, rec.query_position));
        Ok(Some(rec))
    }

    fn truncated(&self, expected: u64) -> TraceError {
        TraceError::Truncated {
            records_read: self.read,
            records_expected: expected,
            last_good: LastGood(self.last_good),
        }
    }

    fn read_binary_record(&mut self, expected: u64) -> Result<StepRecord, TraceError> {
        let mut pre = [0u8; 16];
        self.source.read_exact(&mut pre).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => self.truncated(expected),
            _ => TraceError::Io { context: "reading record".into(), source: e },
        })?;
        let word = |i: usize| u32::from_le_bytes(pre[4 * i..4 * i + 4].try_into().unwrap());
        let (layer, head, t, len) = (word(0), word(1), word(2), word(3));
        if len > self.header.num_positions {
            return Err(TraceError::Format(format!(
                "record {} claims {len} scores but the trace has {} positions",
                self.read, self.header.num_positions
            )));
        }
        let mut bytes = vec![0u8; len as usize * 4];
        self.source.read_exact(&mut bytes).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => self.truncated(expected),
            _ => TraceError::Io { context: "reading record scores".into(), source: e },
        })?;
        let scores = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(StepRecord { layer, head, query_position: t, scores })
    }

    fn read_text_record(&mut self) -> Result<Option<StepRecord>, TraceError> {
        loop {
            self.line.clear();
            let n = self
                .source
                .read_line(&mut self.line)
                .map_err(io_err("reading text record"))?;
            if n == 0 {
                return Ok(None);
            }
            let line_no = match &mut self.encoding {
                Encoding::Text { line_no } => {
                    *line_no += 1;
                    *line_no
                }
                Encoding::Binary { .. } => unreachable!(),
            };
            let line = self.line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| TraceError::Format(format!("line {line_no}: {what}"));
            let mut fields = line.split(',').map(str::trim);
            let mut int = |name: &str| -> Result<u32, TraceError> {
                fields
                    .next()
                    .ok_or_else(|| bad(&format!("missing {name}")))?
                    .parse()
                    .map_err(|_| bad(&format!("bad {name}")))
            };
            let layer = int("layer")?;
            let head = int("head")?;
            let t = int("position")?;
            let scores = fields
                .map(|f| f.parse::<f32>().map_err(|_| bad(&format!("bad score {f:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            return Ok(Some(StepRecord { layer, head, query_position: t, scores }));
        }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<StepRecord, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

fn header_from_runs(
    schema_version: u32,
    num_layers: u32,
    num_heads: u32,
    num_positions: u32,
    runs: &[(Phase, u32)],
) -> Result<TraceHeader, TraceError> {
    if schema_version != SCHEMA_VERSION {
        return Err(TraceError::Format(format!(
            "unsupported schema version {schema_version} (expected {SCHEMA_VERSION})"
        )));
    }
    let total: u64 = runs.iter().map(|&(_, n)| n as u64).sum();
    if total != num_positions as u64 {
        return Err(TraceError::Format(format!(
            "phase runs cover {total} positions but header declares {num_positions}"
        )));
    }
    let mut phases = Vec::with_capacity(num_positions as usize);
    for &(p, n) in runs {
        phases.extend(std::iter::repeat_n(p, n as usize));
    }
    Ok(TraceHeader { schema_version, num_layers, num_heads, num_positions, phases })
}

fn read_binary_header<R: Read>(r: &mut R) -> Result<(TraceHeader, u64), TraceError> {
    let short = |e: io::Error| match e.kind() {
        io::ErrorKind::UnexpectedEof => TraceError::Format("header is truncated".into()),
        _ => TraceError::Io { context: "reading header".into(), source: e },
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != MAGIC {
        return Err(TraceError::Format(format!("bad magic {magic:?}")));
    }
    let mut u32s = [0u8; 20];
    r.read_exact(&mut u32s).map_err(short)?;
    let word = |i: usize| u32::from_le_bytes(u32s[4 * i..4 * i + 4].try_into().unwrap());
    let (schema, l, h, n, nruns) = (word(0), word(1), word(2), word(3), word(4));
    if nruns > 3 {
        return Err(TraceError::Format(format!("{nruns} phase runs (at most 3 allowed)")));
    }
    let mut runs = Vec::with_capacity(nruns as usize);
    for _ in 0..nruns {
        let mut b = [0u8; 5];
        r.read_exact(&mut b).map_err(short)?;
        let phase = Phase::from_code(b[0])
            .ok_or_else(|| TraceError::Format(format!("unknown phase code {}", b[0])))?;
        runs.push((phase, u32::from_le_bytes(b[1..5].try_into().unwrap())));
    }
    let mut count = [0u8; 8];
    r.read_exact(&mut count).map_err(short)?;
    let header = header_from_runs(schema, l, h, n, &runs)?;
    Ok((header, u64::from_le_bytes(count)))
}

fn parse_text_header(line: &str) -> Result<TraceHeader, TraceError> {
    let bad = |what: &str| TraceError::Format(format!("text header: {what}"));
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 6 || fields[0] != TEXT_MAGIC {
        return Err(bad("expected #CKVT,<schema>,<L>,<H>,<N>,<runs>"));
    }
    let num = |i: usize, name: &str| fields[i].parse::<u32>().map_err(|_| bad(&format!("bad {name}")));
    let schema = num(1, "schema version")?;
    let l = num(2, "layer count")?;
    let h = num(3, "head count")?;
    let n = num(4, "position count")?;
    let mut runs = Vec::new();
    for run in fields[5].split('/').filter(|s| !s.is_empty()) {
        let mut chars = run.chars();
        let phase = chars
            .next()
            .and_then(Phase::from_letter)
            .ok_or_else(|| bad(&format!("bad phase run {run:?}")))?;
        let len = chars.as_str().parse::<u32>().map_err(|_| bad(&format!("bad phase run {run:?}")))?;
        runs.push((phase, len));
    }
    header_from_runs(schema, l, h, n, &runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Rule;

    fn tiny() -> AttentionTrace {
        let header = TraceHeader::from_lengths(1, 1, 1, 2, 1);
        let steps = vec![
            StepRecord { layer: 0, head: 0, query_position: 1, scores: vec![1.0] },
            StepRecord { layer: 0, head: 0, query_position: 2, scores: vec![0.25, 0.75] },
            StepRecord { layer: 0, head: 0, query_position: 3, scores: vec![0.5, 0.25, 0.25] },
        ];
        AttentionTrace::new(header, steps)
    }

    #[test]
    fn binary_round_trip() {
        let trace = tiny();
        let mut buf = Vec::new();
        let n = write_trace(&trace, &mut buf).unwrap();
        assert_eq!(n as usize, buf.len());
        assert_eq!(read_trace(&buf[..]).unwrap(), trace);
    }

    #[test]
    fn text_round_trip() {
        let trace = tiny();
        let mut buf = Vec::new();
        write_trace_text(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("#CKVT,1,1,1,4,P1/T2/A1\n"));
        assert_eq!(read_trace(&buf[..]).unwrap(), trace);
    }

    #[test]
    fn hand_written_text_fixture() {
        let src = "#CKVT,1,1,1,3,T2/A1\n0,0,0\n\n0,0,1,1.0\n0,0,2, 0.5, 0.5\n";
        let trace = read_trace(src.as_bytes()).unwrap();
        assert_eq!(trace.header.think_len(), 2);
        assert_eq!(trace.steps.len(), 3);
        assert!(trace.steps[0].scores.is_empty());
    }

    #[test]
    fn empty_stream_is_format_error() {
        assert!(matches!(read_trace(&b""[..]), Err(TraceError::Format(_))));
    }

    #[test]
    fn bad_magic_is_format_error() {
        assert!(matches!(read_trace(&b"XXXXabcdefgh"[..]), Err(TraceError::Format(_))));
    }

    #[test]
    fn truncation_names_last_good_record() {
        let mut buf = Vec::new();
        write_trace(&tiny(), &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        match read_trace(&buf[..]) {
            Err(TraceError::Truncated { records_read, records_expected, last_good }) => {
                assert_eq!((records_read, records_expected), (2, 3));
                assert_eq!(last_good.0, Some((0, 0, 2)));
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_layer_is_validation_error() {
        let src = "#CKVT,1,1,1,2,P1/T1\n1,0,1,1.0\n";
        match read_trace(src.as_bytes()) {
            Err(TraceError::Invalid(v)) => assert!(v.iter().any(|v| v.rule == Rule::LayerRange)),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_trace_is_not_written() {
        let mut trace = tiny();
        trace.steps[1].scores = vec![0.2, 0.7];
        let mut buf = Vec::new();
        assert!(matches!(write_trace(&trace, &mut buf), Err(TraceError::Invalid(_))));
        assert!(buf.is_empty());
    }

    #[test]
    fn streaming_reader_yields_records_in_order() {
        let mut buf = Vec::new();
        write_trace(&tiny(), &mut buf).unwrap();
        let reader = TraceReader::new(&buf[..]).unwrap();
        assert_eq!(reader.header().num_positions, 4);
        let ts: Vec<u32> = reader.map(|r| r.unwrap().query_position).collect();
        assert_eq!(ts, vec![1, 2, 3]);
    }
}
