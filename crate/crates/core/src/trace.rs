//! Line-delimited trace records.
//!
//! A trace file starts with one [`TraceHeader`] line followed by one JSON
//! object per [`TraceRecord`], in the order the simulator processed them.
//! Field order is fixed by the type definitions so equal runs produce equal
//! bytes.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::commit::CommitState;
use crate::raft::Role;
use crate::types::{Bitmap, LogEntry, LogIndex, Message, MessageKind, ProcessId, Term, Variant};

pub const TRACE_SCHEMA: &str = "epiraft-trace";
pub const TRACE_VERSION: u32 = 1;

/// Simulated time in microseconds.
pub type Micros = u64;

/// 64-bit command digest, written as 16 hex digits.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub u64);

impl Digest {
    pub fn of(entry: &LogEntry) -> Digest {
        Digest(entry.command_digest())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:016x}", self.0))
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16)
            .map(Digest)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SendOutcome {
    Scheduled,
    Unreachable,
    Lost,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Destination was down when the message arrived or was still queued.
    Crashed,
    /// Failed structural validation.
    Invalid,
}

/// Compact description of a message for trace lines.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MsgSummary {
    #[serde(rename = "type")]
    pub kind: MessageKind,
    pub term: Term,
    pub entries: usize,
    pub is_gossip: Option<bool>,
    #[serde(rename = "roundLC")]
    pub round_lc: Option<u64>,
    pub success: Option<bool>,
    pub granted: Option<bool>,
}

impl MsgSummary {
    pub fn of(msg: &Message) -> MsgSummary {
        let mut s = MsgSummary {
            kind: msg.kind(),
            term: msg.term(),
            entries: msg.entry_count(),
            is_gossip: None,
            round_lc: None,
            success: None,
            granted: None,
        };
        match msg {
            Message::AppendEntries(m) => {
                s.is_gossip = Some(m.is_gossip);
                s.round_lc = Some(m.round_lc);
            }
            Message::AppendEntriesReply(r) => s.success = Some(r.success),
            Message::RequestVoteReply(r) => s.granted = Some(r.vote_granted),
            Message::RequestVote(_) => {}
        }
        s
    }
}

/// Fault actions as they appear in the trace and in fault schedules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultAction {
    Crash { node: ProcessId },
    Recover { node: ProcessId },
    /// Crash whichever live replica currently believes it is leader.
    CrashLeader,
    RecoverAll,
    Partition { groups: Vec<Vec<ProcessId>> },
    Heal,
    SetLoss { from: ProcessId, to: ProcessId, p: f64 },
    SetLossAll { p: f64 },
    /// Replaces the reachability matrix from this point on.
    SetTopology { topology: crate::sim::network::TopologySpec },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", rename_all_fields = "camelCase")]
pub enum TraceEvent {
    Role {
        role: Role,
        term: Term,
    },
    Vote {
        term: Term,
        candidate: ProcessId,
    },
    Append {
        index: LogIndex,
        term: Term,
        cmd: Digest,
    },
    Truncate {
        from: LogIndex,
    },
    Commit {
        commit_index: LogIndex,
    },
    Apply {
        index: LogIndex,
        term: Term,
        cmd: Digest,
    },
    CommitState {
        bitmap: Bitmap,
        max_commit: LogIndex,
        next_commit: LogIndex,
    },
    Send {
        to: ProcessId,
        outcome: SendOutcome,
        msg: MsgSummary,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        full: Option<Message>,
    },
    Deliver {
        from: ProcessId,
        msg: MsgSummary,
    },
    Drop {
        from: ProcessId,
        reason: DropReason,
    },
    Crash,
    Recover,
    ClientRequest {
        client: u32,
        seq: u64,
        accepted: Option<LogIndex>,
    },
    ClientResponse {
        client: u32,
        seq: u64,
        index: LogIndex,
    },
    Fault {
        #[serde(flatten)]
        action: FaultAction,
    },
}

impl TraceEvent {
    pub fn commit_state(cs: &CommitState) -> TraceEvent {
        TraceEvent::CommitState {
            bitmap: cs.bitmap().clone(),
            max_commit: cs.max_commit(),
            next_commit: cs.next_commit(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: Micros,
    pub node: Option<ProcessId>,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub schema: String,
    pub version: u32,
    pub n: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl TraceHeader {
    pub fn new(n: usize, variant: Variant, seed: u64) -> TraceHeader {
        TraceHeader {
            schema: TRACE_SCHEMA.to_string(),
            version: TRACE_VERSION,
            n,
            variant,
            seed,
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace is empty (missing header)")]
    MissingHeader,
    #[error("unsupported trace schema {schema} v{version}")]
    Schema { schema: String, version: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(header: TraceHeader) -> Trace {
        Trace {
            header,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, time: Micros, node: Option<ProcessId>, event: TraceEvent) {
        self.records.push(TraceRecord { time, node, event });
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Trace, TraceError> {
        let mut trace = Trace::new(TraceHeader::new(0, Variant::Baseline, 0));
        replay(r, &mut trace)?;
        Ok(trace)
    }

    pub fn read_str(s: &str) -> Result<Trace, TraceError> {
        Trace::read_jsonl(s.as_bytes())
    }

    /// FNV-1a digest of the serialized trace.
    pub fn checksum(&self) -> u64 {
        crate::types::fnv1a(self.to_jsonl().as_bytes())
    }
}

/// Parses a JSONL trace line by line into `sink`; returns the header.
pub fn replay<R: BufRead, S: TraceSink + ?Sized>(r: R, sink: &mut S) -> Result<TraceHeader, TraceError> {
    let mut lines = r.lines().enumerate();
    let header: TraceHeader = loop {
        match lines.next() {
            None => return Err(TraceError::MissingHeader),
            Some((_, line)) if line.as_ref().is_ok_and(|l| l.trim().is_empty()) => continue,
            Some((i, line)) => {
                let line = line?;
                break serde_json::from_str(&line).map_err(|e| TraceError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            }
        }
    };
    if header.schema != TRACE_SCHEMA || header.version != TRACE_VERSION {
        return Err(TraceError::Schema {
            schema: header.schema,
            version: header.version,
        });
    }
    sink.begin(&header);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        sink.record(&rec);
    }
    Ok(header)
}

/// Receives trace records as the simulator produces them.
pub trait TraceSink: std::any::Any {
    fn begin(&mut self, _header: &TraceHeader) {}
    fn record(&mut self, rec: &TraceRecord);
}

impl TraceSink for Trace {
    fn begin(&mut self, header: &TraceHeader) {
        self.header = header.clone();
        self.records.clear();
    }

    fn record(&mut self, rec: &TraceRecord) {
        self.records.push(rec.clone());
    }
}

impl<A: TraceSink, B: TraceSink> TraceSink for (A, B) {
    fn begin(&mut self, header: &TraceHeader) {
        self.0.begin(header);
        self.1.begin(header);
    }

    fn record(&mut self, rec: &TraceRecord) {
        self.0.record(rec);
        self.1.record(rec);
    }
}

impl<A: TraceSink> TraceSink for Option<A> {
    fn begin(&mut self, header: &TraceHeader) {
        if let Some(a) = self {
            a.begin(header);
        }
    }

    fn record(&mut self, rec: &TraceRecord) {
        if let Some(a) = self {
            a.record(rec);
        }
    }
}

/// Writes the same bytes as [`Trace::write_jsonl`], one line at a time.
/// The first I/O error stops writing and is kept for [`JsonlSink::finish`].
pub struct JsonlSink<W: Write> {
    out: W,
    error: Option<std::io::Error>,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> JsonlSink<W> {
        JsonlSink { out, error: None }
    }

    fn line<T: Serialize>(&mut self, value: &T) {
        if self.error.is_some() {
            return;
        }
        let res = serde_json::to_writer(&mut self.out, value)
            .map_err(std::io::Error::from)
            .and_then(|_| self.out.write_all(b"\n"));
        if let Err(e) = res {
            self.error = Some(e);
        }
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        if let Some(e) = self.error {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write + 'static> TraceSink for JsonlSink<W> {
    fn begin(&mut self, header: &TraceHeader) {
        self.line(header);
    }

    fn record(&mut self, rec: &TraceRecord) {
        self.line(rec);
    }
}

/// FNV-1a over written bytes; equal to [`Trace::checksum`] when fed the
/// same JSONL stream.
#[derive(Clone, Copy, Debug)]
pub struct Fnv(pub u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(crate::types::FNV_OFFSET)
    }
}

impl Write for Fnv {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0 = crate::types::fnv1a_extend(self.0, buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Checksums a trace without keeping it.
pub type DigestSink = JsonlSink<Fnv>;

impl DigestSink {
    pub fn digest() -> DigestSink {
        JsonlSink::new(Fnv::default())
    }

    pub fn value(&self) -> u64 {
        self.out.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_layout_is_flat() {
        let r = TraceRecord {
            time: 5,
            node: Some(ProcessId(1)),
            event: TraceEvent::Commit { commit_index: 4 },
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"time":5,"node":1,"kind":"commit","commitIndex":4}"#);
        let back: TraceRecord = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn fault_records_round_trip() {
        let r = TraceRecord {
            time: 9,
            node: None,
            event: TraceEvent::Fault {
                action: FaultAction::Partition {
                    groups: vec![vec![ProcessId(0)], vec![ProcessId(1), ProcessId(2)]],
                },
            },
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains(r#""kind":"fault","action":"partition""#), "{s}");
        assert_eq!(serde_json::from_str::<TraceRecord>(&s).unwrap(), r);
    }

    #[test]
    fn streamed_bytes_match_in_memory_trace() {
        let mut t = Trace::new(TraceHeader::new(3, Variant::V2, 4));
        t.push(1, Some(ProcessId(0)), TraceEvent::Crash);
        t.push(2, None, TraceEvent::Fault { action: FaultAction::Heal });
        let mut sink = (JsonlSink::new(Vec::new()), DigestSink::digest());
        sink.begin(&t.header);
        for r in &t.records {
            sink.record(r);
        }
        assert_eq!(sink.1.value(), t.checksum());
        assert_eq!(sink.0.finish().unwrap(), t.to_jsonl().into_bytes());
    }

    #[test]
    fn parse_error_names_line() {
        let mut t = Trace::new(TraceHeader::new(3, Variant::V1, 1));
        t.push(1, Some(ProcessId(0)), TraceEvent::Crash);
        let mut text = t.to_jsonl();
        text.push_str("{\"time\":2,\"kind\":\"bogus\"}\n");
        match Trace::read_str(&text) {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(Trace::read_str(""), Err(TraceError::MissingHeader)));
    }
}
