//! Domain types and wire records shared by every engine variant.
//!
//! Every message type has a canonical JSON encoding with camelCase field
//! names and a stable field order, which is what ends up in trace files.

use std::fmt;
use std::str::FromStr;

use bytes::Bytes;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Position in a replicated log. Index 0 is the sentinel.
pub type LogIndex = u64;

/// Identifier of a replica, `0..n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessId(pub u32);

impl ProcessId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<usize> for ProcessId {
    fn from(i: usize) -> Self {
        ProcessId(i as u32)
    }
}

/// Raft term (logical epoch).
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Term(pub u64);

impl Term {
    pub const ZERO: Term = Term(0);

    pub fn next(self) -> Term {
        Term(self.0 + 1)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which replication protocol a cluster runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Leader-to-follower AppendEntries RPCs, leader majority commit.
    Baseline,
    /// AppendEntries disseminated by permutation gossip rounds.
    V1,
    /// V1 plus decentralized commit through bitmap voting.
    V2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::V1, Variant::V2];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
        }
    }

    pub fn uses_gossip(self) -> bool {
        !matches!(self, Variant::Baseline)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Error)]
#[error("unknown variant `{0}` (expected baseline, v1 or v2)")]
pub struct UnknownVariant(pub String);

impl FromStr for Variant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" | "raft" | "original" => Ok(Variant::Baseline),
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            _ => Err(UnknownVariant(s.to_string())),
        }
    }
}

/// Fixed-length bit vector. Encoded on the wire as a string of `0`/`1`,
/// bit 0 first.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Bitmap {
    words: Vec<u64>,
    len: usize,
}

impl Bitmap {
    pub fn zeros(len: usize) -> Bitmap {
        Bitmap {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Bitwise OR in place. Lengths must agree.
    pub fn or_assign(&mut self, other: &Bitmap) {
        assert_eq!(self.len, other.len, "bitmap length mismatch");
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= *b;
        }
    }

    pub fn from_bools(bits: &[bool]) -> Bitmap {
        let mut b = Bitmap::zeros(bits.len());
        for (i, _) in bits.iter().enumerate().filter(|(_, v)| **v) {
            b.set(i);
        }
        b
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }
}

impl fmt::Display for Bitmap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for Bitmap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bitmap({self})")
    }
}

#[derive(Debug, Error)]
#[error("invalid bitmap character {0:?}")]
pub struct BitmapParseError(char);

impl FromStr for Bitmap {
    type Err = BitmapParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(BitmapParseError(other)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Bitmap::from_bools(&bits))
    }
}

impl Serialize for Bitmap {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Bitmap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

mod hex_bytes {
    use bytes::Bytes;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &Bytes, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Bytes, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s)
            .map(Bytes::from)
            .map_err(serde::de::Error::custom)
    }
}

/// One client command together with the term in which the leader received it.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LogEntry {
    pub term: Term,
    #[serde(with = "hex_bytes")]
    pub command: Bytes,
}

impl LogEntry {
    pub fn new(term: Term, command: impl Into<Bytes>) -> LogEntry {
        LogEntry {
            term,
            command: command.into(),
        }
    }

    /// Stable 64-bit digest of the command bytes (FNV-1a).
    pub fn command_digest(&self) -> u64 {
        fnv1a(&self.command)
    }
}

pub(crate) const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_extend(FNV_OFFSET, bytes)
}

pub(crate) fn fnv1a_extend(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogError {
    #[error("entry term {entry} is below last term {last}")]
    NonMonotoneTerm { entry: Term, last: Term },
    #[error("cannot truncate the sentinel entry")]
    TruncateSentinel,
}

/// 1-indexed log of entries with a term-0 sentinel at index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplicatedLog {
    entries: Vec<LogEntry>,
}

impl Default for ReplicatedLog {
    fn default() -> Self {
        Self::new()
    }
}

impl ReplicatedLog {
    pub fn new() -> ReplicatedLog {
        ReplicatedLog {
            entries: vec![LogEntry::new(Term::ZERO, Bytes::new())],
        }
    }

    pub fn last_index(&self) -> LogIndex {
        (self.entries.len() - 1) as LogIndex
    }

    pub fn last_term(&self) -> Term {
        self.entries.last().map(|e| e.term).unwrap_or_default()
    }

    pub fn get(&self, index: LogIndex) -> Option<&LogEntry> {
        self.entries.get(index as usize)
    }

    pub fn term_at(&self, index: LogIndex) -> Option<Term> {
        self.get(index).map(|e| e.term)
    }

    /// True when the log holds an entry at `index` with `term`.
    pub fn matches(&self, index: LogIndex, term: Term) -> bool {
        self.term_at(index) == Some(term)
    }

    /// Entries `from..=last_index`, empty when `from` is past the end.
    pub fn entries_from(&self, from: LogIndex) -> &[LogEntry] {
        let from = (from.max(1) as usize).min(self.entries.len());
        &self.entries[from..]
    }

    /// Entries `1..=last_index`.
    pub fn entries(&self) -> &[LogEntry] {
        &self.entries[1..]
    }

    pub fn append(&mut self, entry: LogEntry) -> Result<LogIndex, LogError> {
        let last = self.last_term();
        if entry.term < last {
            return Err(LogError::NonMonotoneTerm {
                entry: entry.term,
                last,
            });
        }
        self.entries.push(entry);
        Ok(self.last_index())
    }

    /// Removes `from..=last_index`.
    pub fn truncate_from(&mut self, from: LogIndex) -> Result<(), LogError> {
        if from == 0 {
            return Err(LogError::TruncateSentinel);
        }
        self.entries.truncate(from as usize);
        Ok(())
    }

    /// Raft's up-to-date comparison: is `(term, index)` at least as recent
    /// as this log's last entry?
    pub fn is_behind_or_equal(&self, last_term: Term, last_index: LogIndex) -> bool {
        (last_term, last_index) >= (self.last_term(), self.last_index())
    }
}

/// V2 commit agreement fields as carried on the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitFields {
    pub bitmap: Bitmap,
    pub max_commit: LogIndex,
    pub next_commit: LogIndex,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AppendEntriesMsg {
    pub term: Term,
    pub leader_id: ProcessId,
    pub prev_log_index: LogIndex,
    pub prev_log_term: Term,
    pub entries: Vec<LogEntry>,
    pub leader_commit: LogIndex,
    pub is_gossip: bool,
    #[serde(rename = "roundLC")]
    pub round_lc: u64,
    pub bitmap: Option<Bitmap>,
    pub max_commit: Option<LogIndex>,
    pub next_commit: Option<LogIndex>,
}

impl AppendEntriesMsg {
    pub fn commit_fields(&self) -> Option<CommitFields> {
        match (&self.bitmap, self.max_commit, self.next_commit) {
            (Some(b), Some(mc), Some(nc)) => Some(CommitFields {
                bitmap: b.clone(),
                max_commit: mc,
                next_commit: nc,
            }),
            _ => None,
        }
    }

    pub fn set_commit_fields(&mut self, fields: Option<CommitFields>) {
        match fields {
            Some(f) => {
                self.bitmap = Some(f.bitmap);
                self.max_commit = Some(f.max_commit);
                self.next_commit = Some(f.next_commit);
            }
            None => {
                self.bitmap = None;
                self.max_commit = None;
                self.next_commit = None;
            }
        }
    }

    pub fn last_index(&self) -> LogIndex {
        self.prev_log_index + self.entries.len() as LogIndex
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AppendEntriesReply {
    pub term: Term,
    pub success: bool,
    pub replier_id: ProcessId,
    /// On success, the highest index the replier confirms matching the
    /// leader. On failure, the index the leader may safely retry after.
    pub match_hint: LogIndex,
    pub bitmap: Option<Bitmap>,
    pub max_commit: Option<LogIndex>,
    pub next_commit: Option<LogIndex>,
}

impl AppendEntriesReply {
    pub fn commit_fields(&self) -> Option<CommitFields> {
        match (&self.bitmap, self.max_commit, self.next_commit) {
            (Some(b), Some(mc), Some(nc)) => Some(CommitFields {
                bitmap: b.clone(),
                max_commit: mc,
                next_commit: nc,
            }),
            _ => None,
        }
    }

    pub fn set_commit_fields(&mut self, fields: Option<CommitFields>) {
        if let Some(f) = fields {
            self.bitmap = Some(f.bitmap);
            self.max_commit = Some(f.max_commit);
            self.next_commit = Some(f.next_commit);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RequestVoteMsg {
    pub term: Term,
    pub candidate_id: ProcessId,
    pub last_log_index: LogIndex,
    pub last_log_term: Term,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RequestVoteReply {
    pub term: Term,
    pub vote_granted: bool,
}

/// Every replica-to-replica message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Message {
    AppendEntries(AppendEntriesMsg),
    AppendEntriesReply(AppendEntriesReply),
    RequestVote(RequestVoteMsg),
    RequestVoteReply(RequestVoteReply),
}

#[derive(Debug, Error)]
#[error("malformed message encoding: {0}")]
pub struct DecodeError(#[from] serde_json::Error);

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::AppendEntries(_) => MessageKind::AppendEntries,
            Message::AppendEntriesReply(_) => MessageKind::AppendEntriesReply,
            Message::RequestVote(_) => MessageKind::RequestVote,
            Message::RequestVoteReply(_) => MessageKind::RequestVoteReply,
        }
    }

    pub fn term(&self) -> Term {
        match self {
            Message::AppendEntries(m) => m.term,
            Message::AppendEntriesReply(m) => m.term,
            Message::RequestVote(m) => m.term,
            Message::RequestVoteReply(m) => m.term,
        }
    }

    /// Number of log entries carried (message size proxy).
    pub fn entry_count(&self) -> usize {
        match self {
            Message::AppendEntries(m) => m.entries.len(),
            _ => 0,
        }
    }

    /// Canonical single-line encoding.
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("message encoding is infallible")
    }

    pub fn decode(s: &str) -> Result<Message, DecodeError> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    AppendEntries,
    AppendEntriesReply,
    RequestVote,
    RequestVoteReply,
    ClientRequest,
    ClientResponse,
}

impl MessageKind {
    pub const ALL: [MessageKind; 6] = [
        MessageKind::AppendEntries,
        MessageKind::AppendEntriesReply,
        MessageKind::RequestVote,
        MessageKind::RequestVoteReply,
        MessageKind::ClientRequest,
        MessageKind::ClientResponse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::AppendEntries => "append_entries",
            MessageKind::AppendEntriesReply => "append_entries_reply",
            MessageKind::RequestVote => "request_vote",
            MessageKind::RequestVoteReply => "request_vote_reply",
            MessageKind::ClientRequest => "client_request",
            MessageKind::ClientResponse => "client_response",
        }
    }

    pub fn slot(self) -> usize {
        self as usize
    }
}

/// Structural problems found by [`validate_append_entries`].
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Violation {
    #[error("unexpected V2 field `{0}` for variant {1}")]
    UnexpectedV2Field(&'static str, Variant),
    #[error("missing V2 field `{0}`")]
    MissingV2Field(&'static str),
    #[error("bitmap length {got} does not match cluster size {n}")]
    BitmapLength { got: usize, n: usize },
    #[error("leader id {0} outside cluster of {1}")]
    LeaderOutOfRange(ProcessId, usize),
    #[error("non-monotone terms at entry {0}")]
    NonMonotoneTerms(usize),
    #[error("entry term exceeds message term at entry {0}")]
    EntryTermAboveMessage(usize),
    #[error("prevLogTerm {prev_term} exceeds message term {term}")]
    PrevTermAboveMessage { prev_term: Term, term: Term },
    #[error("nextCommit {next_commit} must exceed maxCommit {max_commit}")]
    CommitOrder {
        max_commit: LogIndex,
        next_commit: LogIndex,
    },
}

/// Checks an AppendEntries record for structural consistency against the
/// cluster size and the running variant. Indices are unsigned, so a negative
/// `prevLogIndex` cannot be represented in the first place.
pub fn validate_append_entries(
    msg: &AppendEntriesMsg,
    n: usize,
    variant: Variant,
) -> Result<(), Violation> {
    if msg.leader_id.index() >= n {
        return Err(Violation::LeaderOutOfRange(msg.leader_id, n));
    }
    let fields: [(&'static str, bool); 3] = [
        ("bitmap", msg.bitmap.is_some()),
        ("maxCommit", msg.max_commit.is_some()),
        ("nextCommit", msg.next_commit.is_some()),
    ];
    if variant == Variant::V2 {
        if let Some((name, _)) = fields.iter().find(|(_, present)| !present) {
            return Err(Violation::MissingV2Field(name));
        }
    } else if let Some((name, _)) = fields.iter().find(|(_, present)| *present) {
        return Err(Violation::UnexpectedV2Field(name, variant));
    }
    if let Some(b) = &msg.bitmap {
        if b.len() != n {
            return Err(Violation::BitmapLength { got: b.len(), n });
        }
    }
    if let (Some(mc), Some(nc)) = (msg.max_commit, msg.next_commit) {
        if nc <= mc {
            return Err(Violation::CommitOrder {
                max_commit: mc,
                next_commit: nc,
            });
        }
    }
    if msg.prev_log_term > msg.term {
        return Err(Violation::PrevTermAboveMessage {
            prev_term: msg.prev_log_term,
            term: msg.term,
        });
    }
    let mut last = msg.prev_log_term;
    for (i, e) in msg.entries.iter().enumerate() {
        if e.term < last {
            return Err(Violation::NonMonotoneTerms(i));
        }
        if e.term > msg.term {
            return Err(Violation::EntryTermAboveMessage(i));
        }
        last = e.term;
    }
    Ok(())
}
