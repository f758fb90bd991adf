//! Offline safety verification of simulator traces.
//!
//! [`Checker`] consumes trace records in order (from a file, an in-memory
//! [`Trace`] or directly from a running simulation) and rebuilds every
//! replica's log, term and commit progress from the state-level events.
//! Entries are identified by `(index, term)` plus a hash of the whole log
//! prefix, which makes log matching a per-entry lookup.

pub mod oracle;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::BufRead;

use serde::Serialize;

use crate::raft::{HistoryApplier, NodeState, Role};
use crate::trace::{Digest, Micros, Trace, TraceError, TraceEvent, TraceHeader, TraceRecord, TraceSink};
use crate::types::{Bitmap, LogIndex, ProcessId, Term};

/// The checked properties, with stable machine-readable codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Property {
    ElectionSafety,
    LogMatching,
    StateMachineSafety,
    CommitSafety,
    Monotonicity,
    CommitOrder,
    LeaderCompleteness,
}

impl Property {
    pub const ALL: [Property; 7] = [
        Property::ElectionSafety,
        Property::LogMatching,
        Property::StateMachineSafety,
        Property::CommitSafety,
        Property::Monotonicity,
        Property::CommitOrder,
        Property::LeaderCompleteness,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Property::ElectionSafety => "a-election-safety",
            Property::LogMatching => "b-log-matching",
            Property::StateMachineSafety => "c-state-machine-safety",
            Property::CommitSafety => "d-commit-safety",
            Property::Monotonicity => "e-monotonicity",
            Property::CommitOrder => "f-commit-order",
            Property::LeaderCompleteness => "g-leader-completeness",
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub property: Property,
    pub time: Micros,
    pub node: Option<ProcessId>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "violation {} t={}us", self.property, self.time)?;
        if let Some(n) = self.node {
            write!(f, " node={n}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

/// Outcome of a check. Only the first [`Verdict::KEEP`] violations are
/// kept; `total` counts all of them.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub records: u64,
    pub total: u64,
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub const KEEP: usize = 100;

    pub fn passed(&self) -> bool {
        self.total == 0
    }

    pub fn count(&self, p: Property) -> usize {
        self.violations.iter().filter(|v| v.property == p).count()
    }

    pub fn first(&self, p: Property) -> Option<&Violation> {
        self.violations.iter().find(|v| v.property == p)
    }

    /// Folds another run's verdict into this one.
    pub fn absorb(&mut self, other: Verdict) {
        self.records += other.records;
        self.total += other.total;
        let room = Self::KEEP.saturating_sub(self.violations.len());
        self.violations.extend(other.violations.into_iter().take(room));
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return write!(f, "pass ({} records)", self.records);
        }
        writeln!(f, "fail: {} violations in {} records", self.total, self.records)?;
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
struct Replica {
    /// `(term, prefix hash)` per index; slot 0 is the sentinel.
    log: Vec<(Term, u64)>,
    term: Term,
    commit: LogIndex,
    max_commit: LogIndex,
    next_apply: LogIndex,
}

impl Replica {
    fn new() -> Replica {
        Replica {
            log: vec![(Term::ZERO, 0)],
            next_apply: 1,
            ..Replica::default()
        }
    }

    fn term_at(&self, index: LogIndex) -> Option<Term> {
        self.log.get(index as usize).map(|e| e.0)
    }
}

fn chain(prev: u64, term: Term, cmd: Digest) -> u64 {
    let mut buf = [0u8; 24];
    buf[..8].copy_from_slice(&prev.to_le_bytes());
    buf[8..16].copy_from_slice(&term.0.to_le_bytes());
    buf[16..].copy_from_slice(&cmd.0.to_le_bytes());
    crate::types::fnv1a(&buf)
}

/// Streaming safety checker; see the module docs.
#[derive(Clone, Debug, Default)]
pub struct Checker {
    n: usize,
    majority: usize,
    replicas: Vec<Replica>,
    leaders: HashMap<Term, ProcessId>,
    /// Prefix hash first seen for each `(index, term)`.
    prefixes: HashMap<(LogIndex, Term), u64>,
    /// Replicas whose log has ever held `(index, term)`.
    holders: BTreeMap<(LogIndex, Term), Bitmap>,
    applied: Vec<Option<(Term, Digest)>>,
    /// Highest index known committed, with the term of its entry.
    committed: Option<(LogIndex, Term)>,
    verdict: Verdict,
}

impl Checker {
    pub fn new(n: usize) -> Checker {
        let mut c = Checker::default();
        c.reset(n);
        c
    }

    fn reset(&mut self, n: usize) {
        *self = Checker {
            n,
            majority: n / 2 + 1,
            replicas: vec![Replica::new(); n],
            ..Checker::default()
        };
    }

    fn flag(&mut self, property: Property, time: Micros, node: Option<ProcessId>, detail: String) {
        self.verdict.total += 1;
        if self.verdict.violations.len() < Verdict::KEEP {
            self.verdict.violations.push(Violation {
                property,
                time,
                node,
                detail,
            });
        }
    }

    pub fn feed(&mut self, rec: &TraceRecord) {
        self.verdict.records += 1;
        let Some(node) = rec.node else {
            return;
        };
        let i = node.index();
        if i >= self.n {
            self.flag(Property::LogMatching, rec.time, Some(node), format!("replica {node} outside cluster"));
            return;
        }
        let t = rec.time;
        match &rec.event {
            TraceEvent::Role { role, term } => {
                self.observe_term(t, node, *term);
                if *role == Role::Leader {
                    self.on_elected(t, node, *term);
                }
            }
            TraceEvent::Vote { term, .. } => self.observe_term(t, node, *term),
            TraceEvent::Append { index, term, cmd } => self.on_append(t, node, *index, *term, *cmd),
            TraceEvent::Truncate { from } => {
                let r = &mut self.replicas[i];
                if *from == 0 || *from as usize > r.log.len() {
                    let len = r.log.len();
                    self.flag(Property::LogMatching, t, Some(node), format!("truncate from {from} on log of length {}", len - 1));
                } else {
                    r.log.truncate(*from as usize);
                }
            }
            TraceEvent::Commit { commit_index } => self.on_commit(t, node, *commit_index),
            TraceEvent::CommitState {
                max_commit,
                next_commit,
                ..
            } => self.on_commit_state(t, node, *max_commit, *next_commit),
            TraceEvent::Apply { index, term, cmd } => self.on_apply(t, node, *index, *term, *cmd),
            TraceEvent::Crash => {
                let r = &mut self.replicas[i];
                r.commit = 0;
                r.max_commit = 0;
                r.next_apply = 1;
            }
            _ => {}
        }
    }

    fn observe_term(&mut self, t: Micros, node: ProcessId, term: Term) {
        let r = &mut self.replicas[node.index()];
        if term < r.term {
            let prev = r.term;
            self.flag(Property::Monotonicity, t, Some(node), format!("term went from {prev} to {term}"));
        } else {
            r.term = term;
        }
    }

    fn on_elected(&mut self, t: Micros, node: ProcessId, term: Term) {
        match self.leaders.get(&term) {
            Some(other) if *other != node => {
                let other = *other;
                self.flag(Property::ElectionSafety, t, Some(node), format!("second leader in term {term}; {other} was elected first"));
            }
            Some(_) => {}
            None => {
                self.leaders.insert(term, node);
            }
        }
        if let Some((k, kt)) = self.committed {
            let have = self.replicas[node.index()].term_at(k);
            if have != Some(kt) {
                let have = have.map_or("nothing".to_string(), |h| format!("term {h}"));
                self.flag(Property::LeaderCompleteness, t, Some(node), format!("leader of term {term} holds {have} at committed index {k} (term {kt})"));
            }
        }
    }

    fn on_append(&mut self, t: Micros, node: ProcessId, index: LogIndex, term: Term, cmd: Digest) {
        let n = self.n;
        let r = &mut self.replicas[node.index()];
        if index as usize != r.log.len() {
            let len = r.log.len();
            self.flag(Property::LogMatching, t, Some(node), format!("append at {index} on log of length {}", len - 1));
            return;
        }
        let prev = r.log.last().expect("sentinel").1;
        let hash = chain(prev, term, cmd);
        r.log.push((term, hash));
        match self.prefixes.get(&(index, term)) {
            Some(h) if *h != hash => self.flag(
                Property::LogMatching,
                t,
                Some(node),
                format!("entry ({index}, term {term}) differs from another log's entry with the same index and term"),
            ),
            Some(_) => {}
            None => {
                self.prefixes.insert((index, term), hash);
            }
        }
        self.holders
            .entry((index, term))
            .or_insert_with(|| Bitmap::zeros(n))
            .set(node.index());
    }

    fn held_by_majority(&self, index: LogIndex, term: Term) -> bool {
        self.holders
            .get(&(index, term))
            .is_some_and(|b| b.count_ones() >= self.majority)
    }

    fn note_committed(&mut self, index: LogIndex, term: Term) {
        if self.committed.is_none_or(|(k, _)| index > k) {
            self.committed = Some((index, term));
        }
    }

    fn on_commit(&mut self, t: Micros, node: ProcessId, ci: LogIndex) {
        let r = &mut self.replicas[node.index()];
        if ci < r.commit {
            let prev = r.commit;
            self.flag(Property::Monotonicity, t, Some(node), format!("commitIndex went from {prev} to {ci}"));
            return;
        }
        r.commit = ci;
        if ci == 0 {
            return;
        }
        let Some(term) = r.term_at(ci) else {
            let last = r.log.len() - 1;
            self.flag(Property::CommitSafety, t, Some(node), format!("commitIndex {ci} beyond last log index {last}"));
            return;
        };
        if !self.held_by_majority(ci, term) {
            self.flag(Property::CommitSafety, t, Some(node), format!("commitIndex {ci} (term {term}) held by no majority"));
            return;
        }
        self.note_committed(ci, term);
    }

    fn on_commit_state(&mut self, t: Micros, node: ProcessId, mc: LogIndex, nc: LogIndex) {
        if nc <= mc {
            self.flag(Property::CommitOrder, t, Some(node), format!("nextCommit {nc} not above maxCommit {mc}"));
        }
        let r = &mut self.replicas[node.index()];
        if mc < r.max_commit {
            let prev = r.max_commit;
            self.flag(Property::Monotonicity, t, Some(node), format!("maxCommit went from {prev} to {mc}"));
            return;
        }
        let grew = mc > r.max_commit;
        r.max_commit = mc;
        if !grew {
            return;
        }
        let decided = self
            .holders
            .range((mc, Term::ZERO)..=(mc, Term(u64::MAX)))
            .filter(|(_, b)| b.count_ones() >= self.majority)
            .map(|((_, term), _)| *term)
            .max();
        match decided {
            Some(term) => self.note_committed(mc, term),
            None => self.flag(Property::CommitSafety, t, Some(node), format!("maxCommit {mc} held by no majority")),
        }
    }

    fn on_apply(&mut self, t: Micros, node: ProcessId, index: LogIndex, term: Term, cmd: Digest) {
        let r = &mut self.replicas[node.index()];
        if index != r.next_apply {
            let want = r.next_apply;
            self.flag(Property::StateMachineSafety, t, Some(node), format!("applied {index}, expected {want}"));
            return;
        }
        r.next_apply += 1;
        let slot = index as usize;
        if self.applied.len() <= slot {
            self.applied.resize(slot + 1, None);
        }
        match self.applied[slot] {
            Some(prev) if prev != (term, cmd) => self.flag(
                Property::StateMachineSafety,
                t,
                Some(node),
                format!("applied (term {term}, {cmd:?}) at {index}; another replica applied (term {}, {:?})", prev.0, prev.1),
            ),
            Some(_) => {}
            None => self.applied[slot] = Some((term, cmd)),
        }
    }

    /// Cross-checks the reconstructed logs and the appliers against the
    /// final replica states.
    pub fn check_final(&mut self, states: &[Option<NodeState>], histories: &[HistoryApplier]) {
        for (i, st) in states.iter().enumerate() {
            let Some(st) = st else {
                continue;
            };
            let node = Some(ProcessId::from(i));
            let rebuilt: Vec<Term> = self.replicas[i].log[1..].iter().map(|e| e.0).collect();
            let actual: Vec<Term> = st.log.entries().iter().map(|e| e.term).collect();
            if rebuilt != actual {
                let at = rebuilt.iter().zip(&actual).position(|(a, b)| a != b);
                self.flag(
                    Property::LogMatching,
                    u64::MAX,
                    node,
                    format!(
                        "final log (length {}) differs from the traced appends (length {}) at {at:?}",
                        actual.len(),
                        rebuilt.len()
                    ),
                );
            }
        }
        let mut seen: Vec<Option<(Term, Digest)>> = Vec::new();
        for (i, h) in histories.iter().enumerate() {
            for (pos, (index, term, cmd)) in h.history.iter().enumerate() {
                let node = Some(ProcessId::from(i));
                if *index != pos as LogIndex + 1 {
                    self.flag(Property::StateMachineSafety, u64::MAX, node, format!("history position {pos} holds index {index}"));
                    break;
                }
                if seen.len() <= pos {
                    seen.push(Some((*term, *cmd)));
                } else if seen[pos] != Some((*term, *cmd)) {
                    self.flag(Property::StateMachineSafety, u64::MAX, node, format!("history diverges at index {index}"));
                    break;
                }
            }
        }
    }

    pub fn verdict(&self) -> &Verdict {
        &self.verdict
    }

    pub fn finish(self) -> Verdict {
        self.verdict
    }
}

impl TraceSink for Checker {
    fn begin(&mut self, header: &TraceHeader) {
        self.reset(header.n);
    }

    fn record(&mut self, rec: &TraceRecord) {
        self.feed(rec);
    }
}

/// Checks an in-memory trace.
pub fn check_trace(trace: &Trace) -> Verdict {
    let mut c = Checker::new(trace.header.n);
    for r in &trace.records {
        c.feed(r);
    }
    c.finish()
}

/// Checks a JSONL trace without loading it whole. Malformed input is a
/// fatal error naming the line.
pub fn check_jsonl<R: BufRead>(r: R) -> Result<Verdict, TraceError> {
    let mut c = Checker::default();
    crate::trace::replay(r, &mut c)?;
    Ok(c.finish())
}
