//! Decentralized commit agreement: bitmap voting on `nextCommit`, with
//! `maxCommit` bounding how far any replica may advance its commit index.
//!
//! Every replica keeps a [`CommitState`] and exchanges it on AppendEntries
//! traffic. A replica sets its own bit once its log holds `nextCommit` and its
//! last entry belongs to the current term; once a majority of bits is
//! observed, `maxCommit` moves to `nextCommit` and a new vote starts.

use crate::types::{Bitmap, CommitFields, LogIndex, ProcessId, ReplicatedLog, Term};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitState {
    bitmap: Bitmap,
    max_commit: LogIndex,
    next_commit: LogIndex,
    self_id: ProcessId,
}

/// Result of running the receive pipeline on one set of incoming fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Absorbed {
    pub changed: bool,
    pub commit_index: LogIndex,
}

impl CommitState {
    pub fn new(n: usize, self_id: ProcessId) -> CommitState {
        CommitState {
            bitmap: Bitmap::zeros(n),
            max_commit: 0,
            next_commit: 1,
            self_id,
        }
    }

    /// Builds a state from explicit values. Panics if `next_commit <= max_commit`.
    pub fn from_parts(
        bitmap: Bitmap,
        max_commit: LogIndex,
        next_commit: LogIndex,
        self_id: ProcessId,
    ) -> CommitState {
        assert!(next_commit > max_commit, "nextCommit must exceed maxCommit");
        assert!(self_id.index() < bitmap.len());
        CommitState {
            bitmap,
            max_commit,
            next_commit,
            self_id,
        }
    }

    pub fn bitmap(&self) -> &Bitmap {
        &self.bitmap
    }

    pub fn max_commit(&self) -> LogIndex {
        self.max_commit
    }

    pub fn next_commit(&self) -> LogIndex {
        self.next_commit
    }

    pub fn self_id(&self) -> ProcessId {
        self.self_id
    }

    /// Advances `maxCommit` when the bitmap shows a majority, then picks the
    /// next index to vote on from the local log.
    pub fn update(&mut self, log: &ReplicatedLog, current_term: Term, majority: usize) -> bool {
        if self.bitmap.count_ones() < majority {
            return false;
        }
        self.max_commit = self.next_commit;
        self.bitmap.clear();
        if self.next_commit >= log.last_index() || log.last_term() != current_term {
            self.next_commit += 1;
        } else {
            self.next_commit = log.last_index();
            self.bitmap.set(self.self_id.index());
        }
        true
    }

    /// Combines received fields into the local state.
    pub fn merge(&mut self, bitmap: &Bitmap, max_commit: LogIndex, next_commit: LogIndex) -> bool {
        let before = (self.max_commit, self.next_commit, self.bitmap.clone());
        self.max_commit = self.max_commit.max(max_commit);
        if self.next_commit <= next_commit {
            self.bitmap.or_assign(bitmap);
        }
        if self.next_commit <= self.max_commit {
            self.bitmap = bitmap.clone();
            self.next_commit = next_commit;
        }
        before != (self.max_commit, self.next_commit, self.bitmap.clone())
    }

    /// Sets this replica's bit once its log holds `nextCommit` and the last
    /// entry is from the current term.
    pub fn try_set_own_bit(&mut self, log: &ReplicatedLog, current_term: Term) -> bool {
        let me = self.self_id.index();
        if log.last_index() >= self.next_commit
            && log.last_term() == current_term
            && !self.bitmap.get(me)
        {
            self.bitmap.set(me);
            true
        } else {
            false
        }
    }

    /// Commit index allowed by `maxCommit`, never moving backwards.
    pub fn follower_commit_index(
        &self,
        log: &ReplicatedLog,
        current_term: Term,
        commit_index: LogIndex,
    ) -> LogIndex {
        if log.last_term() == current_term {
            commit_index.max(log.last_index().min(self.max_commit))
        } else {
            commit_index
        }
    }

    /// Called when an election starts locally or a newer term is seen.
    pub fn reset_on_term_change(&mut self) {
        self.bitmap.clear();
        self.next_commit = self.max_commit + 1;
    }

    pub fn attach_fields(&self) -> CommitFields {
        CommitFields {
            bitmap: self.bitmap.clone(),
            max_commit: self.max_commit,
            next_commit: self.next_commit,
        }
    }

    /// Full receive pipeline: merge, own bit, update to a fixed point, then
    /// the commit rule. `observe` sees the state after every mutation.
    pub fn absorb(
        &mut self,
        fields: &CommitFields,
        log: &ReplicatedLog,
        current_term: Term,
        majority: usize,
        commit_index: LogIndex,
        observe: &mut dyn FnMut(&CommitState),
    ) -> Absorbed {
        let mut changed = false;
        if self.merge(&fields.bitmap, fields.max_commit, fields.next_commit) {
            changed = true;
            observe(self);
        }
        let settled = self.settle(log, current_term, majority, commit_index, observe);
        Absorbed {
            changed: changed || settled.changed,
            commit_index: settled.commit_index,
        }
    }

    /// Local half of the pipeline, run after the log changes.
    pub fn settle(
        &mut self,
        log: &ReplicatedLog,
        current_term: Term,
        majority: usize,
        commit_index: LogIndex,
        observe: &mut dyn FnMut(&CommitState),
    ) -> Absorbed {
        let mut changed = false;
        if self.try_set_own_bit(log, current_term) {
            changed = true;
            observe(self);
        }
        while self.update(log, current_term, majority) {
            changed = true;
            observe(self);
        }
        Absorbed {
            changed,
            commit_index: self.follower_commit_index(log, current_term, commit_index),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::LogEntry;
    use proptest::prelude::*;

    fn log_with(terms: &[u64]) -> ReplicatedLog {
        let mut log = ReplicatedLog::new();
        for t in terms {
            log.append(LogEntry::new(Term(*t), &b"c"[..])).unwrap();
        }
        log
    }

    fn cs(bits: &str, mc: LogIndex, nc: LogIndex, me: u32) -> CommitState {
        CommitState::from_parts(bits.parse().unwrap(), mc, nc, ProcessId(me))
    }

    #[test]
    fn update_with_majority_jumps_to_last_index() {
        let mut s = cs("11100", 4, 7, 0);
        let log = log_with(&[2; 9]);
        assert!(s.update(&log, Term(2), 3));
        assert_eq!((s.max_commit(), s.next_commit()), (7, 9));
        assert_eq!(s.bitmap().to_string(), "10000");
    }

    #[test]
    fn update_below_majority_is_noop() {
        let mut s = cs("11000", 4, 7, 0);
        let before = s.clone();
        assert!(!s.update(&log_with(&[2; 9]), Term(2), 3));
        assert_eq!(s, before);
    }

    #[test]
    fn update_at_log_end_probes_next_index() {
        let mut s = cs("11100", 4, 7, 0);
        assert!(s.update(&log_with(&[2; 7]), Term(2), 3));
        assert_eq!((s.max_commit(), s.next_commit()), (7, 8));
        assert_eq!(s.bitmap().to_string(), "00000");
    }

    #[test]
    fn update_creeps_when_last_term_is_stale() {
        let mut s = cs("11100", 4, 7, 0);
        assert!(s.update(&log_with(&[1; 9]), Term(2), 3));
        assert_eq!((s.max_commit(), s.next_commit()), (7, 8));
    }

    #[test]
    fn merge_or_branch_only() {
        let mut s = cs("10000", 3, 5, 0);
        assert!(s.merge(&"01000".parse().unwrap(), 3, 5));
        assert_eq!(s.bitmap().to_string(), "11000");
        assert_eq!((s.max_commit(), s.next_commit()), (3, 5));
    }

    #[test]
    fn merge_takes_received_vote_when_overtaken() {
        let mut s = cs("10000", 3, 5, 0);
        assert!(s.merge(&"00100".parse().unwrap(), 6, 7));
        assert_eq!(s.bitmap().to_string(), "00100");
        assert_eq!((s.max_commit(), s.next_commit()), (6, 7));
    }

    #[test]
    fn merge_with_self_is_noop() {
        let mut s = cs("10100", 3, 5, 0);
        let f = s.attach_fields();
        assert!(!s.merge(&f.bitmap, f.max_commit, f.next_commit));
    }

    #[test]
    fn own_bit_rule() {
        let mut s = cs("00000", 3, 5, 1);
        assert!(s.try_set_own_bit(&log_with(&[2; 7]), Term(2)));
        assert_eq!(s.bitmap().to_string(), "01000");

        let mut s = cs("00000", 3, 5, 1);
        assert!(!s.try_set_own_bit(&log_with(&[2; 4]), Term(2)));

        let mut s = cs("00000", 3, 5, 1);
        assert!(!s.try_set_own_bit(&log_with(&[1; 7]), Term(2)));
    }

    #[test]
    fn follower_commit_rule() {
        let s = cs("00000", 7, 8, 0);
        assert_eq!(s.follower_commit_index(&log_with(&[2; 5]), Term(2), 0), 5);
        assert_eq!(s.follower_commit_index(&log_with(&[2; 9]), Term(2), 0), 7);
        assert_eq!(s.follower_commit_index(&log_with(&[1; 9]), Term(2), 2), 2);
        // never backwards
        assert_eq!(s.follower_commit_index(&log_with(&[2; 9]), Term(2), 8), 8);
    }

    #[test]
    fn reset_rule() {
        let mut s = cs("10110", 7, 12, 0);
        s.reset_on_term_change();
        assert_eq!((s.max_commit(), s.next_commit()), (7, 8));
        assert_eq!(s.bitmap().to_string(), "00000");
        let again = s.clone();
        s.reset_on_term_change();
        assert_eq!(s, again);

        let mut fresh = CommitState::new(5, ProcessId(0));
        fresh.reset_on_term_change();
        assert_eq!(fresh, CommitState::new(5, ProcessId(0)));
    }

    #[test]
    fn absorb_reaches_majority_without_leader() {
        // Replica 2 sees bits from 0 and 1 for index 4 and holds index 4 itself.
        let mut s = cs("00000", 2, 4, 2);
        let incoming = CommitFields {
            bitmap: "11000".parse().unwrap(),
            max_commit: 2,
            next_commit: 4,
        };
        let log = log_with(&[1, 1, 1, 1]);
        let mut seen = Vec::new();
        let out = s.absorb(&incoming, &log, Term(1), 3, 2, &mut |c| {
            seen.push((c.max_commit(), c.next_commit()))
        });
        assert!(out.changed);
        assert_eq!(s.max_commit(), 4);
        assert_eq!(out.commit_index, 4);
        assert!(seen.iter().all(|(mc, nc)| nc > mc));
    }

    #[test]
    fn absorb_of_stale_fields_changes_nothing() {
        let mut s = cs("01000", 5, 6, 1);
        let before = s.clone();
        let stale = CommitFields {
            bitmap: "10000".parse().unwrap(),
            max_commit: 2,
            next_commit: 3,
        };
        let out = s.absorb(&stale, &log_with(&[1; 5]), Term(1), 3, 5, &mut |_| {});
        assert!(!out.changed);
        assert_eq!(s, before);
    }

    #[test]
    fn merge_order_can_change_bitmap_but_not_max_commit() {
        // Two valid inputs whose application order yields different bitmaps.
        let x = cs("100", 0, 1, 0);
        let a = cs("011", 2, 3, 1).attach_fields();
        let b = cs("110", 0, 3, 2).attach_fields();
        let mut ab = x.clone();
        ab.merge(&a.bitmap, a.max_commit, a.next_commit);
        ab.merge(&b.bitmap, b.max_commit, b.next_commit);
        let mut ba = x.clone();
        ba.merge(&b.bitmap, b.max_commit, b.next_commit);
        ba.merge(&a.bitmap, a.max_commit, a.next_commit);
        assert_eq!(ab.max_commit(), ba.max_commit());
        assert_ne!(ab.bitmap(), ba.bitmap());
    }

    fn arb_state(n: usize) -> impl Strategy<Value = CommitState> {
        (prop::collection::vec(any::<bool>(), n), 0u64..20, 1u64..6, 0..n).prop_map(
            move |(bits, mc, gap, me)| {
                CommitState::from_parts(Bitmap::from_bools(&bits), mc, mc + gap, ProcessId(me as u32))
            },
        )
    }

    proptest! {
        #[test]
        fn rest_invariant_survives_any_sequence(
            start in arb_state(5),
            ops in prop::collection::vec((0u8..4, arb_state(5), 0usize..25, 1u64..4), 1..40),
        ) {
            let mut s = start;
            for (op, other, len, term) in ops {
                let log = log_with(&vec![term; len]);
                match op {
                    0 => { s.merge(other.bitmap(), other.max_commit(), other.next_commit()); }
                    1 => { s.update(&log, Term(term), 3); }
                    2 => { s.try_set_own_bit(&log, Term(term)); }
                    _ => { s.absorb(&other.attach_fields(), &log, Term(term), 3, 0, &mut |_| {}); }
                }
                prop_assert!(s.next_commit() > s.max_commit());
            }
        }

        #[test]
        fn max_commit_never_decreases(
            start in arb_state(5),
            others in prop::collection::vec(arb_state(5), 1..20),
            len in 0usize..30,
        ) {
            let mut s = start;
            let log = log_with(&vec![1; len]);
            for o in others {
                let before = s.max_commit();
                s.absorb(&o.attach_fields(), &log, Term(1), 3, 0, &mut |_| {});
                prop_assert!(s.max_commit() >= before);
                s.reset_on_term_change();
                prop_assert!(s.max_commit() >= before);
            }
        }

        #[test]
        fn merge_is_idempotent(x in arb_state(5), m in arb_state(5)) {
            let mut once = x.clone();
            once.merge(m.bitmap(), m.max_commit(), m.next_commit());
            let mut twice = once.clone();
            prop_assert!(!twice.merge(m.bitmap(), m.max_commit(), m.next_commit()));
            prop_assert_eq!(&once, &twice);
        }

        #[test]
        fn absorbing_own_fields_is_a_no_op_after_settling(x in arb_state(5), len in 0usize..30) {
            let log = log_with(&vec![1; len]);
            let mut s = x.clone();
            let c = s.settle(&log, Term(1), 3, 0, &mut |_| {}).commit_index;
            let settled = s.clone();
            let out = s.absorb(&settled.attach_fields(), &log, Term(1), 3, c, &mut |_| {});
            prop_assert!(!out.changed);
            prop_assert_eq!(&s, &settled);
            prop_assert_eq!(out.commit_index, c);
        }

        #[test]
        fn repeated_absorb_reaches_a_fixed_point(x in arb_state(5), m in arb_state(5), len in 0usize..30) {
            // A second absorb of the same fields may still move state: the
            // first one's Update consumed the bits, which then count again
            // against the new nextCommit, until nextCommit passes the sender's.
            let log = log_with(&vec![1; len]);
            let f = m.attach_fields();
            let mut s = x.clone();
            let mut steps = 0;
            while s.absorb(&f, &log, Term(1), 3, 0, &mut |_| {}).changed {
                steps += 1;
                prop_assert!(steps <= 32, "no fixed point");
            }
        }

        #[test]
        fn max_commit_is_order_independent(
            x in arb_state(5), a in arb_state(5), b in arb_state(5), c in arb_state(5)
        ) {
            let apply = |order: [&CommitState; 3]| {
                let mut s = x.clone();
                for o in order {
                    s.merge(o.bitmap(), o.max_commit(), o.next_commit());
                }
                s
            };
            let r1 = apply([&a, &b, &c]);
            let r2 = apply([&c, &a, &b]);
            let r3 = apply([&b, &c, &a]);
            prop_assert_eq!(r1.max_commit(), r2.max_commit());
            prop_assert_eq!(r1.max_commit(), r3.max_commit());
            for r in [&r1, &r2, &r3] {
                prop_assert!(r.next_commit() > r.max_commit());
            }
        }
    }
}
