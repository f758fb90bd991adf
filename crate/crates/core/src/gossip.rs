//! Epidemic dissemination of AppendEntries.
//!
//! The leader periodically sends one message carrying every uncommitted entry
//! to `F` peers picked by walking a random permutation; every follower that
//! sees a round for the first time replies to the leader and forwards the
//! same message to `F` peers of its own walk. `roundLC` tells fresh rounds
//! from duplicates.

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::raft::{Envelope, Node, Role};
use crate::trace::Micros;
use crate::types::{AppendEntriesMsg, AppendEntriesReply, Message, ProcessId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WalkerError {
    #[error("gossip needs at least 2 replicas, got {0}")]
    TooFewReplicas(usize),
    #[error("fanout {fanout} outside 1..={max}")]
    Fanout { fanout: usize, max: usize },
    #[error("order is not a permutation of the other replicas")]
    NotPermutation,
}

/// Circular walk over a fixed random ordering of the other replicas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationWalker {
    order: Vec<ProcessId>,
    cursor: u64,
    fanout: usize,
}

impl PermutationWalker {
    pub fn new(
        n: usize,
        me: ProcessId,
        fanout: usize,
        seed: u64,
    ) -> Result<PermutationWalker, WalkerError> {
        if n < 2 {
            return Err(WalkerError::TooFewReplicas(n));
        }
        let mut order: Vec<ProcessId> = (0..n).map(ProcessId::from).filter(|p| *p != me).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        PermutationWalker::from_order(order, fanout)
    }

    /// Builds a walker over an explicit ordering (cursor at 0).
    pub fn from_order(order: Vec<ProcessId>, fanout: usize) -> Result<PermutationWalker, WalkerError> {
        let mut sorted: Vec<_> = order.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != order.len() || order.is_empty() {
            return Err(WalkerError::NotPermutation);
        }
        if fanout == 0 || fanout > order.len() {
            return Err(WalkerError::Fanout {
                fanout,
                max: order.len(),
            });
        }
        Ok(PermutationWalker {
            order,
            cursor: 0,
            fanout,
        })
    }

    pub fn order(&self) -> &[ProcessId] {
        &self.order
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn fanout(&self) -> usize {
        self.fanout
    }

    /// The next `F` destinations; advances the cursor by `F`.
    pub fn next_targets(&mut self) -> Vec<ProcessId> {
        let len = self.order.len() as u64;
        let out = (0..self.fanout as u64)
            .map(|i| self.order[((self.cursor + i) % len) as usize])
            .collect();
        self.cursor += self.fanout as u64;
        out
    }

    /// One round: the same message to each of the next `F` destinations.
    pub fn round<M: Clone>(&mut self, msg: &M) -> Vec<(ProcessId, M)> {
        self.next_targets()
            .into_iter()
            .map(|p| (p, msg.clone()))
            .collect()
    }
}

/// Highest `roundLC` observed in the current term. On the leader it is the
/// round counter itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GossipSeen {
    round: u64,
}

impl GossipSeen {
    pub fn current(self) -> u64 {
        self.round
    }

    pub fn fresh(self, round_lc: u64) -> bool {
        round_lc > self.round
    }

    /// Records `round_lc`; returns whether it was fresh.
    pub fn observe(&mut self, round_lc: u64) -> bool {
        let fresh = self.fresh(round_lc);
        if fresh {
            self.round = round_lc;
        }
        fresh
    }

    pub fn reset(&mut self) {
        self.round = 0;
    }

    /// Leader side: starts the next round and returns its number.
    pub fn advance(&mut self) -> u64 {
        self.round += 1;
        self.round
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GossipOutcome {
    pub delivered: bool,
    pub reply: Option<AppendEntriesReply>,
    pub relays: Vec<Envelope>,
}

impl GossipOutcome {
    fn ignored() -> GossipOutcome {
        GossipOutcome {
            delivered: false,
            reply: None,
            relays: Vec::new(),
        }
    }
}

impl Node {
    /// Starts a gossip round: entries above `commitIndex`, sent to the next
    /// `F` peers of the leader's walk.
    pub fn leader_start_round(&mut self, _now: Micros) -> Vec<Envelope> {
        assert_eq!(self.state.role, Role::Leader, "only the leader starts rounds");
        let round_lc = self.state.round.advance();
        let prev = self.state.commit_index;
        let mut msg = AppendEntriesMsg {
            term: self.state.current_term,
            leader_id: self.state.id,
            prev_log_index: prev,
            prev_log_term: self.state.log.term_at(prev).expect("commit index within log"),
            entries: self.state.log.entries_from(prev + 1).to_vec(),
            leader_commit: self.state.commit_index,
            is_gossip: true,
            round_lc,
            bitmap: None,
            max_commit: None,
            next_commit: None,
        };
        msg.set_commit_fields(self.commit_fields());
        let Some(walker) = self.walker.as_mut() else {
            return Vec::new();
        };
        walker
            .round(&Message::AppendEntries(msg))
            .into_iter()
            .map(|(to, msg)| Envelope { to, msg })
            .collect()
    }

    /// Follower side of a gossip message: fresh rounds are delivered,
    /// answered and relayed; stale ones are ignored apart from their V2
    /// commit fields.
    pub fn on_gossip_receive(&mut self, msg: &AppendEntriesMsg, now: Micros) -> GossipOutcome {
        debug_assert!(msg.is_gossip);
        if msg.leader_id == self.state.id {
            // Our own round came back through a relay.
            if msg.term == self.state.current_term {
                if let Some(f) = msg.commit_fields() {
                    self.absorb_commit_fields(&f);
                }
            }
            return GossipOutcome::ignored();
        }
        if msg.term < self.state.current_term {
            // Lets a deposed leader learn about the newer term.
            let out = self.handle_append_entries(msg, now);
            return GossipOutcome {
                delivered: false,
                reply: out.reply,
                relays: Vec::new(),
            };
        }
        if msg.term > self.state.current_term {
            self.step_down(msg.term, now);
        }
        if !self.state.round.fresh(msg.round_lc) {
            if let Some(f) = msg.commit_fields() {
                self.absorb_commit_fields(&f);
            }
            return GossipOutcome::ignored();
        }
        self.state.round.observe(msg.round_lc);
        let out = self.handle_append_entries(msg, now);
        if let Some(f) = msg.commit_fields() {
            self.absorb_commit_fields(&f);
        }
        let success_replies = self.cfg.gossip_success_replies;
        let reply = out
            .reply
            .filter(|r| !r.success || success_replies)
            .map(|mut r| {
                r.set_commit_fields(self.commit_fields());
                r
            });
        let mut relays = Vec::new();
        if self.cfg.gossip_relay {
            let mut fwd = msg.clone();
            // Relays carry the relayer's own commit view (V2 only).
            fwd.set_commit_fields(self.commit_fields());
            let fwd = Message::AppendEntries(fwd);
            if let Some(w) = self.walker.as_mut() {
                relays = w
                    .round(&fwd)
                    .into_iter()
                    .map(|(to, msg)| Envelope { to, msg })
                    .collect();
            }
        }
        GossipOutcome {
            delivered: true,
            reply,
            relays,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pids(v: &[u32]) -> Vec<ProcessId> {
        v.iter().map(|i| ProcessId(*i)).collect()
    }

    #[test]
    fn circular_walk() {
        let mut w = PermutationWalker::from_order(pids(&[2, 3, 1]), 2).unwrap();
        assert_eq!(w.next_targets(), pids(&[2, 3]));
        assert_eq!(w.cursor(), 2);
        assert_eq!(w.next_targets(), pids(&[1, 2]));
        assert_eq!(w.cursor(), 4);
    }

    #[test]
    fn full_fanout_is_broadcast() {
        let mut w = PermutationWalker::new(6, ProcessId(0), 5, 9).unwrap();
        let mut t = w.next_targets();
        t.sort();
        assert_eq!(t, pids(&[1, 2, 3, 4, 5]));
    }

    #[test]
    fn walker_construction() {
        let w = PermutationWalker::new(2, ProcessId(1), 1, 3).unwrap();
        assert_eq!(w.order(), pids(&[0]).as_slice());
        let a = PermutationWalker::new(9, ProcessId(4), 3, 77).unwrap();
        let b = PermutationWalker::new(9, ProcessId(4), 3, 77).unwrap();
        assert_eq!(a, b);
        assert!(!a.order().contains(&ProcessId(4)));
        assert!(PermutationWalker::new(1, ProcessId(0), 1, 0).is_err());
        assert!(PermutationWalker::new(4, ProcessId(0), 4, 0).is_err());
        assert!(PermutationWalker::new(4, ProcessId(0), 0, 0).is_err());
        assert!(PermutationWalker::from_order(pids(&[1, 1]), 1).is_err());
    }

    #[test]
    fn first_peer_is_uniform() {
        // χ² with 3 degrees of freedom; 16.27 is the 0.1% critical value.
        let draws = 10_000;
        let mut counts = [0u32; 5];
        for seed in 0..draws {
            let w = PermutationWalker::new(5, ProcessId(0), 1, seed).unwrap();
            counts[w.order()[0].index()] += 1;
        }
        assert_eq!(counts[0], 0);
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts[1..].iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 16.27, "χ² = {chi2}, counts {counts:?}");
    }

    #[test]
    fn window_covers_every_peer() {
        for fanout in 1..=6 {
            let mut w = PermutationWalker::new(7, ProcessId(3), fanout, fanout as u64).unwrap();
            for _ in 0..5 {
                let rounds = 6usize.div_ceil(fanout);
                let mut hit: Vec<ProcessId> = (0..rounds).flat_map(|_| w.next_targets()).collect();
                hit.sort();
                hit.dedup();
                assert_eq!(hit.len(), 6);
            }
        }
    }

    #[test]
    fn seen_rounds() {
        let mut s = GossipSeen::default();
        assert!(s.observe(4));
        assert!(s.observe(5));
        assert!(!s.observe(5));
        assert!(!s.observe(3));
        assert_eq!(s.current(), 5);
        s.reset();
        assert!(s.fresh(1));
        assert_eq!(s.advance(), 1);
        assert_eq!(s.advance(), 2);
    }

    fn gossip(term: u64, round_lc: u64) -> AppendEntriesMsg {
        AppendEntriesMsg {
            term: crate::types::Term(term),
            leader_id: ProcessId(0),
            prev_log_index: 0,
            prev_log_term: crate::types::Term(0),
            entries: Vec::new(),
            leader_commit: 0,
            is_gossip: true,
            round_lc,
            bitmap: None,
            max_commit: None,
            next_commit: None,
        }
    }

    fn follower() -> Node {
        use crate::raft::NodeConfig;
        use crate::types::Variant;
        Node::new(ProcessId(1), NodeConfig::new(5, Variant::V1), 7, 0)
    }

    #[test]
    fn fresh_round_is_delivered_answered_and_relayed() {
        let mut f = follower();
        f.on_gossip_receive(&gossip(1, 4), 0);
        let before = f.state().election_deadline;
        let out = f.on_gossip_receive(&gossip(1, 5), 10);
        assert!(out.delivered);
        assert!(out.reply.is_some_and(|r| r.success));
        assert_eq!(out.relays.len(), 3);
        assert!(out.relays.iter().all(|e| e.to != ProcessId(1)));
        assert_eq!(f.state().round.current(), 5);
        assert!(f.state().election_deadline >= before);
    }

    #[test]
    fn duplicate_round_is_dropped() {
        let mut f = follower();
        f.on_gossip_receive(&gossip(1, 5), 0);
        let out = f.on_gossip_receive(&gossip(1, 5), 1);
        assert_eq!(out, GossipOutcome::ignored());
        let out = f.on_gossip_receive(&gossip(1, 2), 2);
        assert!(!out.delivered);
    }

    #[test]
    fn newer_term_resets_seen_round() {
        let mut f = follower();
        f.on_gossip_receive(&gossip(1, 9), 0);
        let out = f.on_gossip_receive(&gossip(2, 1), 1);
        assert!(out.delivered);
        assert_eq!(f.state().round.current(), 1);
        assert_eq!(f.state().current_term, crate::types::Term(2));
    }

    #[test]
    fn relay_switch_off() {
        use crate::raft::NodeConfig;
        use crate::types::Variant;
        let mut cfg = NodeConfig::new(5, Variant::V1);
        cfg.gossip_relay = false;
        let mut f = Node::new(ProcessId(2), cfg, 1, 0);
        let out = f.on_gossip_receive(&gossip(1, 1), 0);
        assert!(out.delivered && out.relays.is_empty());
    }

    #[test]
    fn v2_answers_only_failed_rounds() {
        use crate::raft::NodeConfig;
        use crate::types::{LogEntry, Term, Variant};
        let mut f = Node::new(ProcessId(2), NodeConfig::new(5, Variant::V2), 1, 0);
        let out = f.on_gossip_receive(&gossip(1, 1), 0);
        assert!(out.delivered && out.reply.is_none());
        let mut gap = gossip(1, 2);
        gap.prev_log_index = 3;
        gap.prev_log_term = Term(1);
        gap.entries = vec![LogEntry::new(Term(1), b"x".to_vec())];
        let out = f.on_gossip_receive(&gap, 1);
        assert!(out.reply.is_some_and(|r| !r.success && r.match_hint == 0));
    }
}
