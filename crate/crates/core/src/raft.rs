//! Per-replica Raft state machine.
//!
//! A [`Node`] is a pure event-in, messages-out engine: the simulator feeds it
//! messages, client requests and timer ticks, then drains the outbound
//! envelopes, client responses and trace events it produced. The same core
//! serves all three variants; the gossip and commit-agreement extensions hook
//! in through [`crate::gossip`] and [`crate::commit`].

use std::collections::BTreeMap;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commit::CommitState;
use crate::gossip::{GossipSeen, PermutationWalker};
use crate::trace::{Digest, Micros, TraceEvent};
use crate::types::{
    AppendEntriesMsg, AppendEntriesReply, CommitFields, LogEntry, LogIndex, Message, ProcessId,
    ReplicatedLog, RequestVoteMsg, RequestVoteReply, Term, Variant,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

impl Role {
    /// Allowed role changes: timeout (F→C), re-election (C→C), winning
    /// (C→L), losing or seeing a newer term (C→F, L→F). F→F covers term
    /// adoption without a role change.
    pub fn may_become(self, next: Role) -> bool {
        use Role::*;
        matches!(
            (self, next),
            (Follower, Candidate)
                | (Follower, Follower)
                | (Candidate, Candidate)
                | (Candidate, Leader)
                | (Candidate, Follower)
                | (Leader, Follower)
        )
    }
}

/// Static per-replica parameters. Durations are in simulated microseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeConfig {
    pub n: usize,
    pub variant: Variant,
    pub fanout: usize,
    /// Lower bound T of the election timeout, drawn uniformly from [T, 2T].
    pub election_timeout: Micros,
    /// Leader round / heartbeat period while entries are uncommitted.
    pub round_period: Micros,
    /// Leader heartbeat period when everything is committed. Defaults to the
    /// round period: longer idle gaps let a gossip round miss a follower
    /// often enough to trigger elections in large clusters.
    pub idle_period: Micros,
    /// Whether followers forward fresh gossip rounds.
    pub gossip_relay: bool,
    /// Whether a follower answers a fresh gossip round it applied cleanly.
    /// Failure answers are always sent so the leader can repair the log.
    /// Off by default for V2, whose commit progress travels in the gossip
    /// itself and whose leader never consults match indices.
    pub gossip_success_replies: bool,
}

impl NodeConfig {
    pub fn new(n: usize, variant: Variant) -> NodeConfig {
        let t = 26_667;
        NodeConfig {
            n,
            variant,
            fanout: 3.min(n.saturating_sub(1)).max(1),
            election_timeout: t,
            round_period: t / 5,
            idle_period: t / 5,
            gossip_relay: true,
            gossip_success_replies: variant != Variant::V2,
        }
    }

    pub fn majority(&self) -> usize {
        self.n / 2 + 1
    }
}

/// Identifies one client request so the leader can answer it once applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClientTag {
    pub client: u32,
    pub seq: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClientOutcome {
    Accepted(LogIndex),
    Redirect(ProcessId),
    Unavailable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClientResponse {
    pub tag: ClientTag,
    pub index: LogIndex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub to: ProcessId,
    pub msg: Message,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeaderVolatile {
    pub next_index: Vec<LogIndex>,
    pub match_index: Vec<LogIndex>,
    pub last_round_start: Micros,
    /// Entries this leader appended on behalf of clients, awaiting apply.
    pub origins: BTreeMap<LogIndex, ClientTag>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub id: ProcessId,
    pub role: Role,
    pub current_term: Term,
    pub voted_for: Option<ProcessId>,
    pub log: ReplicatedLog,
    pub commit_index: LogIndex,
    pub last_applied: LogIndex,
    /// Leader: round counter. Follower: newest round seen this term.
    pub round: GossipSeen,
    pub leader: Option<LeaderVolatile>,
    pub commit_state: Option<CommitState>,
    pub election_deadline: Micros,
    pub heartbeat_due: Micros,
    pub leader_hint: Option<ProcessId>,
}

/// The fields that survive a crash.
#[derive(Clone, Debug, PartialEq)]
pub struct DurableImage {
    pub current_term: Term,
    pub voted_for: Option<ProcessId>,
    pub log: ReplicatedLog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AppendOutcome {
    pub reply: Option<AppendEntriesReply>,
    pub state_changed: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("applier failed at index {index}: {reason}")]
pub struct ApplyError {
    pub index: LogIndex,
    pub reason: String,
}

/// Deterministic state machine fed with committed entries in order.
pub trait Applier {
    fn apply(&mut self, index: LogIndex, entry: &LogEntry) -> Result<(), ApplyError>;
}

/// Default applier: records `(index, term, digest)` of every applied entry.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HistoryApplier {
    pub history: Vec<(LogIndex, Term, Digest)>,
}

impl Applier for HistoryApplier {
    fn apply(&mut self, index: LogIndex, entry: &LogEntry) -> Result<(), ApplyError> {
        self.history.push((index, entry.term, Digest::of(entry)));
        Ok(())
    }
}

pub struct Node {
    pub(crate) state: NodeState,
    pub(crate) cfg: NodeConfig,
    pub(crate) walker: Option<PermutationWalker>,
    rng: ChaCha8Rng,
    votes: Vec<bool>,
    pub(crate) outbox: Vec<Envelope>,
    pub(crate) events: Vec<TraceEvent>,
    responses: Vec<ClientResponse>,
    entries_appended: u64,
}

impl Node {
    /// A fresh replica starting as follower at `now`.
    pub fn new(id: ProcessId, cfg: NodeConfig, seed: u64, now: Micros) -> Node {
        let image = DurableImage {
            current_term: Term::ZERO,
            voted_for: None,
            log: ReplicatedLog::new(),
        };
        Node::restore(id, cfg, image, seed, now)
    }

    /// Rebuilds a replica from its durable image; volatile state starts over.
    pub fn restore(
        id: ProcessId,
        cfg: NodeConfig,
        image: DurableImage,
        seed: u64,
        now: Micros,
    ) -> Node {
        assert!(id.index() < cfg.n, "replica id outside cluster");
        let walker = (cfg.variant.uses_gossip() && cfg.n >= 2).then(|| {
            PermutationWalker::new(cfg.n, id, cfg.fanout, seed ^ 0x5eed_0000_0000_0000 ^ id.0 as u64)
                .expect("fanout validated by configuration")
        });
        let commit_state =
            (cfg.variant == Variant::V2).then(|| CommitState::new(cfg.n, id));
        let mut node = Node {
            state: NodeState {
                id,
                role: Role::Follower,
                current_term: image.current_term,
                voted_for: image.voted_for,
                log: image.log,
                commit_index: 0,
                last_applied: 0,
                round: GossipSeen::default(),
                leader: None,
                commit_state,
                election_deadline: now,
                heartbeat_due: now,
                leader_hint: None,
            },
            votes: vec![false; cfg.n],
            cfg,
            walker,
            rng: ChaCha8Rng::seed_from_u64(seed),
            outbox: Vec::new(),
            events: Vec::new(),
            responses: Vec::new(),
            entries_appended: 0,
        };
        node.reset_election_deadline(now);
        node
    }

    pub fn state(&self) -> &NodeState {
        &self.state
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn id(&self) -> ProcessId {
        self.state.id
    }

    pub fn is_leader(&self) -> bool {
        self.state.role == Role::Leader
    }

    pub fn durable_image(&self) -> DurableImage {
        DurableImage {
            current_term: self.state.current_term,
            voted_for: self.state.voted_for,
            log: self.state.log.clone(),
        }
    }

    pub fn walker(&self) -> Option<&PermutationWalker> {
        self.walker.as_ref()
    }

    pub fn take_outbox(&mut self) -> Vec<Envelope> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_events(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn take_responses(&mut self) -> Vec<ClientResponse> {
        std::mem::take(&mut self.responses)
    }

    /// Entries appended to the local log since the last call.
    pub fn take_entries_appended(&mut self) -> u64 {
        std::mem::take(&mut self.entries_appended)
    }

    /// Earliest time at which [`Node::tick`] has something to do.
    pub fn next_wakeup(&self) -> Micros {
        match self.state.role {
            Role::Leader => self.state.heartbeat_due,
            _ => self.state.election_deadline,
        }
    }

    /// Overrides the pending election deadline (used to pick a first leader).
    pub fn set_election_deadline(&mut self, at: Micros) {
        self.state.election_deadline = at;
    }

    // ---- internal helpers -------------------------------------------------

    pub(crate) fn emit(&mut self, ev: TraceEvent) {
        self.events.push(ev);
    }

    pub(crate) fn send(&mut self, to: ProcessId, msg: Message) {
        self.outbox.push(Envelope { to, msg });
    }

    fn reset_election_deadline(&mut self, now: Micros) {
        let t = self.cfg.election_timeout;
        self.state.election_deadline = now + self.rng.random_range(t..=2 * t);
    }

    fn set_role(&mut self, role: Role) {
        debug_assert!(
            self.state.role.may_become(role),
            "illegal role change {:?} -> {:?}",
            self.state.role,
            role
        );
        self.state.role = role;
    }

    fn emit_role(&mut self) {
        let ev = TraceEvent::Role {
            role: self.state.role,
            term: self.state.current_term,
        };
        self.emit(ev);
    }

    /// Moves to `term` when it is newer, and to follower when not already.
    pub(crate) fn step_down(&mut self, term: Term, now: Micros) {
        let mut changed = false;
        if term > self.state.current_term {
            self.state.current_term = term;
            self.state.voted_for = None;
            self.state.round.reset();
            self.state.leader_hint = None;
            self.reset_commit_state();
            changed = true;
        }
        if self.state.role != Role::Follower {
            if self.state.role == Role::Leader {
                self.reset_election_deadline(now);
            }
            self.set_role(Role::Follower);
            self.state.leader = None;
            changed = true;
        }
        if changed {
            self.emit_role();
        }
    }

    fn reset_commit_state(&mut self) {
        if let Some(cs) = self.state.commit_state.as_mut() {
            cs.reset_on_term_change();
            let ev = TraceEvent::commit_state(cs);
            self.events.push(ev);
        }
    }

    pub(crate) fn commit_fields(&self) -> Option<CommitFields> {
        self.state.commit_state.as_ref().map(CommitState::attach_fields)
    }

    /// Runs the V2 receive pipeline on incoming fields.
    pub(crate) fn absorb_commit_fields(&mut self, fields: &CommitFields) {
        let term = self.state.current_term;
        let majority = self.cfg.majority();
        let commit = self.state.commit_index;
        let Some(cs) = self.state.commit_state.as_mut() else {
            return;
        };
        let events = &mut self.events;
        let out = cs.absorb(fields, &self.state.log, term, majority, commit, &mut |c| {
            events.push(TraceEvent::commit_state(c))
        });
        self.set_commit_index(out.commit_index);
    }

    /// V2 local pipeline after the log changed.
    pub(crate) fn settle_commit_state(&mut self) {
        let term = self.state.current_term;
        let majority = self.cfg.majority();
        let commit = self.state.commit_index;
        let Some(cs) = self.state.commit_state.as_mut() else {
            return;
        };
        let events = &mut self.events;
        let out = cs.settle(&self.state.log, term, majority, commit, &mut |c| {
            events.push(TraceEvent::commit_state(c))
        });
        self.set_commit_index(out.commit_index);
    }

    fn set_commit_index(&mut self, index: LogIndex) {
        if index > self.state.commit_index {
            debug_assert!(index <= self.state.log.last_index());
            self.state.commit_index = index;
            self.emit(TraceEvent::Commit {
                commit_index: index,
            });
        }
    }

    fn append_local(&mut self, entry: LogEntry) -> LogIndex {
        let ev_term = entry.term;
        let digest = Digest::of(&entry);
        let index = self
            .state
            .log
            .append(entry)
            .expect("entry terms never regress");
        self.entries_appended += 1;
        self.emit(TraceEvent::Append {
            index,
            term: ev_term,
            cmd: digest,
        });
        index
    }

    fn reply(&self, success: bool, match_hint: LogIndex) -> AppendEntriesReply {
        AppendEntriesReply {
            term: self.state.current_term,
            success,
            replier_id: self.state.id,
            match_hint,
            bitmap: None,
            max_commit: None,
            next_commit: None,
        }
    }

    fn peers(&self) -> impl Iterator<Item = ProcessId> + 'static {
        let me = self.state.id;
        (0..self.cfg.n).map(ProcessId::from).filter(move |p| *p != me)
    }

    // ---- message dispatch -------------------------------------------------

    /// Handles one inbound message and returns everything it produced.
    pub fn step(&mut self, from: ProcessId, msg: Message, now: Micros) -> Vec<Envelope> {
        match msg {
            Message::AppendEntries(m) => {
                if m.is_gossip {
                    let out = self.on_gossip_receive(&m, now);
                    if let Some(r) = out.reply {
                        self.send(m.leader_id, Message::AppendEntriesReply(r));
                    }
                    self.outbox.extend(out.relays);
                } else {
                    self.on_rpc_append(&m, now);
                }
            }
            Message::AppendEntriesReply(r) => self.handle_append_entries_reply(from, &r, now),
            Message::RequestVote(m) => {
                let r = self.handle_request_vote(&m, now);
                self.send(from, Message::RequestVoteReply(r));
            }
            Message::RequestVoteReply(r) => self.handle_vote_reply(from, &r, now),
        }
        self.take_outbox()
    }

    fn on_rpc_append(&mut self, msg: &AppendEntriesMsg, now: Micros) {
        if msg.leader_id == self.state.id {
            return;
        }
        let out = self.handle_append_entries(msg, now);
        if msg.term == self.state.current_term {
            if let Some(f) = msg.commit_fields() {
                self.absorb_commit_fields(&f);
            }
        }
        if let Some(mut r) = out.reply {
            r.set_commit_fields(self.commit_fields());
            self.send(msg.leader_id, Message::AppendEntriesReply(r));
        }
    }

    /// Log consistency check and append. Always produces a reply; whether it
    /// is sent is up to the caller.
    pub fn handle_append_entries(&mut self, msg: &AppendEntriesMsg, now: Micros) -> AppendOutcome {
        if msg.term < self.state.current_term {
            return AppendOutcome {
                reply: Some(self.reply(false, 0)),
                state_changed: false,
            };
        }
        let mut changed = false;
        if msg.term > self.state.current_term || self.state.role != Role::Follower {
            self.step_down(msg.term, now);
            changed = true;
        }
        self.state.leader_hint = Some(msg.leader_id);
        self.reset_election_deadline(now);

        if !self.state.log.matches(msg.prev_log_index, msg.prev_log_term) {
            let hint = self
                .state
                .log
                .last_index()
                .min(msg.prev_log_index.saturating_sub(1));
            return AppendOutcome {
                reply: Some(self.reply(false, hint)),
                state_changed: changed,
            };
        }

        for (i, entry) in msg.entries.iter().enumerate() {
            let index = msg.prev_log_index + 1 + i as LogIndex;
            match self.state.log.term_at(index) {
                Some(t) if t == entry.term => continue,
                Some(_) => {
                    self.state
                        .log
                        .truncate_from(index)
                        .expect("index above sentinel");
                    self.emit(TraceEvent::Truncate { from: index });
                }
                None => {}
            }
            self.append_local(entry.clone());
            changed = true;
        }

        let last_new = msg.last_index();
        if self.cfg.variant != Variant::V2 && msg.leader_commit > self.state.commit_index {
            self.set_commit_index(msg.leader_commit.min(last_new));
        }
        AppendOutcome {
            reply: Some(self.reply(true, last_new)),
            state_changed: changed,
        }
    }

    pub fn handle_append_entries_reply(
        &mut self,
        _from: ProcessId,
        reply: &AppendEntriesReply,
        now: Micros,
    ) {
        if reply.term > self.state.current_term {
            self.step_down(reply.term, now);
            return;
        }
        if reply.term < self.state.current_term || self.state.role != Role::Leader {
            return;
        }
        if let Some(f) = reply.commit_fields() {
            self.absorb_commit_fields(&f);
        }
        let peer = reply.replier_id.index();
        if peer >= self.cfg.n || reply.replier_id == self.state.id {
            return;
        }
        let last = self.state.log.last_index();
        let lv = self.state.leader.as_mut().expect("leader state");
        if reply.success {
            let hint = reply.match_hint.min(last);
            lv.match_index[peer] = lv.match_index[peer].max(hint);
            lv.next_index[peer] = lv.next_index[peer].max(hint + 1);
            if self.cfg.variant != Variant::V2 {
                self.advance_commit_leader();
            }
        } else {
            let next = lv.next_index[peer];
            lv.next_index[peer] = next.saturating_sub(1).min(reply.match_hint + 1).max(1);
            self.replicate_to(reply.replier_id);
        }
    }

    /// Majority commit from `matchIndex`, restricted to current-term entries.
    pub fn advance_commit_leader(&mut self) -> LogIndex {
        let Some(lv) = self.state.leader.as_ref() else {
            return self.state.commit_index;
        };
        let me = self.state.id.index();
        let mut matched: Vec<LogIndex> = lv
            .match_index
            .iter()
            .enumerate()
            .map(|(i, m)| if i == me { self.state.log.last_index() } else { *m })
            .collect();
        matched.sort_unstable_by(|a, b| b.cmp(a));
        let candidate = matched[self.cfg.majority() - 1];
        if candidate > self.state.commit_index
            && self.state.log.term_at(candidate) == Some(self.state.current_term)
        {
            self.set_commit_index(candidate);
        }
        self.state.commit_index
    }

    /// Point-to-point AppendEntries from `nextIndex[peer]`. Advances
    /// `nextIndex` optimistically so consecutive sends pipeline.
    pub(crate) fn replicate_to(&mut self, peer: ProcessId) {
        let last = self.state.log.last_index();
        let term = self.state.current_term;
        let me = self.state.id;
        let commit = self.state.commit_index;
        let round = self.state.round.current();
        let fields = self.commit_fields();
        let lv = self.state.leader.as_mut().expect("leader state");
        let next = lv.next_index[peer.index()].clamp(1, last + 1);
        lv.next_index[peer.index()] = last + 1;
        let prev = next - 1;
        let mut msg = AppendEntriesMsg {
            term,
            leader_id: me,
            prev_log_index: prev,
            prev_log_term: self.state.log.term_at(prev).expect("prev within log"),
            entries: self.state.log.entries_from(next).to_vec(),
            leader_commit: commit,
            is_gossip: false,
            round_lc: round,
            bitmap: None,
            max_commit: None,
            next_commit: None,
        };
        msg.set_commit_fields(fields);
        self.send(peer, Message::AppendEntries(msg));
    }

    fn broadcast_append_entries(&mut self) {
        for p in self.peers() {
            self.replicate_to(p);
        }
    }

    // ---- elections --------------------------------------------------------

    pub fn handle_request_vote(&mut self, msg: &RequestVoteMsg, now: Micros) -> RequestVoteReply {
        if msg.term > self.state.current_term {
            self.step_down(msg.term, now);
        }
        let grant = msg.term == self.state.current_term
            && self
                .state
                .voted_for
                .is_none_or(|v| v == msg.candidate_id)
            && self
                .state
                .log
                .is_behind_or_equal(msg.last_log_term, msg.last_log_index);
        if grant {
            self.state.voted_for = Some(msg.candidate_id);
            self.emit(TraceEvent::Vote {
                term: msg.term,
                candidate: msg.candidate_id,
            });
            self.reset_election_deadline(now);
        }
        RequestVoteReply {
            term: self.state.current_term,
            vote_granted: grant,
        }
    }

    pub fn handle_vote_reply(&mut self, from: ProcessId, reply: &RequestVoteReply, now: Micros) {
        if reply.term > self.state.current_term {
            self.step_down(reply.term, now);
            return;
        }
        if self.state.role != Role::Candidate
            || reply.term != self.state.current_term
            || !reply.vote_granted
            || from.index() >= self.cfg.n
        {
            return;
        }
        self.votes[from.index()] = true;
        if self.votes.iter().filter(|v| **v).count() >= self.cfg.majority() {
            self.become_leader(now);
        }
    }

    fn start_election(&mut self, now: Micros) {
        self.set_role(Role::Candidate);
        self.state.current_term = self.state.current_term.next();
        self.state.voted_for = Some(self.state.id);
        self.state.round.reset();
        self.state.leader_hint = None;
        self.state.leader = None;
        self.emit_role();
        self.reset_commit_state();
        let me = self.state.id;
        self.emit(TraceEvent::Vote {
            term: self.state.current_term,
            candidate: me,
        });
        self.votes.iter_mut().for_each(|v| *v = false);
        self.votes[me.index()] = true;
        self.reset_election_deadline(now);
        if self.cfg.majority() <= 1 {
            self.become_leader(now);
            return;
        }
        let req = RequestVoteMsg {
            term: self.state.current_term,
            candidate_id: me,
            last_log_index: self.state.log.last_index(),
            last_log_term: self.state.log.last_term(),
        };
        for p in self.peers() {
            self.send(p, Message::RequestVote(req.clone()));
        }
    }

    fn become_leader(&mut self, now: Micros) {
        self.set_role(Role::Leader);
        self.state.leader_hint = Some(self.state.id);
        let next = self.state.log.last_index() + 1;
        self.state.leader = Some(LeaderVolatile {
            next_index: vec![next; self.cfg.n],
            match_index: vec![0; self.cfg.n],
            last_round_start: now,
            origins: BTreeMap::new(),
        });
        self.emit_role();
        self.reset_commit_state();
        self.state.heartbeat_due = now;
        self.leader_heartbeat(now);
    }

    // ---- client path and timers -------------------------------------------

    pub fn handle_client_request(
        &mut self,
        command: Bytes,
        tag: ClientTag,
        now: Micros,
    ) -> ClientOutcome {
        match self.state.role {
            Role::Leader => {
                let entry = LogEntry::new(self.state.current_term, command);
                let index = self.append_local(entry);
                let lv = self.state.leader.as_mut().expect("leader state");
                lv.origins.insert(index, tag);
                let round_at = lv.last_round_start + self.cfg.round_period;
                match self.cfg.variant {
                    Variant::Baseline => {
                        self.broadcast_append_entries();
                        self.advance_commit_leader();
                    }
                    Variant::V1 => {
                        self.state.heartbeat_due = self.state.heartbeat_due.min(round_at.max(now));
                        self.advance_commit_leader();
                    }
                    Variant::V2 => {
                        self.state.heartbeat_due = self.state.heartbeat_due.min(round_at.max(now));
                        self.settle_commit_state();
                    }
                }
                ClientOutcome::Accepted(index)
            }
            Role::Follower => match self.state.leader_hint {
                Some(l) => ClientOutcome::Redirect(l),
                None => ClientOutcome::Unavailable,
            },
            Role::Candidate => ClientOutcome::Unavailable,
        }
    }

    /// Timer processing: elections for followers and candidates, heartbeats
    /// or gossip rounds for the leader.
    pub fn tick(&mut self, now: Micros) -> Vec<Envelope> {
        match self.state.role {
            Role::Follower | Role::Candidate => {
                if now >= self.state.election_deadline {
                    self.start_election(now);
                }
            }
            Role::Leader => {
                if now >= self.state.heartbeat_due {
                    self.leader_heartbeat(now);
                }
            }
        }
        self.take_outbox()
    }

    fn leader_heartbeat(&mut self, now: Micros) {
        match self.cfg.variant {
            Variant::Baseline => self.broadcast_append_entries(),
            Variant::V1 | Variant::V2 => {
                let round = self.leader_start_round(now);
                self.outbox.extend(round);
            }
        }
        let pending = self.state.commit_index < self.state.log.last_index();
        let period = if pending {
            self.cfg.round_period
        } else {
            self.cfg.idle_period
        };
        if let Some(lv) = self.state.leader.as_mut() {
            lv.last_round_start = now;
        }
        self.state.heartbeat_due = now + period;
    }

    /// Feeds newly committed entries to `applier` in index order. The leader
    /// queues client responses for the entries it originated.
    pub fn apply_committed(&mut self, applier: &mut dyn Applier) -> Result<usize, ApplyError> {
        let mut applied = 0;
        while self.state.last_applied < self.state.commit_index {
            let index = self.state.last_applied + 1;
            let entry = self.state.log.get(index).expect("committed entry present");
            applier.apply(index, entry)?;
            let ev = TraceEvent::Apply {
                index,
                term: entry.term,
                cmd: Digest::of(entry),
            };
            self.state.last_applied = index;
            self.emit(ev);
            if let Some(tag) = self
                .state
                .leader
                .as_mut()
                .and_then(|lv| lv.origins.remove(&index))
            {
                self.responses.push(ClientResponse { tag, index });
            }
            applied += 1;
        }
        Ok(applied)
    }
}

#[cfg(test)]
mod tests;
