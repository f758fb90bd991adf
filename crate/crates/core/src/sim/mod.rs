//! Deterministic discrete-event simulation of a replica cluster.
//!
//! One event queue ordered by `(time, sequence)` drives every replica,
//! link and client. Each replica is a single CPU with a FIFO inbox: an
//! input occupies it for `cost × unit_us` microseconds, where the cost is
//! the sum of the configured per-kind weights of the message received and
//! the messages sent, plus a per-entry charge for log appends. Messages
//! leave when processing finishes.

pub mod network;
pub mod workload;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{LagSample, MetricsReport, NodeMetrics};
use crate::raft::{
    ClientOutcome, ClientTag, DurableImage, HistoryApplier, Node, NodeConfig, NodeState, Role,
};
use crate::trace::{
    DropReason, FaultAction, Micros, MsgSummary, Trace, TraceEvent, TraceHeader, TraceRecord,
    TraceSink,
};
use crate::types::{LogIndex, Message, MessageKind, ProcessId, Term, validate_append_entries};

pub use network::{LatencyModel, LinkStats, Network, NetworkError, Topology, TopologySpec};
pub use workload::{Client, WorkloadConfig};

/// How much of the run is written to the trace.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceLevel {
    Off,
    /// Replica state changes, faults and client events.
    #[default]
    State,
    /// Plus one line per send, delivery and drop.
    Messages,
    /// Plus full message bodies on send lines.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KindWeights {
    pub append_entries: f64,
    pub append_entries_reply: f64,
    pub request_vote: f64,
    pub request_vote_reply: f64,
    pub client_request: f64,
    pub client_response: f64,
}

impl Default for KindWeights {
    fn default() -> Self {
        KindWeights {
            append_entries: 1.0,
            append_entries_reply: 1.0,
            request_vote: 1.0,
            request_vote_reply: 1.0,
            client_request: 1.0,
            client_response: 1.0,
        }
    }
}

impl KindWeights {
    pub fn get(&self, kind: MessageKind) -> f64 {
        match kind {
            MessageKind::AppendEntries => self.append_entries,
            MessageKind::AppendEntriesReply => self.append_entries_reply,
            MessageKind::RequestVote => self.request_vote,
            MessageKind::RequestVoteReply => self.request_vote_reply,
            MessageKind::ClientRequest => self.client_request,
            MessageKind::ClientResponse => self.client_response,
        }
    }
}

/// CPU proxy: cost units per message handled and per entry appended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub receive: KindWeights,
    pub send: KindWeights,
    pub per_entry: f64,
    /// Simulated processing time of one cost unit; 0 makes processing
    /// instantaneous.
    pub unit_us: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            receive: KindWeights::default(),
            send: KindWeights::default(),
            per_entry: 0.1,
            unit_us: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduledFault {
    pub at_us: Micros,
    #[serde(flatten)]
    pub action: FaultAction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub node: NodeConfig,
    pub seed: u64,
    pub duration_us: Micros,
    pub topology: Topology,
    pub latency: LatencyModel,
    pub loss: f64,
    pub fifo: bool,
    pub cost: CostModel,
    pub workload: WorkloadConfig,
    pub faults: Vec<ScheduledFault>,
    /// Replica that times out first so the run starts with a known leader.
    pub initial_leader: Option<ProcessId>,
    pub trace: TraceLevel,
}

impl SimConfig {
    /// Defaults: full mesh, 1–5 ms triangular latency, no loss, timers
    /// derived from the mean latency.
    pub fn new(n: usize, variant: crate::types::Variant, seed: u64) -> SimConfig {
        let latency = LatencyModel::default();
        let mut node = NodeConfig::new(n, variant);
        let t = (10.0 * latency.mean_us()).round() as Micros;
        node.election_timeout = t;
        node.round_period = t / 5;
        node.idle_period = t / 5;
        SimConfig {
            node,
            seed,
            duration_us: 1_000_000,
            topology: Topology::full(n),
            latency,
            loss: 0.0,
            fifo: true,
            cost: CostModel::default(),
            workload: WorkloadConfig::default(),
            faults: Vec::new(),
            initial_leader: None,
            trace: TraceLevel::State,
        }
    }

    pub fn n(&self) -> usize {
        self.node.n
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("invalid simulation setup: {0}")]
    Config(String),
    #[error("event queue ran dry at {at}us with {pending} client requests outstanding")]
    Stalled { at: Micros, pending: usize },
}

/// Deterministic sub-seed for one named stream.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
enum Input {
    Msg { from: ProcessId, msg: Message },
    Client { client: u32, seq: u64, attempt: u32 },
    Tick,
}

#[derive(Clone, Copy, Debug)]
enum Answer {
    Done,
    Redirect(ProcessId),
    Unavailable,
}

#[derive(Clone, Debug)]
enum Event {
    Deliver { from: ProcessId, to: ProcessId, msg: Message },
    Wake { node: usize, incarnation: u64 },
    Tick { node: usize, incarnation: u64, at: Micros },
    ClientIssue { client: u32 },
    ClientArrive { node: ProcessId, client: u32, seq: u64, attempt: u32 },
    ClientAnswer { client: u32, seq: u64, attempt: u32, answer: Answer },
    ClientTimeout { client: u32, seq: u64, attempt: u32 },
    Fault { index: usize },
}

struct Scheduled {
    time: Micros,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

struct Slot {
    node: Option<Node>,
    image: Option<DurableImage>,
    incarnation: u64,
    inbox: VecDeque<Input>,
    busy_until: Micros,
    wake_pending: bool,
    tick_at: Option<Micros>,
    applier: HistoryApplier,
    leader_since: Option<Micros>,
}

/// Message accounting over the whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Conservation {
    pub totals: LinkStats,
    /// Scheduled deliveries still queued, or delivered but not yet processed.
    pub in_flight: u64,
}

impl Conservation {
    /// `sent = unreachable + lost + scheduled` and
    /// `scheduled = delivered + dropped + in_flight`.
    pub fn balanced(&self) -> bool {
        let t = self.totals;
        t.sent == t.unreachable + t.lost + t.scheduled
            && t.scheduled == t.delivered + t.dropped + self.in_flight
    }
}

pub struct SimOutput {
    pub trace: Option<Trace>,
    pub metrics: MetricsReport,
    pub conservation: Conservation,
    /// Final state of each replica; `None` for replicas down at the end.
    pub final_states: Vec<Option<NodeState>>,
    pub histories: Vec<HistoryApplier>,
}

pub struct Simulation {
    cfg: SimConfig,
    now: Micros,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    slots: Vec<Slot>,
    network: Network,
    client_rng: ChaCha8Rng,
    clients: Vec<Client>,
    trace: Option<Trace>,
    sink: Option<Box<dyn TraceSink>>,
    // metrics
    node_metrics: Vec<NodeMetrics>,
    latencies: Vec<Micros>,
    retries: u64,
    receipts: BTreeMap<(LogIndex, Term), (Micros, ProcessId)>,
    lag_high: Vec<LogIndex>,
    lag: Vec<LagSample>,
    elections: u64,
    first_leader_term: Option<Term>,
    max_term: Term,
    committed: LogIndex,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Simulation, SimError> {
        let n = cfg.n();
        if n == 0 {
            return Err(SimError::Config("cluster needs at least one replica".into()));
        }
        if cfg.topology.n() != n {
            return Err(SimError::Config(format!(
                "topology has {} replicas, cluster has {n}",
                cfg.topology.n()
            )));
        }
        if cfg.node.variant.uses_gossip() && n >= 2 && !(1..n).contains(&cfg.node.fanout) {
            return Err(SimError::Config(format!(
                "fanout {} outside 1..={}",
                cfg.node.fanout,
                n - 1
            )));
        }
        if let Some(l) = cfg.initial_leader {
            if l.index() >= n {
                return Err(SimError::Config(format!("initial leader {l} outside cluster")));
            }
        }
        let network = Network::new(
            cfg.topology.clone(),
            cfg.latency,
            cfg.loss,
            cfg.fifo,
            derive_seed(cfg.seed, 1, 0),
        )?;
        let trace = (cfg.trace != TraceLevel::Off)
            .then(|| Trace::new(TraceHeader::new(n, cfg.node.variant, cfg.seed)));
        let mut sim = Simulation {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            slots: Vec::with_capacity(n),
            network,
            client_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, 0)),
            clients: Vec::new(),
            trace,
            sink: None,
            node_metrics: (0..n).map(|i| NodeMetrics::new(ProcessId::from(i))).collect(),
            latencies: Vec::new(),
            retries: 0,
            receipts: BTreeMap::new(),
            lag_high: vec![0; n],
            lag: Vec::new(),
            elections: 0,
            first_leader_term: None,
            max_term: Term::ZERO,
            committed: 0,
            cfg,
        };
        for i in 0..n {
            let mut node = Node::new(
                ProcessId::from(i),
                sim.cfg.node.clone(),
                derive_seed(sim.cfg.seed, 3, i as u64),
                0,
            );
            if sim.cfg.initial_leader == Some(ProcessId::from(i)) {
                node.set_election_deadline(0);
            }
            sim.slots.push(Slot {
                node: Some(node),
                image: None,
                incarnation: 0,
                inbox: VecDeque::new(),
                busy_until: 0,
                wake_pending: false,
                tick_at: None,
                applier: HistoryApplier::default(),
                leader_since: None,
            });
            sim.reschedule_tick(i);
        }
        for c in 0..sim.cfg.workload.clients {
            let target = ProcessId::from(sim.client_rng.random_range(0..n));
            sim.clients.push(Client::new(c as u32, target));
            let start = sim.cfg.workload.start_us;
            sim.push(start, Event::ClientIssue { client: c as u32 });
        }
        for (index, f) in sim.cfg.faults.iter().enumerate() {
            let at = f.at_us;
            sim.seq += 1;
            sim.queue.push(Scheduled {
                time: at,
                seq: sim.seq,
                event: Event::Fault { index },
            });
        }
        Ok(sim)
    }

    fn push(&mut self, time: Micros, event: Event) {
        self.seq += 1;
        self.queue.push(Scheduled {
            time,
            seq: self.seq,
            event,
        });
    }

    fn record(&mut self, level: TraceLevel, time: Micros, node: Option<ProcessId>, event: TraceEvent) {
        if self.cfg.trace < level {
            return;
        }
        let rec = TraceRecord { time, node, event };
        if let Some(s) = self.sink.as_mut() {
            s.record(&rec);
        }
        if let Some(t) = self.trace.as_mut() {
            t.records.push(rec);
        }
    }

    /// Runs until `duration_us` and collects the results; the trace is kept
    /// in memory unless the level is `Off`.
    pub fn run(mut self) -> Result<SimOutput, SimError> {
        self.run_loop()?;
        Ok(self.finish())
    }

    /// Like [`Simulation::run`] but streams the trace into `sink` instead of
    /// keeping it; `SimOutput::trace` is `None`.
    pub fn run_with<S: TraceSink>(mut self, mut sink: S) -> Result<(SimOutput, S), SimError> {
        let header = TraceHeader::new(self.cfg.n(), self.cfg.node.variant, self.cfg.seed);
        sink.begin(&header);
        self.trace = None;
        self.sink = Some(Box::new(sink));
        self.run_loop()?;
        let sink: Box<dyn std::any::Any> = self.sink.take().expect("sink installed");
        let sink = *sink.downcast::<S>().expect("sink type unchanged");
        Ok((self.finish(), sink))
    }

    fn run_loop(&mut self) -> Result<(), SimError> {
        let until = self.cfg.duration_us;
        while let Some(top) = self.queue.peek() {
            if top.time > until {
                break;
            }
            let s = self.queue.pop().expect("peeked");
            debug_assert!(s.time >= self.now, "clock went backwards");
            self.now = s.time;
            self.dispatch(s.event)?;
        }
        if self.queue.is_empty() {
            let pending = self.clients.iter().filter(|c| c.pending.is_some()).count();
            if pending > 0 {
                return Err(SimError::Stalled {
                    at: self.now,
                    pending,
                });
            }
        }
        self.now = until;
        Ok(())
    }

    fn dispatch(&mut self, event: Event) -> Result<(), SimError> {
        match event {
            Event::Deliver { from, to, msg } => self.on_deliver(from, to, msg),
            Event::Wake { node, incarnation } => {
                if self.slots[node].incarnation == incarnation && self.slots[node].node.is_some() {
                    self.slots[node].wake_pending = false;
                    self.process_next(node);
                }
            }
            Event::Tick {
                node,
                incarnation,
                at,
            } => self.on_tick(node, incarnation, at),
            Event::ClientIssue { client } => self.client_issue(client),
            Event::ClientArrive {
                node,
                client,
                seq,
                attempt,
            } => {
                if self.slots[node.index()].node.is_some() {
                    self.enqueue(node.index(), Input::Client {
                        client,
                        seq,
                        attempt,
                    });
                }
            }
            Event::ClientAnswer {
                client,
                seq,
                attempt,
                answer,
            } => self.client_answer(client, seq, attempt, answer),
            Event::ClientTimeout {
                client,
                seq,
                attempt,
            } => {
                if self.clients[client as usize].is_current(seq, attempt) {
                    self.client_retry(client, None, 0);
                }
            }
            Event::Fault { index } => {
                let action = self.cfg.faults[index].action.clone();
                self.apply_fault(action)?;
            }
        }
        Ok(())
    }

    // ---- replicas ---------------------------------------------------------

    fn on_deliver(&mut self, from: ProcessId, to: ProcessId, msg: Message) {
        let i = to.index();
        if self.slots[i].node.is_none() {
            self.network.mark_dropped(from.index(), i);
            self.record(TraceLevel::Messages, self.now, Some(to), TraceEvent::Drop {
                from,
                reason: DropReason::Crashed,
            });
            return;
        }
        if let Message::AppendEntries(m) = &msg {
            if validate_append_entries(m, self.cfg.n(), self.cfg.node.variant).is_err() {
                self.network.mark_dropped(from.index(), i);
                self.record(TraceLevel::Messages, self.now, Some(to), TraceEvent::Drop {
                    from,
                    reason: DropReason::Invalid,
                });
                return;
            }
        }
        self.enqueue(i, Input::Msg { from, msg });
    }

    fn enqueue(&mut self, i: usize, input: Input) {
        let slot = &mut self.slots[i];
        slot.inbox.push_back(input);
        if !slot.wake_pending {
            slot.wake_pending = true;
            let at = self.now.max(slot.busy_until);
            let incarnation = slot.incarnation;
            self.push(at, Event::Wake { node: i, incarnation });
        }
    }

    fn on_tick(&mut self, i: usize, incarnation: u64, at: Micros) {
        let slot = &mut self.slots[i];
        if slot.incarnation != incarnation || slot.tick_at != Some(at) {
            return;
        }
        let Some(node) = slot.node.as_ref() else {
            return;
        };
        slot.tick_at = None;
        if node.next_wakeup() <= self.now {
            self.enqueue(i, Input::Tick);
        } else {
            self.reschedule_tick(i);
        }
    }

    /// Makes sure a tick is pending no later than the replica's next wakeup.
    fn reschedule_tick(&mut self, i: usize) {
        let slot = &mut self.slots[i];
        let Some(node) = slot.node.as_ref() else {
            return;
        };
        let want = node.next_wakeup().max(self.now);
        if slot.tick_at.is_none_or(|t| want < t) {
            slot.tick_at = Some(want);
            let incarnation = slot.incarnation;
            self.push(want, Event::Tick {
                node: i,
                incarnation,
                at: want,
            });
        }
    }

    fn process_next(&mut self, i: usize) {
        let Some(input) = self.slots[i].inbox.pop_front() else {
            return;
        };
        let start = self.now.max(self.slots[i].busy_until);
        let pid = ProcessId::from(i);
        let cost_model = self.cfg.cost.clone();
        let mut cost = 0.0;
        let mut answers: Vec<(u32, u64, u32, Answer)> = Vec::new();

        let node = self.slots[i].node.as_mut().expect("live replica");
        let was_leader = node.is_leader();
        let outbox = match input {
            Input::Msg { from, msg } => {
                let kind = msg.kind();
                cost += cost_model.receive.get(kind);
                self.node_metrics[i].received[kind.slot()] += 1;
                self.network.mark_delivered(from.index(), i);
                let summary = (self.cfg.trace >= TraceLevel::Messages).then(|| MsgSummary::of(&msg));
                let out = node.step(from, msg, start);
                if let Some(msg) = summary {
                    self.record(TraceLevel::Messages, start, Some(pid), TraceEvent::Deliver { from, msg });
                }
                out
            }
            Input::Client {
                client,
                seq,
                attempt,
            } => {
                cost += cost_model.receive.get(MessageKind::ClientRequest);
                self.node_metrics[i].received[MessageKind::ClientRequest.slot()] += 1;
                let command = client_command(client, seq, self.cfg.workload.command_size);
                let tag = ClientTag { client, seq };
                let outcome = node.handle_client_request(command, tag, start);
                let term = node.state().current_term;
                let accepted = match outcome {
                    ClientOutcome::Accepted(index) => {
                        self.receipts.insert((index, term), (start, pid));
                        Some(index)
                    }
                    ClientOutcome::Redirect(p) => {
                        answers.push((client, seq, attempt, Answer::Redirect(p)));
                        None
                    }
                    ClientOutcome::Unavailable => {
                        answers.push((client, seq, attempt, Answer::Unavailable));
                        None
                    }
                };
                self.record(TraceLevel::Messages, start, Some(pid), TraceEvent::ClientRequest {
                    client,
                    seq,
                    accepted,
                });
                self.slots[i].node.as_mut().expect("live").take_outbox()
            }
            Input::Tick => node.tick(start),
        };

        let slot = &mut self.slots[i];
        let applied = slot
            .node
            .as_mut()
            .expect("live replica")
            .apply_committed(&mut slot.applier);
        let node = self.slots[i].node.as_mut().expect("live replica");
        for r in node.take_responses() {
            answers.push((r.tag.client, r.tag.seq, u32::MAX, Answer::Done));
            self.record(TraceLevel::Messages, start, Some(pid), TraceEvent::ClientResponse {
                client: r.tag.client,
                seq: r.tag.seq,
                index: r.index,
            });
        }
        let node = self.slots[i].node.as_mut().expect("live replica");
        let appended = node.take_entries_appended();
        let events = node.take_events();
        let is_leader = node.is_leader();
        self.node_metrics[i].entries_appended += appended;
        cost += cost_model.per_entry * appended as f64;
        for env in &outbox {
            let kind = env.msg.kind();
            cost += cost_model.send.get(kind);
            self.node_metrics[i].sent[kind.slot()] += 1;
        }
        for _ in &answers {
            cost += cost_model.send.get(MessageKind::ClientResponse);
            self.node_metrics[i].sent[MessageKind::ClientResponse.slot()] += 1;
        }
        let duration = (cost * cost_model.unit_us).round() as Micros;
        let finish = start + duration;
        self.node_metrics[i].cost += cost;
        self.node_metrics[i].busy_us += duration;
        self.slots[i].busy_until = finish;

        for ev in events {
            self.observe(i, start, &ev);
            self.record(TraceLevel::State, start, Some(pid), ev);
        }
        match (was_leader, is_leader) {
            (false, true) => self.slots[i].leader_since = Some(start),
            (true, false) => self.end_leadership(i, start),
            _ => {}
        }

        for env in outbox {
            let (outcome, at) = self.network.transmit(i, env.to.index(), finish);
            if self.cfg.trace >= TraceLevel::Messages {
                let full = (self.cfg.trace >= TraceLevel::Full).then(|| env.msg.clone());
                let msg = MsgSummary::of(&env.msg);
                self.record(TraceLevel::Messages, start, Some(pid), TraceEvent::Send {
                    to: env.to,
                    outcome,
                    msg,
                    full,
                });
            }
            if let Some(at) = at {
                self.push(at, Event::Deliver {
                    from: pid,
                    to: env.to,
                    msg: env.msg,
                });
            }
        }
        for (client, seq, attempt, answer) in answers {
            let at = finish + self.network.sample_latency_client(&mut self.client_rng);
            self.push(at, Event::ClientAnswer {
                client,
                seq,
                attempt,
                answer,
            });
        }

        if applied.is_err() {
            // A failing state machine halts the replica.
            self.crash(i);
            return;
        }
        if !self.slots[i].inbox.is_empty() && !self.slots[i].wake_pending {
            self.slots[i].wake_pending = true;
            let incarnation = self.slots[i].incarnation;
            self.push(finish, Event::Wake { node: i, incarnation });
        }
        self.reschedule_tick(i);
    }

    fn end_leadership(&mut self, i: usize, at: Micros) {
        if let Some(since) = self.slots[i].leader_since.take() {
            self.node_metrics[i].leader_us += at.saturating_sub(since);
        }
    }

    /// Metric side effects of one replica event.
    fn observe(&mut self, i: usize, time: Micros, ev: &TraceEvent) {
        match ev {
            TraceEvent::Role { role, term } => {
                self.max_term = self.max_term.max(*term);
                if *role == Role::Leader {
                    self.elections += 1;
                    self.first_leader_term.get_or_insert(*term);
                }
            }
            TraceEvent::Commit { commit_index } => {
                let ci = *commit_index;
                self.committed = self.committed.max(ci);
                self.node_metrics[i].final_commit = ci;
                let node = self.slots[i].node.as_ref().expect("live replica");
                for k in self.lag_high[i] + 1..=ci {
                    let Some(term) = node.state().log.term_at(k) else {
                        continue;
                    };
                    if let Some((receipt, origin)) = self.receipts.get(&(k, term)) {
                        self.lag.push(LagSample {
                            node: ProcessId::from(i),
                            index: k,
                            term,
                            receipt: *receipt,
                            commit: time,
                            origin: origin.index() == i,
                        });
                    }
                }
                self.lag_high[i] = self.lag_high[i].max(ci);
            }
            _ => {}
        }
    }

    // ---- faults -----------------------------------------------------------

    fn apply_fault(&mut self, action: FaultAction) -> Result<(), SimError> {
        self.record(TraceLevel::State, self.now, None, TraceEvent::Fault {
            action: action.clone(),
        });
        let n = self.cfg.n();
        let check = |p: ProcessId| {
            if p.index() < n {
                Ok(p.index())
            } else {
                Err(SimError::Config(format!("fault names replica {p} outside cluster")))
            }
        };
        match action {
            FaultAction::Crash { node } => self.crash(check(node)?),
            FaultAction::Recover { node } => self.recover(check(node)?),
            FaultAction::CrashLeader => {
                let leader = (0..n)
                    .filter_map(|i| {
                        let node = self.slots[i].node.as_ref()?;
                        node.is_leader().then(|| (node.state().current_term, i))
                    })
                    .max();
                if let Some((_, i)) = leader {
                    self.crash(i);
                }
            }
            FaultAction::RecoverAll => (0..n).for_each(|i| self.recover(i)),
            FaultAction::Partition { groups } => self.network.partition(&groups),
            FaultAction::Heal => self.network.heal(),
            FaultAction::SetLoss { from, to, p } => {
                self.network.set_loss(check(from)?, check(to)?, p)?
            }
            FaultAction::SetLossAll { p } => self.network.set_loss_all(p)?,
            FaultAction::SetTopology { topology } => {
                let t = topology.build(n)?;
                self.network.set_topology(t)?
            }
        }
        Ok(())
    }

    /// Discards volatile state, queued inputs and pending timers.
    pub(crate) fn crash(&mut self, i: usize) {
        let Some(node) = self.slots[i].node.take() else {
            return;
        };
        self.end_leadership(i, self.now);
        let slot = &mut self.slots[i];
        slot.image = Some(node.durable_image());
        slot.incarnation += 1;
        slot.wake_pending = false;
        slot.tick_at = None;
        slot.busy_until = self.now;
        slot.applier = HistoryApplier::default();
        let queued: Vec<Input> = slot.inbox.drain(..).collect();
        let pid = ProcessId::from(i);
        for input in queued {
            if let Input::Msg { from, .. } = input {
                self.network.mark_dropped(from.index(), i);
                self.record(TraceLevel::Messages, self.now, Some(pid), TraceEvent::Drop {
                    from,
                    reason: DropReason::Crashed,
                });
            }
        }
        self.record(TraceLevel::State, self.now, Some(pid), TraceEvent::Crash);
    }

    /// Restarts a crashed replica from its durable image as a follower.
    pub(crate) fn recover(&mut self, i: usize) {
        if self.slots[i].node.is_some() {
            return;
        }
        let image = self.slots[i].image.take().expect("crashed replica has an image");
        let seed = derive_seed(self.cfg.seed, 3, i as u64 ^ (self.slots[i].incarnation << 32));
        let node = Node::restore(ProcessId::from(i), self.cfg.node.clone(), image, seed, self.now);
        let term = node.state().current_term;
        self.slots[i].node = Some(node);
        self.slots[i].busy_until = self.now;
        self.node_metrics[i].final_commit = 0;
        let pid = Some(ProcessId::from(i));
        self.record(TraceLevel::State, self.now, pid, TraceEvent::Recover);
        self.record(TraceLevel::State, self.now, pid, TraceEvent::Role {
            role: Role::Follower,
            term,
        });
        self.reschedule_tick(i);
    }

    // ---- clients ----------------------------------------------------------

    fn client_issue(&mut self, c: u32) {
        let now = self.now;
        let client = &mut self.clients[c as usize];
        if client.pending.is_some() {
            return;
        }
        let seq = client.issue(now);
        let target = client.target;
        self.client_send(c, target, seq, 0, now);
    }

    fn client_send(&mut self, c: u32, target: ProcessId, seq: u64, attempt: u32, at: Micros) {
        let lat = self.network.sample_latency_client(&mut self.client_rng);
        self.push(at + lat, Event::ClientArrive {
            node: target,
            client: c,
            seq,
            attempt,
        });
        let timeout = self.cfg.workload.request_timeout_us;
        self.push(at + timeout, Event::ClientTimeout {
            client: c,
            seq,
            attempt,
        });
    }

    /// Retries the pending request at `target`, or at a random replica.
    fn client_retry(&mut self, c: u32, target: Option<ProcessId>, delay: Micros) {
        let max = self.cfg.workload.max_retries;
        let n = self.cfg.n();
        self.retries += 1;
        let Some(p) = self.clients[c as usize].retry(max) else {
            self.schedule_next_issue(c);
            return;
        };
        let target = target.unwrap_or_else(|| ProcessId::from(self.client_rng.random_range(0..n)));
        self.clients[c as usize].target = target;
        let at = self.now + delay;
        self.client_send(c, target, p.seq, p.attempt, at);
    }

    fn client_answer(&mut self, c: u32, seq: u64, attempt: u32, answer: Answer) {
        let now = self.now;
        match answer {
            Answer::Done => {
                if let Some(lat) = self.clients[c as usize].complete(seq, now) {
                    self.latencies.push(lat);
                    self.schedule_next_issue(c);
                }
            }
            Answer::Redirect(p) => {
                if self.clients[c as usize].is_current(seq, attempt) {
                    self.client_retry(c, Some(p), 0);
                }
            }
            Answer::Unavailable => {
                if self.clients[c as usize].is_current(seq, attempt) {
                    let backoff = self.cfg.workload.retry_backoff_us;
                    self.client_retry(c, None, backoff);
                }
            }
        }
    }

    fn schedule_next_issue(&mut self, c: u32) {
        let pacing = self.cfg.workload.pacing_us();
        let at = self.clients[c as usize].next_issue_at(self.now, pacing);
        self.push(at, Event::ClientIssue { client: c });
    }

    // ---- results ----------------------------------------------------------

    fn finish(mut self) -> SimOutput {
        let n = self.cfg.n();
        let now = self.now;
        for i in 0..n {
            self.end_leadership(i, now);
        }
        let mut in_flight = self
            .queue
            .iter()
            .filter(|s| matches!(s.event, Event::Deliver { .. }))
            .count() as u64;
        for slot in &self.slots {
            in_flight += slot
                .inbox
                .iter()
                .filter(|i| matches!(i, Input::Msg { .. }))
                .count() as u64;
        }
        let conservation = Conservation {
            totals: self.network.totals(),
            in_flight,
        };
        let completed = self.clients.iter().map(|c| c.completed).sum();
        let failed = self.clients.iter().map(|c| c.failed).sum();
        let window_us = if self.cfg.workload.clients > 0 {
            self.cfg.duration_us.saturating_sub(self.cfg.workload.start_us)
        } else {
            0
        };
        let metrics = MetricsReport {
            variant: self.cfg.node.variant,
            n,
            seed: self.cfg.seed,
            duration_us: self.cfg.duration_us,
            window_us,
            completed,
            failed,
            retries: self.retries,
            latencies_us: self.latencies,
            nodes: self.node_metrics,
            commit_lag: self.lag,
            elections: self.elections,
            first_leader_term: self.first_leader_term,
            max_term: self.max_term,
            committed: self.committed,
            messages: conservation.totals,
            offered_rate: self.cfg.workload.rate.filter(|_| self.cfg.workload.clients > 0),
        };
        let final_states = self
            .slots
            .iter()
            .map(|s| s.node.as_ref().map(|n| n.state().clone()))
            .collect();
        let histories = self.slots.into_iter().map(|s| s.applier).collect();
        SimOutput {
            trace: self.trace,
            metrics,
            conservation,
            final_states,
            histories,
        }
    }
}

fn client_command(client: u32, seq: u64, size: usize) -> Bytes {
    let mut v = Vec::with_capacity(size.max(12));
    v.extend_from_slice(&client.to_le_bytes());
    v.extend_from_slice(&seq.to_le_bytes());
    v.resize(size.max(12), 0);
    Bytes::from(v)
}

/// Convenience wrapper: build and run.
pub fn simulate(cfg: SimConfig) -> Result<SimOutput, SimError> {
    Simulation::new(cfg)?.run()
}

/// Build and run, streaming the trace into `sink`.
pub fn simulate_with<S: TraceSink>(cfg: SimConfig, sink: S) -> Result<(SimOutput, S), SimError> {
    Simulation::new(cfg)?.run_with(sink)
}
