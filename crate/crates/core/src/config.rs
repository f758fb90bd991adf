//! Experiment files: a TOML description of a run matrix (variants ×
//! cluster sizes × offered rates × seeds × repeats) plus the shared
//! network, cost, workload and fault settings. Times are in milliseconds.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{CostModel, LatencyModel, ScheduledFault, SimConfig, TopologySpec, TraceLevel};
use crate::trace::{FaultAction, Micros};
use crate::types::{ProcessId, Variant};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("unknown preset `{0}`; `epiraft presets` lists them")]
    UnknownPreset(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub description: String,
    pub variants: Vec<Variant>,
    /// Cluster sizes.
    pub n: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Runs per (variant, n, rate, seed); repeat `r > 0` derives its seed.
    pub repeats: u32,
    pub duration_ms: f64,
    /// Replica that times out first, giving every run the same leader.
    pub initial_leader: Option<u32>,
    /// Trace detail written to `traces/` in the output directory.
    pub trace: TraceLevel,
    /// Run the safety checker over every run.
    pub check: bool,
    pub node: NodeSection,
    pub network: NetworkSection,
    pub cost: CostModel,
    pub workload: WorkloadSection,
    pub faults: Vec<FaultSpec>,
    pub fuzz: Option<FuzzSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "custom".into(),
            description: String::new(),
            variants: Variant::ALL.to_vec(),
            n: vec![5],
            seeds: vec![1],
            repeats: 1,
            duration_ms: 5_000.0,
            initial_leader: None,
            trace: TraceLevel::Off,
            check: true,
            node: NodeSection::default(),
            network: NetworkSection::default(),
            cost: CostModel::default(),
            workload: WorkloadSection::default(),
            faults: Vec::new(),
            fuzz: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NodeSection {
    /// Peers contacted per gossip round, capped at n - 1.
    pub fanout: usize,
    /// Lower bound T of the election timeout; 10 × mean latency when absent.
    pub election_timeout_ms: Option<f64>,
    /// Round period while entries are uncommitted; T / 5 when absent.
    pub round_period_ms: Option<f64>,
    /// Heartbeat period once everything is committed; T / 5 when absent.
    pub idle_heartbeat_period_ms: Option<f64>,
    pub gossip_relay: bool,
    /// Success replies to gossip rounds; on for v1, off for v2 when absent.
    pub gossip_success_replies: Option<bool>,
}

impl Default for NodeSection {
    fn default() -> Self {
        NodeSection {
            fanout: 3,
            election_timeout_ms: None,
            round_period_ms: None,
            idle_heartbeat_period_ms: None,
            gossip_relay: true,
            gossip_success_replies: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyMs {
    pub min: f64,
    pub mode: f64,
    pub max: f64,
}

impl LatencyMs {
    pub fn to_model(self) -> LatencyModel {
        LatencyModel {
            min_us: self.min * 1e3,
            mode_us: self.mode * 1e3,
            max_us: self.max * 1e3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub latency_ms: LatencyMs,
    /// Independent per-message loss probability.
    pub loss: f64,
    /// Per-link in-order delivery.
    pub fifo: bool,
    pub topology: TopologySpec,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            latency_ms: LatencyMs {
                min: 1.0,
                mode: 2.0,
                max: 5.0,
            },
            loss: 0.0,
            fifo: true,
            topology: TopologySpec::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSection {
    pub clients: usize,
    /// Aggregate offered rate in requests per second; unpaced when absent.
    pub rate: Option<f64>,
    /// Offered rates to sweep; overrides `rate` when non-empty.
    pub rates: Vec<f64>,
    pub command_size: usize,
    pub start_ms: f64,
    pub request_timeout_ms: f64,
    pub max_retries: u32,
    pub retry_backoff_ms: f64,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        WorkloadSection {
            clients: 10,
            rate: None,
            rates: Vec::new(),
            command_size: 64,
            start_ms: 200.0,
            request_timeout_ms: 2_000.0,
            max_retries: 10,
            retry_backoff_ms: 10.0,
        }
    }
}

impl WorkloadSection {
    /// Offered rates of the matrix; `[None]` for a single unswept setting.
    pub fn rate_points(&self) -> Vec<Option<f64>> {
        if self.rates.is_empty() {
            vec![self.rate]
        } else {
            self.rates.iter().map(|r| Some(*r)).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub at_ms: f64,
    #[serde(flatten)]
    pub action: FaultAction,
}

/// Random fault schedule drawn per run from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuzzSection {
    /// Message loss is drawn uniformly from [0, max_loss].
    pub max_loss: f64,
    /// Inclusive range of leader crashes, each followed by a recovery.
    pub leader_crashes: [u32; 2],
    pub downtime_ms: f64,
    /// Partitions into two random halves, each healed later.
    pub partitions: u32,
    pub partition_ms: f64,
    /// Faults stop this long before the end so the cluster can settle.
    pub settle_ms: f64,
}

impl Default for FuzzSection {
    fn default() -> Self {
        FuzzSection {
            max_loss: 0.2,
            leader_crashes: [1, 3],
            downtime_ms: 300.0,
            partitions: 1,
            partition_ms: 400.0,
            settle_ms: 500.0,
        }
    }
}

fn ms(v: f64) -> Micros {
    (v * 1e3).round() as Micros
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<ExperimentConfig, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            origin: origin.to_string(),
            message: e.to_string().trim_end().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        ExperimentConfig::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    /// Number of simulation runs in the matrix.
    pub fn run_count(&self) -> usize {
        self.variants.len()
            * self.n.len()
            * self.workload.rate_points().len()
            * self.seeds.len()
            * self.repeats as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.variants.is_empty() {
            return Err(invalid("variants", "at least one variant is required"));
        }
        if self.n.is_empty() || self.n.contains(&0) {
            return Err(invalid("n", "cluster sizes must be non-empty and positive"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        if self.repeats == 0 {
            return Err(invalid("repeats", "must be at least 1"));
        }
        if !(self.duration_ms > 0.0 && self.duration_ms.is_finite()) {
            return Err(invalid("duration_ms", "must be positive"));
        }
        if self.node.fanout == 0 {
            return Err(invalid("node.fanout", "must be at least 1"));
        }
        for (key, v) in [
            ("node.election_timeout_ms", self.node.election_timeout_ms),
            ("node.round_period_ms", self.node.round_period_ms),
            ("node.idle_heartbeat_period_ms", self.node.idle_heartbeat_period_ms),
        ] {
            if v.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
                return Err(invalid(key, "must be positive"));
            }
        }
        self.network
            .latency_ms
            .to_model()
            .validate()
            .map_err(|e| invalid("network.latency_ms", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.network.loss) {
            return Err(invalid("network.loss", "must lie in [0, 1]"));
        }
        let w = &self.workload;
        for r in w.rate.iter().chain(&w.rates) {
            if !(*r > 0.0 && r.is_finite()) {
                return Err(invalid("workload.rates", format!("rate {r} must be positive")));
            }
        }
        if w.request_timeout_ms <= 0.0 {
            return Err(invalid("workload.request_timeout_ms", "must be positive"));
        }
        if let Some(f) = &self.fuzz {
            if !(0.0..=1.0).contains(&f.max_loss) {
                return Err(invalid("fuzz.max_loss", "must lie in [0, 1]"));
            }
            if f.leader_crashes[0] > f.leader_crashes[1] {
                return Err(invalid("fuzz.leader_crashes", "expected [min, max] with min <= max"));
            }
            if f.settle_ms >= self.duration_ms {
                return Err(invalid("fuzz.settle_ms", "must be shorter than the run"));
            }
        }
        for (i, f) in self.faults.iter().enumerate() {
            if f.at_ms < 0.0 {
                return Err(invalid(format!("faults[{i}].at_ms"), "must not be negative"));
            }
        }
        for &n in &self.n {
            self.check_for_size(n)?;
        }
        Ok(())
    }

    fn check_for_size(&self, n: usize) -> Result<(), ConfigError> {
        let node_ok = |key: String, p: ProcessId| {
            if (p.0 as usize) < n {
                Ok(())
            } else {
                Err(invalid(key, format!("replica {} does not exist for n = {n}", p.0)))
            }
        };
        if let Some(l) = self.initial_leader {
            node_ok("initial_leader".into(), ProcessId(l))?;
        }
        self.network
            .topology
            .build(n)
            .map_err(|e| invalid("network.topology", format!("n = {n}: {e}")))?;
        for (i, f) in self.faults.iter().enumerate() {
            let key = format!("faults[{i}]");
            match &f.action {
                FaultAction::Crash { node } | FaultAction::Recover { node } => node_ok(key, *node)?,
                FaultAction::SetLoss { from, to, p } => {
                    node_ok(key.clone(), *from)?;
                    node_ok(key.clone(), *to)?;
                    if !(0.0..=1.0).contains(p) {
                        return Err(invalid(key, "loss must lie in [0, 1]"));
                    }
                }
                FaultAction::SetLossAll { p } if !(0.0..=1.0).contains(p) => {
                    return Err(invalid(key, "loss must lie in [0, 1]"));
                }
                FaultAction::Partition { groups } => {
                    for p in groups.iter().flatten() {
                        node_ok(key.clone(), *p)?;
                    }
                }
                FaultAction::SetTopology { topology } => {
                    topology.build(n).map_err(|e| invalid(key, format!("n = {n}: {e}")))?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Simulator settings for one cell of the matrix, fuzz faults excluded.
    pub fn sim_config(&self, variant: Variant, n: usize, rate: Option<f64>, seed: u64) -> SimConfig {
        let mut sim = SimConfig::new(n, variant, seed);
        sim.latency = self.network.latency_ms.to_model();
        let t = ms(self
            .node
            .election_timeout_ms
            .unwrap_or(10.0 * sim.latency.mean_us() / 1e3));
        let node = &mut sim.node;
        node.fanout = self.node.fanout.min(n.saturating_sub(1)).max(1);
        node.election_timeout = t;
        node.round_period = self.node.round_period_ms.map(ms).unwrap_or(t / 5);
        node.idle_period = self.node.idle_heartbeat_period_ms.map(ms).unwrap_or(t / 5);
        node.gossip_relay = self.node.gossip_relay;
        if let Some(r) = self.node.gossip_success_replies {
            node.gossip_success_replies = r;
        }
        sim.duration_us = ms(self.duration_ms);
        sim.topology = self.network.topology.build(n).expect("validated topology");
        sim.loss = self.network.loss;
        sim.fifo = self.network.fifo;
        sim.cost = self.cost.clone();
        let w = &self.workload;
        sim.workload = crate::sim::WorkloadConfig {
            clients: w.clients,
            rate,
            command_size: w.command_size,
            start_us: ms(w.start_ms),
            request_timeout_us: ms(w.request_timeout_ms),
            max_retries: w.max_retries,
            retry_backoff_us: ms(w.retry_backoff_ms),
        };
        sim.faults = self
            .faults
            .iter()
            .map(|f| ScheduledFault {
                at_us: ms(f.at_ms),
                action: f.action.clone(),
            })
            .collect();
        sim.initial_leader = self.initial_leader.map(ProcessId);
        sim.trace = self.trace;
        sim
    }
}

pub struct Preset {
    pub name: &'static str,
    pub text: &'static str,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "smoke",
        text: include_str!("../presets/smoke.toml"),
    },
    Preset {
        name: "throughput",
        text: include_str!("../presets/throughput.toml"),
    },
    Preset {
        name: "large-throughput",
        text: include_str!("../presets/large-throughput.toml"),
    },
    Preset {
        name: "cpu-vs-load",
        text: include_str!("../presets/cpu-vs-load.toml"),
    },
    Preset {
        name: "cpu-vs-replicas",
        text: include_str!("../presets/cpu-vs-replicas.toml"),
    },
    Preset {
        name: "commit-lag-cdf",
        text: include_str!("../presets/commit-lag-cdf.toml"),
    },
    Preset {
        name: "non-transitive",
        text: include_str!("../presets/non-transitive.toml"),
    },
    Preset {
        name: "safety-fuzz",
        text: include_str!("../presets/safety-fuzz.toml"),
    },
];

pub fn preset(name: &str) -> Result<ExperimentConfig, ConfigError> {
    let p = PRESETS
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))?;
    ExperimentConfig::from_toml(p.text, &format!("preset {name}"))
}

const KEYS: &[(&str, &str)] = &[
    ("name", "label written to every output row"),
    ("description", "free text shown by `presets`"),
    ("variants", "protocols to run: baseline, v1, v2"),
    ("n", "cluster sizes"),
    ("seeds", "master seeds; every random stream derives from them"),
    ("repeats", "runs per seed; repeat r > 0 derives its own seed"),
    ("duration_ms", "simulated time per run"),
    ("initial_leader", "replica that times out first (unset: random)"),
    ("trace", "trace files in <out>/traces: off, state, messages, full"),
    ("check", "run the safety checker over every run"),
    ("node.fanout", "peers contacted per gossip round, capped at n - 1"),
    ("node.election_timeout_ms", "lower bound T of the election timeout (unset: 10 x mean latency)"),
    ("node.round_period_ms", "leader round period with uncommitted entries (unset: T / 5)"),
    ("node.idle_heartbeat_period_ms", "leader heartbeat period when idle (unset: T / 5)"),
    ("node.gossip_relay", "followers forward fresh gossip rounds"),
    ("node.gossip_success_replies", "answer applied gossip rounds (unset: v1 yes, v2 no)"),
    ("network.latency_ms", "triangular one-hop delay {min, mode, max}"),
    ("network.loss", "independent per-message loss probability"),
    ("network.fifo", "in-order delivery per link"),
    ("network.topology", "{kind = full} | {kind = leader_limited, hub, reach} | {kind = matrix, rows}"),
    ("cost.receive.*", "cost units per received message, by kind"),
    ("cost.send.*", "cost units per sent message, by kind"),
    ("cost.per_entry", "cost units per appended log entry"),
    ("cost.unit_us", "simulated processing time of one cost unit"),
    ("workload.clients", "closed-loop clients, one outstanding request each"),
    ("workload.rate", "aggregate offered requests per second (unset: unpaced)"),
    ("workload.rates", "offered rates to sweep; overrides rate"),
    ("workload.command_size", "bytes per command"),
    ("workload.start_ms", "when clients start"),
    ("workload.request_timeout_ms", "retry an unanswered request after this long"),
    ("workload.max_retries", "retries before a request counts as failed"),
    ("workload.retry_backoff_ms", "wait after an `unavailable` answer"),
    ("faults", "[[faults]] at_ms = .., action = crash | recover | crash_leader | recover_all | partition | heal | set_loss | set_loss_all | set_topology"),
    ("fuzz.max_loss", "per-run loss drawn from [0, max_loss]"),
    ("fuzz.leader_crashes", "[min, max] leader crashes, each recovered after downtime_ms"),
    ("fuzz.downtime_ms", "time a crashed leader stays down"),
    ("fuzz.partitions", "random two-way partitions, each healed after partition_ms"),
    ("fuzz.partition_ms", "partition length"),
    ("fuzz.settle_ms", "fault-free tail of every run"),
];

/// Every key with its default and meaning.
pub fn describe() -> String {
    let mut defaults: toml::Table = toml::from_str(&ExperimentConfig::default().to_toml()).expect("round trip");
    defaults.insert(
        "fuzz".into(),
        toml::Value::try_from(FuzzSection::default()).expect("fuzz defaults"),
    );
    let lookup = |key: &str| -> String {
        let mut v: Option<&toml::Value> = None;
        for (i, part) in key.split('.').enumerate() {
            v = if i == 0 { defaults.get(part) } else { v.and_then(|v| v.get(part)) };
        }
        match v {
            Some(toml::Value::Array(a)) if a.is_empty() => "[]".into(),
            Some(v) if !v.is_table() => v.to_string(),
            _ => "-".into(),
        }
    };
    let mut out = String::from("Experiment file keys (TOML; times in ms)\n\n");
    for (key, doc) in KEYS {
        out.push_str(&format!("{key:<32} {:<22} {doc}\n", lookup(key)));
    }
    out
}
