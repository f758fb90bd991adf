//! Links between replicas: reachability, latency, loss and per-link counters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Triangular};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{Micros, SendOutcome};
use crate::types::ProcessId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("latency must satisfy min <= mode <= max, got ({min}, {mode}, {max})")]
    Latency { min: f64, mode: f64, max: f64 },
    #[error("loss probability {0} outside [0, 1]")]
    Loss(f64),
    #[error("reachability matrix must be {n}x{n}")]
    MatrixShape { n: usize },
    #[error("leader-limited topology needs 1 <= reach <= n-1 and hub < n (n={n}, hub={hub}, reach={reach})")]
    LeaderLimited { n: usize, hub: usize, reach: usize },
}

/// Directed reachability matrix. Need not be symmetric or transitive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    reachable: Vec<bool>,
}

impl Topology {
    pub fn full(n: usize) -> Topology {
        Topology {
            n,
            reachable: vec![true; n * n],
        }
    }

    /// `hub` reaches (both ways) only the `reach` replicas that follow it in
    /// id order; every other pair is connected.
    pub fn leader_limited(n: usize, hub: ProcessId, reach: usize) -> Result<Topology, NetworkError> {
        let h = hub.index();
        if h >= n || reach == 0 || reach >= n {
            return Err(NetworkError::LeaderLimited { n, hub: h, reach });
        }
        let mut t = Topology::full(n);
        let near: Vec<usize> = (1..=reach).map(|k| (h + k) % n).collect();
        for p in 0..n {
            if p != h && !near.contains(&p) {
                t.set(h, p, false);
                t.set(p, h, false);
            }
        }
        Ok(t)
    }

    pub fn from_matrix(rows: &[Vec<bool>]) -> Result<Topology, NetworkError> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(NetworkError::MatrixShape { n });
        }
        let mut t = Topology {
            n,
            reachable: rows.concat(),
        };
        for i in 0..n {
            t.set(i, i, true);
        }
        Ok(t)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn reachable(&self, from: usize, to: usize) -> bool {
        self.reachable[from * self.n + to]
    }

    pub fn set(&mut self, from: usize, to: usize, on: bool) {
        self.reachable[from * self.n + to] = on || from == to;
    }

    /// Whether every replica reaches every other one over some path.
    pub fn strongly_connected(&self) -> bool {
        (0..self.n).all(|s| {
            let mut seen = vec![false; self.n];
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(u) = stack.pop() {
                for (v, seen_v) in seen.iter_mut().enumerate() {
                    if !*seen_v && self.reachable(u, v) {
                        *seen_v = true;
                        stack.push(v);
                    }
                }
            }
            seen.iter().all(|x| *x)
        })
    }
}

/// Declarative topology, as written in configs and fault schedules.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySpec {
    #[default]
    Full,
    /// `hub` talks directly to `reach` followers only.
    LeaderLimited { hub: ProcessId, reach: usize },
    /// One row per replica, `1` where the row replica reaches the column one.
    Matrix { rows: Vec<String> },
}

impl TopologySpec {
    pub fn build(&self, n: usize) -> Result<Topology, NetworkError> {
        match self {
            TopologySpec::Full => Ok(Topology::full(n)),
            TopologySpec::LeaderLimited { hub, reach } => Topology::leader_limited(n, *hub, *reach),
            TopologySpec::Matrix { rows } => {
                let parsed: Vec<Vec<bool>> = rows
                    .iter()
                    .map(|r| r.chars().filter(|c| !c.is_whitespace()).map(|c| c == '1').collect())
                    .collect();
                if parsed.len() != n {
                    return Err(NetworkError::MatrixShape { n });
                }
                Topology::from_matrix(&parsed)
            }
        }
    }
}

/// Triangular one-hop delay in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    pub min_us: f64,
    pub mode_us: f64,
    pub max_us: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            min_us: 1_000.0,
            mode_us: 2_000.0,
            max_us: 5_000.0,
        }
    }
}

impl LatencyModel {
    pub fn fixed(us: f64) -> LatencyModel {
        LatencyModel {
            min_us: us,
            mode_us: us,
            max_us: us,
        }
    }

    pub fn mean_us(&self) -> f64 {
        (self.min_us + self.mode_us + self.max_us) / 3.0
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let ok = self.min_us >= 0.0
            && self.min_us <= self.mode_us
            && self.mode_us <= self.max_us
            && self.max_us.is_finite();
        if ok {
            Ok(())
        } else {
            Err(NetworkError::Latency {
                min: self.min_us,
                mode: self.mode_us,
                max: self.max_us,
            })
        }
    }

    fn sampler(&self) -> Option<Triangular<f64>> {
        (self.max_us > self.min_us)
            .then(|| Triangular::new(self.min_us, self.max_us, self.mode_us).expect("validated"))
    }
}

/// Per directed link message accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub sent: u64,
    pub scheduled: u64,
    pub unreachable: u64,
    pub lost: u64,
    pub delivered: u64,
    pub dropped: u64,
}

pub struct Network {
    n: usize,
    base: Topology,
    groups: Option<Vec<usize>>,
    loss: Vec<f64>,
    latency: LatencyModel,
    sampler: Option<Triangular<f64>>,
    fifo: bool,
    last_delivery: Vec<Micros>,
    rng: ChaCha8Rng,
    stats: Vec<LinkStats>,
}

impl Network {
    pub fn new(
        topology: Topology,
        latency: LatencyModel,
        loss: f64,
        fifo: bool,
        seed: u64,
    ) -> Result<Network, NetworkError> {
        latency.validate()?;
        if !(0.0..=1.0).contains(&loss) {
            return Err(NetworkError::Loss(loss));
        }
        let n = topology.n();
        Ok(Network {
            n,
            base: topology,
            groups: None,
            loss: vec![loss; n * n],
            sampler: latency.sampler(),
            latency,
            fifo,
            last_delivery: vec![0; n * n],
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: vec![LinkStats::default(); n * n],
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn topology(&self) -> &Topology {
        &self.base
    }

    pub fn reachable(&self, from: usize, to: usize) -> bool {
        self.base.reachable(from, to)
            && self
                .groups
                .as_ref()
                .is_none_or(|g| g[from] == g[to])
    }

    /// Splits the cluster; replicas not listed form one extra group.
    pub fn partition(&mut self, groups: &[Vec<ProcessId>]) {
        let mut g = vec![groups.len(); self.n];
        for (k, members) in groups.iter().enumerate() {
            for p in members {
                if p.index() < self.n {
                    g[p.index()] = k;
                }
            }
        }
        self.groups = Some(g);
    }

    /// Replaces the base reachability matrix; partitions stay in force.
    pub fn set_topology(&mut self, t: Topology) -> Result<(), NetworkError> {
        if t.n() != self.n {
            return Err(NetworkError::MatrixShape { n: self.n });
        }
        self.base = t;
        Ok(())
    }

    pub fn heal(&mut self) {
        self.groups = None;
    }

    pub fn set_loss(&mut self, from: usize, to: usize, p: f64) -> Result<(), NetworkError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(NetworkError::Loss(p));
        }
        self.loss[from * self.n + to] = p;
        Ok(())
    }

    pub fn set_loss_all(&mut self, p: f64) -> Result<(), NetworkError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(NetworkError::Loss(p));
        }
        self.loss.iter_mut().for_each(|l| *l = p);
        Ok(())
    }

    pub fn sample_latency(&mut self) -> Micros {
        match &self.sampler {
            Some(s) => s.sample(&mut self.rng).round() as Micros,
            None => self.latency.min_us.round() as Micros,
        }
    }

    /// Latency draw from a caller-owned generator, for client links.
    pub fn sample_latency_client<R: Rng>(&self, rng: &mut R) -> Micros {
        match &self.sampler {
            Some(s) => s.sample(rng).round() as Micros,
            None => self.latency.min_us.round() as Micros,
        }
    }

    /// One send attempt departing at `depart`. Returns the delivery time
    /// when the message is scheduled.
    pub fn transmit(&mut self, from: usize, to: usize, depart: Micros) -> (SendOutcome, Option<Micros>) {
        let link = from * self.n + to;
        self.stats[link].sent += 1;
        if !self.reachable(from, to) {
            self.stats[link].unreachable += 1;
            return (SendOutcome::Unreachable, None);
        }
        let p = self.loss[link];
        if p > 0.0 && self.rng.random_bool(p) {
            self.stats[link].lost += 1;
            return (SendOutcome::Lost, None);
        }
        let mut at = depart + self.sample_latency();
        if self.fifo {
            at = at.max(self.last_delivery[link]);
            self.last_delivery[link] = at;
        }
        self.stats[link].scheduled += 1;
        (SendOutcome::Scheduled, Some(at))
    }

    pub fn mark_delivered(&mut self, from: usize, to: usize) {
        self.stats[from * self.n + to].delivered += 1;
    }

    pub fn mark_dropped(&mut self, from: usize, to: usize) {
        self.stats[from * self.n + to].dropped += 1;
    }

    pub fn link(&self, from: usize, to: usize) -> LinkStats {
        self.stats[from * self.n + to]
    }

    pub fn totals(&self) -> LinkStats {
        self.stats.iter().fold(LinkStats::default(), |mut a, s| {
            a.sent += s.sent;
            a.scheduled += s.scheduled;
            a.unreachable += s.unreachable;
            a.lost += s.lost;
            a.delivered += s.delivered;
            a.dropped += s.dropped;
            a
        })
    }
}
