//! Run metrics and their CSV export.
//!
//! Every CSV starts with one `# epiraft-metrics v1 <table>` line followed by
//! a regular header row. Times are in milliseconds, throughput in requests
//! per second and CPU in cost units.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::sim::network::LinkStats;
use crate::trace::Micros;
use crate::types::{LogIndex, MessageKind, ProcessId, Term, Variant};

pub const METRICS_VERSION: u32 = 1;

/// Per-kind message counters, indexed by [`MessageKind::slot`].
pub type KindCounts = [u64; MessageKind::ALL.len()];

#[derive(Clone, Debug, PartialEq)]
pub struct NodeMetrics {
    pub node: ProcessId,
    pub cost: f64,
    pub busy_us: Micros,
    pub sent: KindCounts,
    pub received: KindCounts,
    pub entries_appended: u64,
    pub leader_us: Micros,
    pub final_commit: LogIndex,
}

impl NodeMetrics {
    pub fn new(node: ProcessId) -> NodeMetrics {
        NodeMetrics {
            node,
            cost: 0.0,
            busy_us: 0,
            sent: [0; MessageKind::ALL.len()],
            received: [0; MessageKind::ALL.len()],
            entries_appended: 0,
            leader_us: 0,
            final_commit: 0,
        }
    }

    pub fn sent_total(&self) -> u64 {
        self.sent.iter().sum()
    }

    pub fn received_total(&self) -> u64 {
        self.received.iter().sum()
    }
}

/// One replica committing one client entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LagSample {
    pub node: ProcessId,
    pub index: LogIndex,
    pub term: Term,
    /// Leader receipt of the client request.
    pub receipt: Micros,
    /// First time this replica's commitIndex covered the entry.
    pub commit: Micros,
    /// Whether `node` is the leader that received the request.
    pub origin: bool,
}

impl LagSample {
    pub fn lag_us(&self) -> Micros {
        self.commit - self.receipt
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub variant: Variant,
    pub n: usize,
    pub seed: u64,
    pub duration_us: Micros,
    /// Interval in which clients were active.
    pub window_us: Micros,
    pub completed: u64,
    pub failed: u64,
    pub retries: u64,
    pub latencies_us: Vec<Micros>,
    pub nodes: Vec<NodeMetrics>,
    pub commit_lag: Vec<LagSample>,
    pub elections: u64,
    /// Term in which the first leader was elected.
    pub first_leader_term: Option<Term>,
    pub max_term: Term,
    pub committed: LogIndex,
    pub messages: LinkStats,
    /// Configured aggregate request rate; `None` when clients are unpaced.
    pub offered_rate: Option<f64>,
}

impl MetricsReport {
    pub fn throughput(&self) -> f64 {
        if self.window_us == 0 {
            return 0.0;
        }
        self.completed as f64 / (self.window_us as f64 / 1e6)
    }

    /// Terms started after the first leader's term.
    pub fn term_changes(&self) -> u64 {
        self.first_leader_term
            .map_or(self.max_term.0, |t| self.max_term.0.saturating_sub(t.0))
    }

    pub fn mean_latency_ms(&self) -> f64 {
        if self.latencies_us.is_empty() {
            return f64::NAN;
        }
        self.latencies_us.iter().sum::<u64>() as f64 / self.latencies_us.len() as f64 / 1e3
    }

    pub fn latency_quantile_ms(&self, q: f64) -> f64 {
        quantile(&self.latencies_us.iter().map(|l| *l as f64 / 1e3).collect::<Vec<_>>(), q)
    }

    /// The replica that spent the longest time as leader.
    pub fn main_leader(&self) -> Option<ProcessId> {
        self.nodes
            .iter()
            .filter(|m| m.leader_us > 0)
            .max_by_key(|m| (m.leader_us, std::cmp::Reverse(m.node)))
            .map(|m| m.node)
    }

    pub fn leader_cost(&self) -> f64 {
        self.main_leader()
            .map(|l| self.nodes[l.index()].cost)
            .unwrap_or(f64::NAN)
    }

    pub fn mean_follower_cost(&self) -> f64 {
        let leader = self.main_leader();
        let f: Vec<f64> = self
            .nodes
            .iter()
            .filter(|m| Some(m.node) != leader)
            .map(|m| m.cost)
            .collect();
        f.iter().sum::<f64>() / f.len().max(1) as f64
    }

    pub fn mean_node_cost(&self) -> f64 {
        self.nodes.iter().map(|m| m.cost).sum::<f64>() / self.nodes.len().max(1) as f64
    }

    /// Leader cost units per entry committed during the run.
    pub fn leader_cost_per_commit(&self) -> f64 {
        if self.committed == 0 {
            return f64::NAN;
        }
        self.leader_cost() / self.committed as f64
    }

    pub fn follower_lags_ms(&self) -> Vec<f64> {
        self.commit_lag
            .iter()
            .filter(|s| !s.origin)
            .map(|s| s.lag_us() as f64 / 1e3)
            .collect()
    }

    /// Follower samples that committed no later than the originating leader.
    pub fn followers_ahead_of_leader(&self) -> usize {
        let mut leader_at = std::collections::BTreeMap::new();
        for s in self.commit_lag.iter().filter(|s| s.origin) {
            leader_at.insert((s.index, s.term), s.commit);
        }
        self.commit_lag
            .iter()
            .filter(|s| !s.origin)
            .filter(|s| leader_at.get(&(s.index, s.term)).is_some_and(|l| s.commit <= *l))
            .count()
    }

    pub fn summary_row(&self, label: &str, repeat: u32) -> SummaryRow {
        SummaryRow {
            label: label.to_string(),
            variant: self.variant.as_str().to_string(),
            n: self.n,
            rate_rps: self.offered_rate.unwrap_or(f64::NAN),
            seed: self.seed,
            repeat,
            duration_s: self.duration_us as f64 / 1e6,
            completed: self.completed,
            failed: self.failed,
            retries: self.retries,
            throughput_rps: self.throughput(),
            mean_latency_ms: self.mean_latency_ms(),
            p50_latency_ms: self.latency_quantile_ms(0.5),
            p99_latency_ms: self.latency_quantile_ms(0.99),
            leader: self.main_leader().map(|p| p.0 as i64).unwrap_or(-1),
            leader_cost: self.leader_cost(),
            mean_follower_cost: self.mean_follower_cost(),
            leader_cost_per_commit: self.leader_cost_per_commit(),
            committed: self.committed,
            elections: self.elections,
            term_changes: self.term_changes(),
            max_term: self.max_term.0,
            median_follower_lag_ms: quantile(&self.follower_lags_ms(), 0.5),
            followers_ahead: self.followers_ahead_of_leader() as u64,
            messages_sent: self.messages.sent,
            messages_lost: self.messages.lost,
            messages_unreachable: self.messages.unreachable,
        }
    }
}

/// Linear-interpolation-free quantile: the smallest sample with at least
/// `q` of the mass at or below it. NaN on empty input.
pub fn quantile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CdfPoint {
    pub value: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cdf {
    /// No samples were collected.
    Empty,
    Points(Vec<CdfPoint>),
}

impl Cdf {
    pub fn points(&self) -> &[CdfPoint] {
        match self {
            Cdf::Empty => &[],
            Cdf::Points(p) => p,
        }
    }

    /// Keeps at most about `max` points: the first point reaching each
    /// fraction step of `1 / max`, plus the last. Kept points are exact.
    pub fn thin(self, max: usize) -> Cdf {
        let Cdf::Points(ps) = self else { return Cdf::Empty };
        if ps.len() <= max || max == 0 {
            return Cdf::Points(ps);
        }
        let last = *ps.last().expect("non-empty");
        let mut out: Vec<CdfPoint> = Vec::with_capacity(max + 1);
        let mut next_step = 0.0;
        for p in ps {
            if p.fraction >= next_step {
                out.push(p);
                next_step = ((p.fraction * max as f64 + 1e-9).floor() + 1.0) / max as f64;
            }
        }
        if out.last() != Some(&last) {
            out.push(last);
        }
        Cdf::Points(out)
    }
}

/// Empirical CDF with one point per distinct value.
pub fn compute_cdf(samples: &[f64]) -> Cdf {
    if samples.is_empty() {
        return Cdf::Empty;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let total = v.len() as f64;
    let mut points: Vec<CdfPoint> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let fraction = (i + 1) as f64 / total;
        match points.last_mut() {
            Some(p) if p.value == *x => p.fraction = fraction,
            _ => points.push(CdfPoint { value: *x, fraction }),
        }
    }
    Cdf::Points(points)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub variant: String,
    pub n: usize,
    /// Offered load; NaN for unpaced clients.
    pub rate_rps: f64,
    pub seed: u64,
    pub repeat: u32,
    pub duration_s: f64,
    pub completed: u64,
    pub failed: u64,
    pub retries: u64,
    pub throughput_rps: f64,
    pub mean_latency_ms: f64,
    pub p50_latency_ms: f64,
    pub p99_latency_ms: f64,
    pub leader: i64,
    pub leader_cost: f64,
    pub mean_follower_cost: f64,
    pub leader_cost_per_commit: f64,
    pub committed: u64,
    pub elections: u64,
    pub term_changes: u64,
    pub max_term: u64,
    pub median_follower_lag_ms: f64,
    pub followers_ahead: u64,
    pub messages_sent: u64,
    pub messages_lost: u64,
    pub messages_unreachable: u64,
}

/// Mean of the numeric columns over rows sharing label, variant, n and
/// offered rate (the repeats of one configuration), in first-seen order.
pub fn aggregate(rows: &[SummaryRow]) -> Vec<SummaryRow> {
    let key = |r: &SummaryRow| (r.label.clone(), r.variant.clone(), r.n, r.rate_rps.to_bits());
    let mut groups: Vec<(_, Vec<&SummaryRow>)> = Vec::new();
    for r in rows {
        let k = key(r);
        match groups.iter_mut().find(|g| g.0 == k) {
            Some(g) => g.1.push(r),
            None => groups.push((k, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(_, rs)| {
            let k = rs.len() as f64;
            let f = |g: fn(&SummaryRow) -> f64| rs.iter().map(|r| g(r)).sum::<f64>() / k;
            let u = |g: fn(&SummaryRow) -> u64| (rs.iter().map(|r| g(r)).sum::<u64>() as f64 / k).round() as u64;
            let first = rs[0];
            SummaryRow {
                label: first.label.clone(),
                variant: first.variant.clone(),
                n: first.n,
                rate_rps: first.rate_rps,
                seed: first.seed,
                repeat: rs.len() as u32,
                duration_s: f(|r| r.duration_s),
                completed: u(|r| r.completed),
                failed: u(|r| r.failed),
                retries: u(|r| r.retries),
                throughput_rps: f(|r| r.throughput_rps),
                mean_latency_ms: f(|r| r.mean_latency_ms),
                p50_latency_ms: f(|r| r.p50_latency_ms),
                p99_latency_ms: f(|r| r.p99_latency_ms),
                leader: first.leader,
                leader_cost: f(|r| r.leader_cost),
                mean_follower_cost: f(|r| r.mean_follower_cost),
                leader_cost_per_commit: f(|r| r.leader_cost_per_commit),
                committed: u(|r| r.committed),
                elections: u(|r| r.elections),
                term_changes: u(|r| r.term_changes),
                max_term: u(|r| r.max_term),
                median_follower_lag_ms: f(|r| r.median_follower_lag_ms),
                followers_ahead: u(|r| r.followers_ahead),
                messages_sent: u(|r| r.messages_sent),
                messages_lost: u(|r| r.messages_lost),
                messages_unreachable: u(|r| r.messages_unreachable),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct NodeRow<'a> {
    label: &'a str,
    variant: &'a str,
    n: usize,
    rate_rps: f64,
    seed: u64,
    node: u32,
    is_leader: bool,
    cost: f64,
    busy_ms: f64,
    sent: u64,
    received: u64,
    entries_appended: u64,
    leader_ms: f64,
    final_commit: u64,
}

#[derive(Serialize)]
struct CdfRow<'a> {
    label: &'a str,
    variant: &'a str,
    n: usize,
    rate_rps: f64,
    seed: u64,
    value_ms: f64,
    fraction: f64,
}

/// Writes CSV tables with a versioned first line.
pub struct CsvTable {
    inner: csv::Writer<BufWriter<File>>,
}

impl CsvTable {
    pub fn create(path: &Path, table: &str) -> std::io::Result<CsvTable> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "# epiraft-metrics v{METRICS_VERSION} {table}")?;
        Ok(CsvTable {
            inner: csv::Writer::from_writer(w),
        })
    }

    pub fn row<T: Serialize>(&mut self, row: &T) -> std::io::Result<()> {
        self.inner.serialize(row).map_err(std::io::Error::other)
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.inner.flush()
    }

    pub fn summary(&mut self, rows: &[SummaryRow]) -> std::io::Result<()> {
        rows.iter().try_for_each(|r| self.row(r))
    }

    pub fn nodes(&mut self, label: &str, report: &MetricsReport) -> std::io::Result<()> {
        let leader = report.main_leader();
        for m in &report.nodes {
            self.row(&NodeRow {
                label,
                variant: report.variant.as_str(),
                n: report.n,
                rate_rps: report.offered_rate.unwrap_or(f64::NAN),
                seed: report.seed,
                node: m.node.0,
                is_leader: Some(m.node) == leader,
                cost: m.cost,
                busy_ms: m.busy_us as f64 / 1e3,
                sent: m.sent_total(),
                received: m.received_total(),
                entries_appended: m.entries_appended,
                leader_ms: m.leader_us as f64 / 1e3,
                final_commit: m.final_commit,
            })?;
        }
        Ok(())
    }

    /// One row per CDF point; an empty CDF writes a single row with empty
    /// value and fraction 0 so the table is never silently blank.
    pub fn cdf(&mut self, label: &str, report: &MetricsReport, cdf: &Cdf) -> std::io::Result<()> {
        let row = |value_ms, fraction| CdfRow {
            label,
            variant: report.variant.as_str(),
            n: report.n,
            rate_rps: report.offered_rate.unwrap_or(f64::NAN),
            seed: report.seed,
            value_ms,
            fraction,
        };
        match cdf {
            Cdf::Empty => self.row(&row(f64::NAN, 0.0)),
            Cdf::Points(ps) => ps.iter().try_for_each(|p| self.row(&row(p.value, p.fraction))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thinning_keeps_exact_points() {
        let samples: Vec<f64> = (0..10_000).map(|i| (i % 977) as f64).collect();
        let full = compute_cdf(&samples);
        let thin = full.clone().thin(100);
        let tp = thin.points();
        assert!(tp.len() <= 102, "{}", tp.len());
        assert_eq!(tp.last(), full.points().last());
        assert!(tp.iter().all(|p| full.points().contains(p)));
        assert!(tp.windows(2).all(|w| w[1].fraction - w[0].fraction <= 0.02));
        assert_eq!(Cdf::Empty.thin(5), Cdf::Empty);
    }

    #[test]
    fn cdf_definition() {
        let c = compute_cdf(&[1.0, 2.0, 3.0]);
        let p = c.points();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0].value, 1.0);
        assert!((p[0].fraction - 1.0 / 3.0).abs() < 1e-12);
        assert!((p[1].fraction - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(p[2].fraction, 1.0);
    }

    #[test]
    fn cdf_of_equal_samples_is_one_step() {
        assert_eq!(
            compute_cdf(&[4.0; 7]),
            Cdf::Points(vec![CdfPoint { value: 4.0, fraction: 1.0 }])
        );
        assert_eq!(compute_cdf(&[]), Cdf::Empty);
    }

    #[test]
    fn quantiles() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.0);
        assert_eq!(quantile(&[5.0], 0.99), 5.0);
        assert!(quantile(&[], 0.5).is_nan());
    }
}
