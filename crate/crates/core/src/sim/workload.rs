//! Closed-loop clients: one outstanding request each, redirect-following,
//! bounded retries and optional rate pacing.

use serde::{Deserialize, Serialize};

use crate::trace::Micros;
use crate::types::ProcessId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    /// Number of concurrent clients.
    pub clients: usize,
    /// Aggregate target request rate in requests per second; unpaced when
    /// absent.
    pub rate: Option<f64>,
    pub command_size: usize,
    /// Simulated time at which clients start issuing requests.
    pub start_us: Micros,
    /// A request with no answer after this long is retried elsewhere.
    pub request_timeout_us: Micros,
    /// Retries per request before it counts as failed.
    pub max_retries: u32,
    /// Wait before retrying after an "unavailable" answer.
    pub retry_backoff_us: Micros,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            clients: 0,
            rate: None,
            command_size: 64,
            start_us: 200_000,
            request_timeout_us: 2_000_000,
            max_retries: 10,
            retry_backoff_us: 10_000,
        }
    }
}

impl WorkloadConfig {
    /// Minimum gap between two requests of the same client.
    pub fn pacing_us(&self) -> Micros {
        match self.rate {
            Some(r) if r > 0.0 => (self.clients as f64 / r * 1e6).round() as Micros,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pending {
    pub seq: u64,
    pub first_sent: Micros,
    pub attempt: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Client {
    pub id: u32,
    pub next_seq: u64,
    pub target: ProcessId,
    pub pending: Option<Pending>,
    pub last_issue: Micros,
    pub completed: u64,
    pub failed: u64,
}

impl Client {
    pub fn new(id: u32, target: ProcessId) -> Client {
        Client {
            id,
            next_seq: 0,
            target,
            pending: None,
            last_issue: 0,
            completed: 0,
            failed: 0,
        }
    }

    /// Starts a new request; returns its sequence number.
    pub fn issue(&mut self, now: Micros) -> u64 {
        debug_assert!(self.pending.is_none());
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending = Some(Pending {
            seq,
            first_sent: now,
            attempt: 0,
        });
        self.last_issue = now;
        seq
    }

    /// Whether an answer for `(seq, attempt)` concerns the current attempt.
    pub fn is_current(&self, seq: u64, attempt: u32) -> bool {
        self.pending.is_some_and(|p| p.seq == seq && p.attempt == attempt)
    }

    /// Bumps the attempt counter; `None` once the retry budget is spent.
    pub fn retry(&mut self, max_retries: u32) -> Option<Pending> {
        let p = self.pending.as_mut()?;
        if p.attempt >= max_retries {
            self.pending = None;
            self.failed += 1;
            return None;
        }
        p.attempt += 1;
        Some(*p)
    }

    /// Completes the pending request if `seq` matches; returns its latency.
    pub fn complete(&mut self, seq: u64, now: Micros) -> Option<Micros> {
        let p = self.pending.filter(|p| p.seq == seq)?;
        self.pending = None;
        self.completed += 1;
        Some(now - p.first_sent)
    }

    /// Earliest time the next request may go out.
    pub fn next_issue_at(&self, now: Micros, pacing: Micros) -> Micros {
        now.max(self.last_issue + pacing)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pacing_from_rate() {
        let w = WorkloadConfig {
            clients: 100,
            rate: Some(100.0),
            ..WorkloadConfig::default()
        };
        assert_eq!(w.pacing_us(), 1_000_000);
        let w = WorkloadConfig {
            clients: 1,
            rate: Some(100.0),
            ..WorkloadConfig::default()
        };
        assert_eq!(w.pacing_us(), 10_000);
        assert_eq!(WorkloadConfig::default().pacing_us(), 0);
    }

    #[test]
    fn retry_budget() {
        let mut c = Client::new(0, ProcessId(0));
        let seq = c.issue(5);
        assert!(c.is_current(seq, 0));
        assert_eq!(c.retry(2).unwrap().attempt, 1);
        assert_eq!(c.retry(2).unwrap().attempt, 2);
        assert!(c.retry(2).is_none());
        assert_eq!(c.failed, 1);
        assert!(c.pending.is_none());
    }

    #[test]
    fn completion_latency() {
        let mut c = Client::new(0, ProcessId(0));
        let seq = c.issue(100);
        assert_eq!(c.complete(seq + 1, 150), None);
        assert_eq!(c.complete(seq, 150), Some(50));
        assert_eq!(c.completed, 1);
        assert_eq!(c.next_issue_at(150, 10), 150);
        assert_eq!(c.next_issue_at(105, 10), 110);
    }
}
