//! Reference model of the decentralized commit structures on small
//! clusters, kept deliberately naive: plain `Vec<bool>` bitmaps and logs
//! stored as term lists, no shared code with [`crate::commit`].
//!
//! Scripts of appends, term changes and field deliveries run against both
//! the reference and the engine; states are compared after every event.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::commit::CommitState;
use crate::types::{LogEntry, ProcessId, ReplicatedLog, Term};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ScriptEvent {
    /// The replica appends one entry of its current term.
    Append { node: usize },
    /// The replica starts an election or learns of a newer term.
    NewTerm { node: usize, term: u64 },
    /// `to` receives the fields `from` currently carries. A newer sender
    /// term is adopted first, as a replica would on any message.
    Deliver { from: usize, to: usize },
}

/// Observable commit state of one replica.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Snapshot {
    pub bitmap: Vec<bool>,
    pub max_commit: u64,
    pub next_commit: u64,
    pub commit_index: u64,
}

#[derive(Clone, Debug)]
pub struct OracleReplica {
    me: usize,
    bitmap: Vec<bool>,
    max_commit: u64,
    next_commit: u64,
    commit_index: u64,
    /// Term of each entry; entry `k` sits at `log[k - 1]`.
    log: Vec<u64>,
    term: u64,
}

impl OracleReplica {
    pub fn new(n: usize, me: usize) -> OracleReplica {
        OracleReplica {
            me,
            bitmap: vec![false; n],
            max_commit: 0,
            next_commit: 1,
            commit_index: 0,
            log: Vec::new(),
            term: 0,
        }
    }

    fn majority(&self) -> usize {
        self.bitmap.len() / 2 + 1
    }

    fn last_index(&self) -> u64 {
        self.log.len() as u64
    }

    fn last_term(&self) -> u64 {
        self.log.last().copied().unwrap_or(0)
    }

    fn update(&mut self) -> bool {
        let ones = self.bitmap.iter().filter(|b| **b).count();
        if ones < self.majority() {
            return false;
        }
        self.max_commit = self.next_commit;
        self.bitmap = vec![false; self.bitmap.len()];
        if self.next_commit >= self.last_index() || self.last_term() != self.term {
            self.next_commit += 1;
        } else {
            self.next_commit = self.last_index();
            self.bitmap[self.me] = true;
        }
        true
    }

    fn merge(&mut self, bitmap: &[bool], max_commit: u64, next_commit: u64) {
        self.max_commit = self.max_commit.max(max_commit);
        if self.next_commit <= next_commit {
            for (mine, theirs) in self.bitmap.iter_mut().zip(bitmap) {
                *mine = *mine || *theirs;
            }
        }
        if self.next_commit <= self.max_commit {
            self.bitmap = bitmap.to_vec();
            self.next_commit = next_commit;
        }
    }

    fn own_bit(&mut self) {
        if self.last_index() >= self.next_commit && self.last_term() == self.term {
            self.bitmap[self.me] = true;
        }
    }

    fn commit_rule(&mut self) {
        if self.last_term() == self.term {
            self.commit_index = self.commit_index.max(self.last_index().min(self.max_commit));
        }
    }

    fn settle(&mut self) {
        self.own_bit();
        while self.update() {}
        self.commit_rule();
    }

    fn new_term(&mut self, term: u64) {
        self.term = term;
        self.bitmap = vec![false; self.bitmap.len()];
        self.next_commit = self.max_commit + 1;
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            bitmap: self.bitmap.clone(),
            max_commit: self.max_commit,
            next_commit: self.next_commit,
            commit_index: self.commit_index,
        }
    }
}

/// Expected per-replica states after each event of `script`.
pub fn brute_force_commit_oracle(n: usize, script: &[ScriptEvent]) -> Vec<Vec<Snapshot>> {
    let mut reps: Vec<OracleReplica> = (0..n).map(|i| OracleReplica::new(n, i)).collect();
    let mut out = Vec::with_capacity(script.len());
    for ev in script {
        match *ev {
            ScriptEvent::Append { node } => {
                let r = &mut reps[node];
                r.log.push(r.term);
                r.settle();
            }
            ScriptEvent::NewTerm { node, term } => {
                if term > reps[node].term {
                    reps[node].new_term(term);
                }
            }
            ScriptEvent::Deliver { from, to } => {
                let (bm, mc, nc, term) = {
                    let s = &reps[from];
                    (s.bitmap.clone(), s.max_commit, s.next_commit, s.term)
                };
                let r = &mut reps[to];
                if term > r.term {
                    r.new_term(term);
                }
                r.merge(&bm, mc, nc);
                r.settle();
            }
        }
        out.push(reps.iter().map(OracleReplica::snapshot).collect());
    }
    out
}

struct EngineReplica {
    cs: CommitState,
    log: ReplicatedLog,
    term: Term,
    commit_index: u64,
}

impl EngineReplica {
    fn snapshot(&self) -> Snapshot {
        Snapshot {
            bitmap: self.cs.bitmap().to_bools(),
            max_commit: self.cs.max_commit(),
            next_commit: self.cs.next_commit(),
            commit_index: self.commit_index,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Divergence {
    /// Position of the first event after which states differ.
    pub event: usize,
    pub node: usize,
    pub expected: Snapshot,
    pub actual: Snapshot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum ScriptFailure {
    Diverged(Divergence),
    /// The engine left nextCommit ≤ maxCommit after some mutation.
    OrderBroken { event: usize, node: usize, max_commit: u64, next_commit: u64 },
}

/// Runs `script` on the engine and compares with the reference after
/// every event; also checks `nextCommit > maxCommit` after every mutation.
pub fn run_script(n: usize, script: &[ScriptEvent]) -> Result<Vec<Vec<Snapshot>>, ScriptFailure> {
    let expected = brute_force_commit_oracle(n, script);
    let majority = n / 2 + 1;
    let mut reps: Vec<EngineReplica> = (0..n)
        .map(|i| EngineReplica {
            cs: CommitState::new(n, ProcessId::from(i)),
            log: ReplicatedLog::new(),
            term: Term::ZERO,
            commit_index: 0,
        })
        .collect();
    for (k, ev) in script.iter().enumerate() {
        let mut broken: Option<(u64, u64)> = None;
        let mut obs = |cs: &CommitState| {
            if cs.next_commit() <= cs.max_commit() && broken.is_none() {
                broken = Some((cs.max_commit(), cs.next_commit()));
            }
        };
        let node = match *ev {
            ScriptEvent::Append { node } => {
                let r = &mut reps[node];
                r.log
                    .append(LogEntry::new(r.term, &b"s"[..]))
                    .expect("entry of the current term");
                let s = r.cs.settle(&r.log, r.term, majority, r.commit_index, &mut obs);
                r.commit_index = s.commit_index;
                node
            }
            ScriptEvent::NewTerm { node, term } => {
                let r = &mut reps[node];
                if Term(term) > r.term {
                    r.term = Term(term);
                    r.cs.reset_on_term_change();
                }
                node
            }
            ScriptEvent::Deliver { from, to } => {
                let fields = reps[from].cs.attach_fields();
                let term = reps[from].term;
                let r = &mut reps[to];
                if term > r.term {
                    r.term = term;
                    r.cs.reset_on_term_change();
                }
                let a = r.cs.absorb(&fields, &r.log, r.term, majority, r.commit_index, &mut obs);
                r.commit_index = a.commit_index;
                to
            }
        };
        if let Some((max_commit, next_commit)) = broken {
            return Err(ScriptFailure::OrderBroken {
                event: k,
                node,
                max_commit,
                next_commit,
            });
        }
        for (i, r) in reps.iter().enumerate() {
            let actual = r.snapshot();
            if actual != expected[k][i] {
                return Err(ScriptFailure::Diverged(Divergence {
                    event: k,
                    node: i,
                    expected: expected[k][i].clone(),
                    actual,
                }));
            }
        }
    }
    Ok(expected)
}

/// Random script over `n` replicas: mostly deliveries and appends, with
/// occasional term changes so resets and stale fields show up.
pub fn random_script(n: usize, len: usize, seed: u64) -> Vec<ScriptEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut top_term = 1;
    let mut script = Vec::with_capacity(len + n);
    for node in 0..n {
        script.push(ScriptEvent::NewTerm { node, term: 1 });
    }
    for _ in 0..len {
        let roll: f64 = rng.random();
        let node = rng.random_range(0..n);
        if roll < 0.35 {
            script.push(ScriptEvent::Append { node });
        } else if roll < 0.93 || n < 2 {
            let mut to = rng.random_range(0..n);
            if n > 1 {
                while to == node {
                    to = rng.random_range(0..n);
                }
            }
            script.push(ScriptEvent::Deliver { from: node, to });
        } else {
            top_term += 1;
            script.push(ScriptEvent::NewTerm { node, term: top_term });
        }
    }
    script
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_scripts_agree() {
        for n in 1..=5 {
            for seed in 0..200 {
                let script = random_script(n, 120, seed);
                if let Err(f) = run_script(n, &script) {
                    panic!("n={n} seed={seed}: {f:?}");
                }
            }
        }
    }

    #[test]
    fn repeated_identical_merges_reach_a_fixed_point() {
        let mut script = vec![
            ScriptEvent::NewTerm { node: 0, term: 1 },
            ScriptEvent::NewTerm { node: 1, term: 1 },
            ScriptEvent::Append { node: 0 },
            ScriptEvent::Append { node: 0 },
        ];
        script.extend([ScriptEvent::Deliver { from: 0, to: 1 }; 4]);
        let states = run_script(3, &script).unwrap();
        let k = script.len();
        assert_eq!(states[k - 1], states[k - 2]);
        assert_eq!(states[k - 2], states[k - 3]);
    }

    #[test]
    fn majority_moves_next_commit_to_last_index() {
        use ScriptEvent::*;
        let script = [
            NewTerm { node: 0, term: 1 },
            NewTerm { node: 1, term: 1 },
            NewTerm { node: 2, term: 1 },
            Append { node: 0 },
            Append { node: 1 },
            Append { node: 0 },
            Append { node: 0 },
            Deliver { from: 0, to: 1 },
        ];
        let states = run_script(3, &script).unwrap();
        let s = &states.last().unwrap()[1];
        // Both replicas hold index 1, so node 1 sees a majority for it; its
        // own log ends at 1, hence nextCommit creeps to 2.
        assert_eq!((s.max_commit, s.next_commit, s.commit_index), (1, 2, 1));
        let s = &states[6][0];
        assert_eq!((s.max_commit, s.next_commit), (0, 1));
    }

    #[test]
    fn single_replica_commits_alone() {
        let script = [ScriptEvent::NewTerm { node: 0, term: 1 }, ScriptEvent::Append { node: 0 }];
        let states = brute_force_commit_oracle(1, &script);
        let s = &states[1][0];
        assert_eq!((s.max_commit, s.next_commit, s.commit_index), (1, 2, 1));
        assert!(s.bitmap.iter().all(|b| !b));
    }
}
