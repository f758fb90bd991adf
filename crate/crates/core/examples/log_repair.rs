//! A follower with a conflicting suffix: the consistency check rejects the
//! first attempt, the retry truncates and overwrites.

use epiraft::raft::{DurableImage, Node, NodeConfig};
use epiraft::types::{AppendEntriesMsg, LogEntry, ProcessId, ReplicatedLog, Term, Variant};

fn main() {
    let mut log = ReplicatedLog::new();
    for t in [1, 1, 2, 2] {
        log.append(LogEntry::new(Term(t), &b"old"[..])).unwrap();
    }
    let image = DurableImage {
        current_term: Term(2),
        voted_for: None,
        log,
    };
    let mut follower = Node::restore(ProcessId(1), NodeConfig::new(3, Variant::Baseline), image, 1, 0);

    let mut msg = AppendEntriesMsg {
        term: Term(3),
        leader_id: ProcessId(0),
        prev_log_index: 3,
        prev_log_term: Term(3),
        entries: vec![LogEntry::new(Term(3), &b"new"[..])],
        leader_commit: 2,
        is_gossip: false,
        round_lc: 0,
        bitmap: None,
        max_commit: None,
        next_commit: None,
    };
    let reply = follower.handle_append_entries(&msg, 10).reply.unwrap();
    println!("prev (3, t3): success={} hint={}", reply.success, reply.match_hint);

    msg.prev_log_index = 2;
    msg.prev_log_term = Term(1);
    msg.entries = vec![LogEntry::new(Term(3), &b"x"[..]), LogEntry::new(Term(3), &b"y"[..])];
    let reply = follower.handle_append_entries(&msg, 20).reply.unwrap();
    println!("prev (2, t1): success={} hint={}", reply.success, reply.match_hint);

    let terms: Vec<u64> = follower.state().log.entries().iter().map(|e| e.term.0).collect();
    println!("log terms now {terms:?}, commit index {}", follower.state().commit_index);
}
