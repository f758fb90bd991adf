use super::*;

fn node(n: usize, variant: Variant, id: u32) -> Node {
    Node::new(ProcessId(id), NodeConfig::new(n, variant), id as u64, 0)
}

fn entries(terms: &[u64]) -> Vec<LogEntry> {
    terms
        .iter()
        .map(|t| LogEntry::new(Term(*t), &b"op"[..]))
        .collect()
}

fn with_log(n: usize, variant: Variant, id: u32, term: u64, terms: &[u64]) -> Node {
    let mut log = ReplicatedLog::new();
    for e in entries(terms) {
        log.append(e).unwrap();
    }
    let image = DurableImage {
        current_term: Term(term),
        voted_for: None,
        log,
    };
    Node::restore(ProcessId(id), NodeConfig::new(n, variant), image, 1, 0)
}

fn ae(term: u64, prev: (u64, u64), ents: &[u64], commit: u64) -> AppendEntriesMsg {
    AppendEntriesMsg {
        term: Term(term),
        leader_id: ProcessId(0),
        prev_log_index: prev.0,
        prev_log_term: Term(prev.1),
        entries: entries(ents),
        leader_commit: commit,
        is_gossip: false,
        round_lc: 0,
        bitmap: None,
        max_commit: None,
        next_commit: None,
    }
}

/// Forces `node` into leadership of `term` through a real election.
fn elect(node: &mut Node, now: Micros) {
    let deadline = node.state.election_deadline;
    node.tick(deadline.max(now));
    assert_ne!(node.state.role, Role::Follower);
    let term = node.state.current_term;
    let mut voter = 0;
    while node.state.role != Role::Leader {
        let p = ProcessId(voter);
        voter += 1;
        if p == node.id() {
            continue;
        }
        node.handle_vote_reply(
            p,
            &RequestVoteReply {
                term,
                vote_granted: true,
            },
            now,
        );
    }
    node.take_outbox();
    node.take_events();
}

#[test]
fn role_edges() {
    use Role::*;
    assert!(Follower.may_become(Candidate));
    assert!(Candidate.may_become(Leader));
    assert!(Candidate.may_become(Candidate));
    assert!(Leader.may_become(Follower));
    assert!(!Follower.may_become(Leader));
    assert!(!Leader.may_become(Candidate));
}

#[test]
fn client_request_by_role() {
    let mut l = with_log(3, Variant::Baseline, 0, 1, &[1, 1, 1, 1]);
    elect(&mut l, 100_000);
    let term = l.state.current_term;
    let out = l.handle_client_request(Bytes::from_static(b"x"), ClientTag { client: 0, seq: 0 }, 0);
    assert_eq!(out, ClientOutcome::Accepted(5));
    assert_eq!(l.state.log.last_index(), 5);
    assert_eq!(l.state.log.term_at(5), Some(term));

    let mut f = node(5, Variant::V1, 1);
    let tag = ClientTag { client: 1, seq: 1 };
    assert_eq!(f.handle_client_request(Bytes::new(), tag, 0), ClientOutcome::Unavailable);
    let mut m = ae(1, (0, 0), &[], 0);
    m.leader_id = ProcessId(3);
    f.handle_append_entries(&m, 0);
    assert_eq!(
        f.handle_client_request(Bytes::new(), tag, 0),
        ClientOutcome::Redirect(ProcessId(3))
    );

    let mut c = node(3, Variant::V1, 2);
    c.tick(c.state.election_deadline);
    assert_eq!(c.state.role, Role::Candidate);
    assert_eq!(c.handle_client_request(Bytes::new(), tag, 0), ClientOutcome::Unavailable);
}

#[test]
fn append_entries_examples() {
    let mut f = with_log(3, Variant::Baseline, 1, 1, &[1, 1]);
    let out = f.handle_append_entries(&ae(2, (2, 1), &[2], 2), 0);
    let r = out.reply.unwrap();
    assert!(r.success);
    assert_eq!(r.match_hint, 3);
    assert_eq!(f.state.log.last_index(), 3);
    assert_eq!(f.state.commit_index, 2);

    let mut f = with_log(3, Variant::Baseline, 1, 1, &[1]);
    let r = f.handle_append_entries(&ae(1, (2, 1), &[1], 0), 0).reply.unwrap();
    assert!(!r.success);
    assert_eq!(r.match_hint, 1);

    let mut f = with_log(3, Variant::Baseline, 1, 3, &[1]);
    let r = f.handle_append_entries(&ae(1, (0, 0), &[], 0), 0).reply.unwrap();
    assert!(!r.success);
    assert_eq!(r.term, Term(3));
}

#[test]
fn conflicting_suffix_is_replaced() {
    let mut f = with_log(3, Variant::Baseline, 1, 2, &[1, 2, 2]);
    let r = f.handle_append_entries(&ae(3, (1, 1), &[3], 0), 0).reply.unwrap();
    assert!(r.success);
    assert_eq!(f.state.log.last_index(), 2);
    assert_eq!(f.state.log.term_at(2), Some(Term(3)));
    assert!(f.take_events().iter().any(|e| matches!(e, TraceEvent::Truncate { from: 2 })));
}

#[test]
fn duplicate_append_keeps_longer_log() {
    let mut f = with_log(3, Variant::Baseline, 1, 1, &[1, 1, 1]);
    let r = f.handle_append_entries(&ae(1, (0, 0), &[1], 0), 0).reply.unwrap();
    assert!(r.success);
    assert_eq!(r.match_hint, 1);
    assert_eq!(f.state.log.last_index(), 3);
}

#[test]
fn reply_bookkeeping() {
    let mut l = with_log(5, Variant::Baseline, 0, 1, &[1, 1, 1, 1, 1, 1, 1]);
    elect(&mut l, 100_000);
    let term = l.state.current_term;
    let ok = AppendEntriesReply {
        term,
        success: true,
        replier_id: ProcessId(1),
        match_hint: 7,
        bitmap: None,
        max_commit: None,
        next_commit: None,
    };
    l.handle_append_entries_reply(ProcessId(1), &ok, 0);
    let lv = l.state.leader.as_ref().unwrap();
    assert_eq!(lv.match_index[1], 7);
    assert_eq!(lv.next_index[1], 8);

    l.state.leader.as_mut().unwrap().next_index[2] = 5;
    let fail = AppendEntriesReply {
        success: false,
        replier_id: ProcessId(2),
        match_hint: 7,
        ..ok.clone()
    };
    l.handle_append_entries_reply(ProcessId(2), &fail, 0);
    let out = l.take_outbox();
    assert_eq!(out.len(), 1);
    match &out[0].msg {
        Message::AppendEntries(m) => {
            assert_eq!(m.prev_log_index, 3);
            assert!(!m.is_gossip);
        }
        other => panic!("expected repair, got {other:?}"),
    }

    let newer = AppendEntriesReply {
        term: Term(term.0 + 1),
        ..fail
    };
    l.handle_append_entries_reply(ProcessId(2), &newer, 0);
    assert_eq!(l.state.role, Role::Follower);
    assert_eq!(l.state.current_term, Term(term.0 + 1));
    assert!(l.state.leader.is_none());
}

#[test]
fn leader_commit_needs_majority_in_current_term() {
    let mut l = with_log(5, Variant::Baseline, 0, 1, &[1, 1, 1]);
    elect(&mut l, 100_000);
    let t = l.state.current_term.0;
    l.state.log.append(LogEntry::new(Term(t), &b"a"[..])).unwrap();
    l.state.log.append(LogEntry::new(Term(t), &b"b"[..])).unwrap();
    let lv = l.state.leader.as_mut().unwrap();
    lv.match_index = vec![0, 5, 5, 3, 3];
    assert_eq!(l.advance_commit_leader(), 5);

    let mut l = with_log(5, Variant::Baseline, 0, 1, &[1, 1, 1]);
    elect(&mut l, 100_000);
    l.state.log.append(LogEntry::new(l.state.current_term, &b"a"[..])).unwrap();
    l.state.log.append(LogEntry::new(l.state.current_term, &b"b"[..])).unwrap();
    l.state.leader.as_mut().unwrap().match_index = vec![0, 5, 3, 3, 3];
    // index 3 is from an older term, so nothing moves
    assert_eq!(l.advance_commit_leader(), 0);
}

#[test]
fn votes() {
    let mut v = with_log(5, Variant::Baseline, 1, 3, &[1, 3, 3, 3, 3]);
    let rv = |term, cand, idx, lt| RequestVoteMsg {
        term: Term(term),
        candidate_id: ProcessId(cand),
        last_log_index: idx,
        last_log_term: Term(lt),
    };
    assert!(v.handle_request_vote(&rv(4, 2, 7, 3), 0).vote_granted);
    assert!(!v.handle_request_vote(&rv(4, 3, 7, 3), 0).vote_granted);
    assert!(v.handle_request_vote(&rv(4, 2, 7, 3), 0).vote_granted);

    let mut v = with_log(5, Variant::Baseline, 1, 3, &[3]);
    assert!(!v.handle_request_vote(&rv(4, 2, 9, 2), 0).vote_granted);
    assert_eq!(v.state.current_term, Term(4));
}

#[test]
fn election_and_heartbeats() {
    let mut f = node(5, Variant::Baseline, 0);
    let deadline = f.state.election_deadline;
    assert!(f.tick(deadline - 1).is_empty());
    let out = f.tick(deadline);
    assert_eq!(f.state.role, Role::Candidate);
    assert_eq!(f.state.current_term, Term(1));
    assert_eq!(out.len(), 4);
    assert!(out.iter().all(|e| matches!(e.msg, Message::RequestVote(_))));
    let again = f.state.election_deadline;
    assert!(again > deadline);
    f.tick(again);
    assert_eq!(f.state.current_term, Term(2));
}

#[test]
fn gossip_leader_rounds() {
    let mut l = node(5, Variant::V1, 0);
    elect(&mut l, 0);
    let now = l.state.heartbeat_due;
    // committed and idle: nothing before the idle period
    assert!(l.tick(now - 1).is_empty());
    l.handle_client_request(Bytes::from_static(b"a"), ClientTag { client: 0, seq: 0 }, now);
    assert!(l.state.heartbeat_due <= now);
    let out = l.tick(l.state.heartbeat_due);
    assert_eq!(out.len(), l.cfg.fanout);
    assert!(out.iter().all(|e| matches!(&e.msg, Message::AppendEntries(m) if m.is_gossip && m.entries.len() == 1)));
}

#[test]
fn apply_reports_origins() {
    let mut l = node(1, Variant::Baseline, 0);
    elect(&mut l, 0);
    let tag = ClientTag { client: 4, seq: 9 };
    assert_eq!(l.handle_client_request(Bytes::from_static(b"z"), tag, 0), ClientOutcome::Accepted(1));
    assert_eq!(l.state.commit_index, 1);
    let mut h = HistoryApplier::default();
    assert_eq!(l.apply_committed(&mut h).unwrap(), 1);
    assert_eq!(l.apply_committed(&mut h).unwrap(), 0);
    assert_eq!(l.take_responses(), vec![ClientResponse { tag, index: 1 }]);
}

#[test]
fn same_prefix_same_history() {
    let mut a = with_log(3, Variant::Baseline, 1, 1, &[1, 1, 1]);
    let mut b = with_log(3, Variant::Baseline, 2, 1, &[1, 1, 1, 1]);
    a.state.commit_index = 3;
    b.state.commit_index = 3;
    let (mut ha, mut hb) = (HistoryApplier::default(), HistoryApplier::default());
    a.apply_committed(&mut ha).unwrap();
    b.apply_committed(&mut hb).unwrap();
    assert_eq!(ha, hb);
}

#[test]
fn durable_image_survives_restore() {
    let mut f = with_log(3, Variant::V2, 1, 2, &[1, 2]);
    f.state.commit_index = 2;
    let img = f.durable_image();
    let r = Node::restore(ProcessId(1), NodeConfig::new(3, Variant::V2), img.clone(), 5, 0);
    assert_eq!(r.durable_image(), img);
    assert_eq!(r.state.commit_index, 0);
    assert_eq!(r.state.role, Role::Follower);
    let cs = r.state.commit_state.as_ref().unwrap();
    assert_eq!((cs.max_commit(), cs.next_commit()), (0, 1));
}
