//! Hand-written traces the checker must reject.

use epiraft::checker::check_trace;
use epiraft::raft::Role;
use epiraft::trace::{Trace, TraceEvent, TraceHeader};
use epiraft::types::{Term, Variant};

fn main() {
    let mut t = Trace::new(TraceHeader::new(3, Variant::Baseline, 0));
    let lead = |term| TraceEvent::Role { role: Role::Leader, term: Term(term) };
    t.push(10, Some(0.into()), lead(1));
    t.push(20, Some(1.into()), lead(1));
    println!("two leaders in term 1 -> {}", check_trace(&t));

    let mut t = Trace::new(TraceHeader::new(3, Variant::V2, 0));
    t.push(10, Some(0.into()), lead(1));
    t.push(30, Some(0.into()), TraceEvent::Commit { commit_index: 1 });
    println!("commit of an entry nobody holds -> {}", check_trace(&t));
}
