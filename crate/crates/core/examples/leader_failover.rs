//! Crash the leader mid-run and print the election timeline.

use epiraft::checker::check_trace;
use epiraft::raft::Role;
use epiraft::sim::{simulate, ScheduledFault, SimConfig};
use epiraft::trace::{FaultAction, TraceEvent};
use epiraft::types::{ProcessId, Variant};

fn main() {
    for variant in Variant::ALL {
        let mut cfg = SimConfig::new(5, variant, 3);
        cfg.duration_us = 1_500_000;
        cfg.workload.clients = 5;
        cfg.initial_leader = Some(ProcessId(0));
        cfg.faults = vec![
            ScheduledFault { at_us: 500_000, action: FaultAction::CrashLeader },
            ScheduledFault { at_us: 1_000_000, action: FaultAction::RecoverAll },
        ];
        let out = simulate(cfg).expect("run");
        let trace = out.trace.as_ref().unwrap();
        print!("{variant:<8}");
        for r in &trace.records {
            match (&r.event, r.node) {
                (TraceEvent::Role { role: Role::Leader, term }, Some(p)) => {
                    print!("  {:.1}ms: {p} leads {term}", r.time as f64 / 1e3)
                }
                (TraceEvent::Crash, Some(p)) => print!("  {:.1}ms: {p} crashes", r.time as f64 / 1e3),
                _ => {}
            }
        }
        println!("\n         {} requests completed, checker: {}", out.metrics.completed, check_trace(trace));
    }
}
