//! The leader can reach only a quarter of its followers directly. Gossip
//! relays keep V1/V2 followers hearing from it; Baseline followers time out.

use epiraft::sim::{simulate, ScheduledFault, SimConfig, TopologySpec};
use epiraft::trace::FaultAction;
use epiraft::types::{ProcessId, Variant};

fn main() {
    let n = 21;
    for variant in Variant::ALL {
        let mut cfg = SimConfig::new(n, variant, 1);
        cfg.duration_us = 10_000_000;
        cfg.node.fanout = 5;
        cfg.workload.clients = 10;
        cfg.initial_leader = Some(ProcessId(0));
        cfg.faults.push(ScheduledFault {
            at_us: 1_000_000,
            action: FaultAction::SetTopology {
                topology: TopologySpec::LeaderLimited { hub: ProcessId(0), reach: n.div_ceil(4) },
            },
        });
        cfg.trace = epiraft::sim::TraceLevel::Off;
        let m = simulate(cfg).expect("run").metrics;
        println!(
            "{variant:<8} leader changes {:>2}  committed {:>6}  unreachable sends {}",
            m.term_changes(),
            m.committed,
            m.messages.unreachable
        );
    }
}
