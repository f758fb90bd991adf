//! One short run of each variant on five replicas.

use epiraft::sim::{simulate, SimConfig};
use epiraft::types::{ProcessId, Variant};

fn main() {
    for variant in Variant::ALL {
        let mut cfg = SimConfig::new(5, variant, 42);
        cfg.duration_us = 2_000_000;
        cfg.workload.clients = 10;
        cfg.initial_leader = Some(ProcessId(0));
        let out = simulate(cfg).expect("run");
        let m = &out.metrics;
        println!(
            "{variant:<8} {:>6.0} req/s  {:>5.2} ms mean latency  leader cost {:>6.0}  follower cost {:>6.0}",
            m.throughput(),
            m.mean_latency_ms(),
            m.leader_cost(),
            m.mean_follower_cost()
        );
    }
}
