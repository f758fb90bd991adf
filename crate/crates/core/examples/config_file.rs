//! An experiment described in TOML: a partition that heals, checked for
//! safety on every run.

use epiraft::config::ExperimentConfig;
use epiraft::experiment::{run_experiment, RunOptions};

const EXPERIMENT: &str = r#"
name = "partition-heal"
variants = ["baseline", "v2"]
n = [5]
seeds = [1, 2, 3]
duration_ms = 3000

[network]
loss = 0.02

[workload]
clients = 8

[[faults]]
at_ms = 800
action = "partition"
groups = [[0, 1], [2, 3, 4]]

[[faults]]
at_ms = 1800
action = "heal"
"#;

fn main() {
    let cfg = ExperimentConfig::from_toml(EXPERIMENT, "inline").expect("valid experiment");
    let report = run_experiment(&cfg, &RunOptions::default()).unwrap();
    print!("{}", report.table());
    print!("{}", report.verdict_text());
}
