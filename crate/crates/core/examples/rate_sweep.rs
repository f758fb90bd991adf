//! Sweep the offered load over three rates and write the CSV tables.

use epiraft::config::preset;
use epiraft::experiment::{run_experiment, RunOptions};
use epiraft::types::Variant;

fn main() {
    let mut cfg = preset("cpu-vs-load").unwrap();
    cfg.n = vec![11];
    cfg.repeats = 1;
    cfg.duration_ms = 2_000.0;
    cfg.workload.rates = vec![200.0, 800.0, 3_200.0];
    cfg.variants = vec![Variant::Baseline, Variant::V2];
    let out = std::env::temp_dir().join("epiraft-rate-sweep");
    let report = run_experiment(&cfg, &RunOptions { out_dir: Some(out.clone()), ..Default::default() }).unwrap();
    print!("{}", report.table());
    println!("tables in {}", out.display());
}
