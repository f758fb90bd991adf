//! Stream a run's trace to a JSONL file and through the safety checker at
//! the same time, then re-check the file offline.

use std::fs::File;
use std::io::{BufReader, BufWriter};

use epiraft::checker::{check_jsonl, Checker};
use epiraft::sim::{simulate_with, SimConfig, TraceLevel};
use epiraft::trace::JsonlSink;
use epiraft::types::Variant;

fn main() {
    let path = std::env::temp_dir().join("epiraft-stream.jsonl");
    let mut cfg = SimConfig::new(7, Variant::V2, 5);
    cfg.workload.clients = 5;
    cfg.loss = 0.05;
    cfg.trace = TraceLevel::Messages;
    let file = JsonlSink::new(BufWriter::new(File::create(&path).unwrap()));
    let (out, (mut checker, file)) = simulate_with(cfg, (Checker::new(7), file)).expect("run");
    file.finish().unwrap();
    checker.check_final(&out.final_states, &out.histories);
    println!("streaming: {}", checker.finish());
    let offline = check_jsonl(BufReader::new(File::open(&path).unwrap())).unwrap();
    println!("offline:   {offline}  ({})", path.display());
}
