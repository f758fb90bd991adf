//! Rounds of a permutation walker: F distinct peers per round, every peer
//! covered within ceil((n-1)/F) rounds.

use epiraft::gossip::PermutationWalker;
use epiraft::types::ProcessId;

fn main() {
    let (n, fanout) = (9, 3);
    let mut w = PermutationWalker::new(n, ProcessId(0), fanout, 7).expect("walker");
    println!("order {:?}", w.order().iter().map(|p| p.0).collect::<Vec<_>>());
    for round in 0..5 {
        let targets: Vec<u32> = w.next_targets().iter().map(|p| p.0).collect();
        println!("round {round}: {targets:?}");
    }
}
