//! Decentralized commit on three replicas: appends and field exchanges,
//! with each step checked against the reference model.

use epiraft::checker::oracle::{random_script, run_script, ScriptEvent::*};

fn main() {
    let script = [
        NewTerm { node: 0, term: 1 },
        NewTerm { node: 1, term: 1 },
        NewTerm { node: 2, term: 1 },
        Append { node: 0 },
        Append { node: 1 },
        Deliver { from: 0, to: 1 },
        Deliver { from: 1, to: 2 },
        Append { node: 2 },
        Deliver { from: 2, to: 0 },
    ];
    let states = run_script(3, &script).expect("engine matches the reference");
    for (ev, s) in script.iter().zip(&states) {
        let cols: Vec<String> = s
            .iter()
            .map(|r| {
                let bits: String = r.bitmap.iter().map(|b| if *b { '1' } else { '0' }).collect();
                format!("{bits} mc={} nc={} ci={}", r.max_commit, r.next_commit, r.commit_index)
            })
            .collect();
        println!("{:<28} {}", format!("{ev:?}"), cols.join(" | "));
    }

    let agreeing = (0..200).filter(|seed| run_script(5, &random_script(5, 200, *seed)).is_ok()).count();
    println!("{agreeing}/200 random scripts on five replicas agree with the reference");
}
