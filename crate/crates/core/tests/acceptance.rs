//! Acceptance gate. Prints one `criterion N <name>: PASS|FAIL <measurements>`
//! line per criterion and exits non-zero when any of them fails. Arguments
//! not starting with `-` select criteria by substring.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use epiraft::checker::oracle::{random_script, run_script};
use epiraft::checker::Property;
use epiraft::config::{preset, ExperimentConfig};
use epiraft::experiment::{run_experiment, ExperimentReport, RunOptions};
use epiraft::sim::{TopologySpec, TraceLevel};
use epiraft::trace::FaultAction;
use epiraft::types::Variant;

type Outcome = (bool, String);
type Criterion = (u32, &'static str, fn() -> Outcome);

fn run(cfg: &ExperimentConfig) -> (ExperimentReport, Duration) {
    let t = Instant::now();
    let r = run_experiment(cfg, &RunOptions::default()).expect("experiment runs");
    (r, t.elapsed())
}

fn cpu_vs_replicas() -> &'static ExperimentReport {
    static R: OnceLock<ExperimentReport> = OnceLock::new();
    R.get_or_init(|| run(&preset("cpu-vs-replicas").unwrap()).0)
}

/// Least-squares line through `(x, y)`: slope, intercept and R².
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx, sxy * sxy / (sxx * syy))
}

fn criterion_1_safety_fuzz() -> Outcome {
    let cfg = preset("safety-fuzz").unwrap();
    let fuzz = cfg.fuzz.clone().unwrap();
    let (r, took) = run(&cfg);
    let mut per_variant: BTreeMap<Variant, usize> = BTreeMap::new();
    for run in &r.runs {
        *per_variant.entry(run.spec.variant).or_default() += 1;
    }
    let checked = r.runs.iter().filter(|x| x.verdict.is_some()).count();
    let failed = r.runs.iter().filter(|x| x.error.is_some()).count();
    let enough = per_variant.len() == 3 && per_variant.values().all(|c| *c >= 100);
    let shape = fuzz.max_loss >= 0.2 && fuzz.leader_crashes == [1, 3] && fuzz.partitions == 1;
    let pass = enough && shape && checked == r.runs.len() && failed == 0 && r.verdict.passed() && took < Duration::from_secs(600);
    (
        pass,
        format!(
            "{} runs {:?}, n {:?}, {checked} checked, {} violations, {failed} failed runs, {:.1}s",
            r.runs.len(),
            per_variant,
            cfg.n,
            r.verdict.total,
            took.as_secs_f64()
        ),
    )
}

fn criterion_2_commit_oracle() -> Outcome {
    let mut scripts = 0;
    let mut divergences = Vec::new();
    for (n, count) in [(3, 1000), (1, 50), (2, 100), (4, 100), (5, 200), (7, 100)] {
        for seed in 0..count {
            let script = random_script(n, 150, 10_000 + seed);
            if let Err(f) = run_script(n, &script) {
                divergences.push(format!("n={n} seed={seed}: {f:?}"));
            }
            scripts += 1;
        }
    }
    // The ordering invariant is also checked on every commit-state change
    // of every fuzzed run.
    let mut cfg = preset("safety-fuzz").unwrap();
    cfg.variants = vec![Variant::V2];
    let (r, _) = run(&cfg);
    let ordering = r.verdict.count(Property::CommitOrder);
    let pass = scripts >= 1000 && divergences.is_empty() && ordering == 0 && r.verdict.passed();
    (
        pass,
        format!(
            "{scripts} scripts, {} divergences{}; {} fuzzed v2 runs, {ordering} commit-order violations",
            divergences.len(),
            divergences.first().map(|d| format!(" (first: {d})")).unwrap_or_default(),
            r.runs.len()
        ),
    )
}

fn criterion_3_throughput() -> Outcome {
    let cfg = preset("large-throughput").unwrap();
    assert_eq!((cfg.n.as_slice(), cfg.workload.clients), (&[51][..], 100));
    let (r, took) = run(&cfg);
    let thr = |v| r.row(v, 51).unwrap().throughput_rps;
    let (base, v1, v2) = (thr(Variant::Baseline), thr(Variant::V1), thr(Variant::V2));
    let pass = v1 >= 2.0 * base && took < Duration::from_secs(300) && r.verdict.passed();
    (
        pass,
        format!(
            "n=51, 100 clients: v1 {v1:.0} rps vs baseline {base:.0} rps = {:.1}x (need >= 2x); v2 {v2:.0} rps; {:.1}s",
            v1 / base,
            took.as_secs_f64()
        ),
    )
}

fn criterion_4_leader_load() -> Outcome {
    let r = cpu_vs_replicas();
    let base = r.row(Variant::Baseline, 51).unwrap();
    let v2 = r.row(Variant::V2, 51).unwrap();
    let per_entry = v2.leader_cost_per_commit / base.leader_cost_per_commit;
    let vs_followers = v2.leader_cost / v2.mean_follower_cost;
    let pass = per_entry <= 0.5 && vs_followers <= 1.5;
    (
        pass,
        format!(
            "n=51: v2 leader {:.2} vs baseline {:.2} units/commit = {per_entry:.3}x (need <= 0.5); \
             v2 leader {:.0} vs mean follower {:.0} units = {vs_followers:.3}x (need <= 1.5)",
            v2.leader_cost_per_commit, base.leader_cost_per_commit, v2.leader_cost, v2.mean_follower_cost
        ),
    )
}

fn criterion_5_scalability_shape() -> Outcome {
    let r = cpu_vs_replicas();
    let ns = [5usize, 11, 21, 51];
    let x: Vec<f64> = ns.iter().map(|n| *n as f64).collect();
    let base: Vec<f64> = ns.iter().map(|n| r.row(Variant::Baseline, *n).unwrap().leader_cost).collect();
    let v2: Vec<f64> = ns
        .iter()
        .map(|n| {
            let row = r.row(Variant::V2, *n).unwrap();
            (row.leader_cost + row.mean_follower_cost * (*n - 1) as f64) / *n as f64
        })
        .collect();
    // Superlinear: growth exponent of a power-law fit above 1.
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = base.iter().map(|v| v.ln()).collect();
    let (exponent, _, _) = linear_fit(&lx, &ly);
    let (slope, icept, r2) = linear_fit(&x, &v2);
    let worst = x
        .iter()
        .zip(&v2)
        .map(|(a, b)| ((b - (slope * a + icept)) / (slope * a + icept)).abs())
        .fold(0.0, f64::max);
    let per_entry: Vec<String> = ns
        .iter()
        .map(|n| format!("{:.1}", r.row(Variant::Baseline, *n).unwrap().leader_cost_per_commit))
        .collect();
    let pass = exponent > 1.0 && r2 >= 0.95 && worst <= 0.2;
    (
        pass,
        format!(
            "baseline leader cost {:?} over n {ns:?}: exponent {exponent:.2} (need > 1; per commit {per_entry:?}); \
             v2 per-node cost {:?}: linear R² {r2:.3} (need >= 0.95), worst deviation {:.0}% (need <= 20%)",
            base.iter().map(|v| v.round()).collect::<Vec<_>>(),
            v2.iter().map(|v| v.round()).collect::<Vec<_>>(),
            worst * 100.0
        ),
    )
}

fn criterion_6_commit_lag() -> Outcome {
    let cfg = preset("commit-lag-cdf").unwrap();
    assert_eq!(cfg.seeds.len() * cfg.repeats as usize, 1);
    let (r, _) = run(&cfg);
    let lag = |v| r.row(v, 51).unwrap().median_follower_lag_ms;
    let (base, v1, v2) = (lag(Variant::Baseline), lag(Variant::V1), lag(Variant::V2));
    let ahead = r.row(Variant::V2, 51).unwrap().followers_ahead;
    let pass = v2 <= v1 && v1 <= base && ahead >= 1;
    (
        pass,
        format!(
            "median follower lag ms: v2 {v2:.2}, v1 {v1:.2}, baseline {base:.2} (need v2 <= v1 <= baseline); \
             v2 follower commits at or before the leader: {ahead} (need >= 1)"
        ),
    )
}

fn criterion_7_non_transitive() -> Outcome {
    let cfg = preset("non-transitive").unwrap();
    let n = cfg.n[0];
    let reach = cfg
        .faults
        .iter()
        .find_map(|f| match &f.action {
            FaultAction::SetTopology { topology } => Some(topology.clone()),
            _ => None,
        })
        .expect("topology change");
    let TopologySpec::LeaderLimited { hub, reach: k } = reach.clone() else { panic!("unexpected topology") };
    let t = reach.build(n).unwrap();
    let followers: Vec<usize> = (0..n).filter(|i| *i != hub.index()).collect();
    let follower_graph_connected = {
        let mut seen = vec![followers[0]];
        let mut i = 0;
        while i < seen.len() {
            let a = seen[i];
            for &b in &followers {
                if !seen.contains(&b) && t.reachable(a, b) && t.reachable(b, a) {
                    seen.push(b);
                }
            }
            i += 1;
        }
        seen.len() == followers.len()
    };
    let (r, _) = run(&cfg);
    let changes = |v| -> Vec<u64> {
        r.runs
            .iter()
            .filter(|x| x.spec.variant == v)
            .map(|x| x.summary.as_ref().unwrap().term_changes)
            .collect()
    };
    let (base, v1, v2) = (changes(Variant::Baseline), changes(Variant::V1), changes(Variant::V2));
    let pass = k == n.div_ceil(4)
        && follower_graph_connected
        && cfg.duration_ms >= 60_000.0
        && v1.iter().chain(&v2).all(|c| *c == 0)
        && base.iter().any(|c| *c >= 1)
        && r.verdict.passed();
    (
        pass,
        format!(
            "n={n}, leader reaches {k} followers, {:.0}s per run; term changes after the first election per seed: \
             v1 {v1:?}, v2 {v2:?} (need all 0), baseline {base:?} (need >= 1)",
            cfg.duration_ms / 1e3
        ),
    )
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let name = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(name, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_8_determinism() -> Outcome {
    let mut smoke = preset("smoke").unwrap();
    smoke.trace = TraceLevel::Messages;
    let mut fuzz = preset("safety-fuzz").unwrap();
    fuzz.n = vec![5, 9];
    fuzz.seeds = vec![3, 4];
    fuzz.trace = TraceLevel::State;
    let mut lines = Vec::new();
    let mut pass = true;
    for cfg in [smoke, fuzz] {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for (dir, jobs) in dirs.iter().zip([Some(1), None]) {
            let opts = RunOptions {
                out_dir: Some(dir.path().to_path_buf()),
                jobs,
                ..RunOptions::default()
            };
            run_experiment(&cfg, &opts).unwrap();
        }
        let (a, b) = (files(dirs[0].path()), files(dirs[1].path()));
        let traces = a.keys().filter(|k| k.ends_with(".jsonl")).count();
        let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
        let same = a.len() == b.len() && differing.is_empty() && traces == cfg.run_count();
        pass &= same;
        lines.push(format!(
            "{}: {} files ({traces} traces) identical across reruns: {same}{}",
            cfg.name,
            a.len(),
            if differing.is_empty() { String::new() } else { format!(" (differ: {differing:?})") }
        ));
    }
    (pass, lines.join("; "))
}

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "safety fuzz", criterion_1_safety_fuzz),
        (2, "commit oracle", criterion_2_commit_oracle),
        (3, "throughput", criterion_3_throughput),
        (4, "leader load", criterion_4_leader_load),
        (5, "scalability shape", criterion_5_scalability_shape),
        (6, "commit lag", criterion_6_commit_lag),
        (7, "non-transitive availability", criterion_7_non_transitive),
        (8, "determinism", criterion_8_determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let (mut passed, mut failed) = (0, 0);
    for (n, name, check) in criteria {
        let id = format!("criterion_{n}_{}", name.replace(' ', "_"));
        if !filters.is_empty() && !filters.iter().any(|f| id.contains(f.as_str())) {
            continue;
        }
        let (pass, detail) = check();
        println!("criterion {n} {name}: {}  {detail}", if pass { "PASS" } else { "FAIL" });
        if pass {
            passed += 1;
        } else {
            failed += 1;
        }
    }
    println!("acceptance: {passed} passed, {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
