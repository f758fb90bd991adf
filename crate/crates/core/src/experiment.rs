//! Runs an experiment matrix in parallel, safety-checks every run while
//! its trace streams past, and writes the result tables.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::checker::{Checker, Verdict};
use crate::config::{ExperimentConfig, FuzzSection};
use crate::metrics::{aggregate, compute_cdf, Cdf, CsvTable, MetricsReport, SummaryRow};
use crate::sim::{derive_seed, simulate_with, ScheduledFault, SimConfig, TraceLevel};
use crate::trace::{FaultAction, JsonlSink, Micros};
use crate::types::{ProcessId, Variant};

/// Points kept per run in the exported CDF tables.
pub const CDF_POINTS: usize = 1000;

const REPEAT_STREAM: u64 = 4;
const FUZZ_STREAM: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSpec {
    pub variant: Variant,
    pub n: usize,
    pub rate: Option<f64>,
    pub seed: u64,
    pub repeat: u32,
}

impl RunSpec {
    /// Seed of this run: the configured seed for the first repeat, a
    /// derived one for the others.
    pub fn run_seed(&self) -> u64 {
        if self.repeat == 0 {
            self.seed
        } else {
            derive_seed(self.seed, REPEAT_STREAM, self.repeat as u64)
        }
    }

    pub fn tag(&self) -> String {
        let rate = self.rate.map(|r| format!("-q{r}")).unwrap_or_default();
        format!("{}-n{}{rate}-s{}-r{}", self.variant, self.n, self.seed, self.repeat)
    }
}

/// Runs in output order: by cluster size, then rate, variant, seed, repeat.
pub fn plan(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut out = Vec::with_capacity(cfg.run_count());
    for &n in &cfg.n {
        for rate in cfg.workload.rate_points() {
            for &variant in &cfg.variants {
                for &seed in &cfg.seeds {
                    for repeat in 0..cfg.repeats {
                        out.push(RunSpec {
                            variant,
                            n,
                            rate,
                            seed,
                            repeat,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Random loss and fault schedule for one fuzzed run.
pub fn fuzz_schedule(f: &FuzzSection, n: usize, start_us: Micros, duration_us: Micros, seed: u64) -> (f64, Vec<ScheduledFault>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, FUZZ_STREAM, 0));
    let loss = if f.max_loss > 0.0 { rng.random_range(0.0..=f.max_loss) } else { 0.0 };
    let end = duration_us.saturating_sub((f.settle_ms * 1e3) as Micros);
    let start = start_us.min(end);
    let at = |rng: &mut ChaCha8Rng| if end > start { rng.random_range(start..end) } else { start };
    let mut faults = Vec::new();
    let crashes = rng.random_range(f.leader_crashes[0]..=f.leader_crashes[1]);
    for _ in 0..crashes {
        let t = at(&mut rng);
        faults.push(ScheduledFault {
            at_us: t,
            action: FaultAction::CrashLeader,
        });
        faults.push(ScheduledFault {
            at_us: (t + (f.downtime_ms * 1e3) as Micros).min(end),
            action: FaultAction::RecoverAll,
        });
    }
    if n > 1 {
        for _ in 0..f.partitions {
            let t = at(&mut rng);
            let mut ids: Vec<ProcessId> = (0..n).map(ProcessId::from).collect();
            ids.shuffle(&mut rng);
            let cut = rng.random_range(1..n);
            let (a, b) = ids.split_at(cut);
            faults.push(ScheduledFault {
                at_us: t,
                action: FaultAction::Partition {
                    groups: vec![a.to_vec(), b.to_vec()],
                },
            });
            faults.push(ScheduledFault {
                at_us: (t + (f.partition_ms * 1e3) as Micros).min(end),
                action: FaultAction::Heal,
            });
        }
    }
    faults.sort_by_key(|f| f.at_us);
    (loss, faults)
}

/// Complete simulator settings for one run.
pub fn prepare(cfg: &ExperimentConfig, spec: &RunSpec) -> SimConfig {
    let mut sim = cfg.sim_config(spec.variant, spec.n, spec.rate, spec.run_seed());
    if let Some(f) = &cfg.fuzz {
        let (loss, faults) = fuzz_schedule(f, spec.n, sim.workload.start_us, sim.duration_us, sim.seed);
        sim.loss = loss;
        sim.faults.extend(faults);
        sim.faults.sort_by_key(|f| f.at_us);
    }
    sim
}

#[derive(Debug)]
pub struct RunResult {
    pub spec: RunSpec,
    pub label: String,
    /// Absent when the run failed.
    pub metrics: Option<MetricsReport>,
    pub summary: Option<SummaryRow>,
    pub latency_cdf: Cdf,
    pub lag_cdf: Cdf,
    /// Absent when checking is off.
    pub verdict: Option<Verdict>,
    pub error: Option<String>,
    pub trace_file: Option<PathBuf>,
}

impl RunResult {
    pub fn safe(&self) -> bool {
        self.verdict.as_ref().is_none_or(Verdict::passed)
    }

    pub fn ok(&self) -> bool {
        self.error.is_none() && self.safe()
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where tables and traces go; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Worker threads; all cores when absent.
    pub jobs: Option<usize>,
    /// Keep per-request latencies and per-entry lag samples in the results.
    pub keep_samples: bool,
    /// One line per finished run on stderr.
    pub progress: bool,
}

/// Runs one cell of the matrix, streaming its trace into the checker and,
/// when `trace_dir` is given and tracing is on, into a JSONL file.
pub fn run_one(cfg: &ExperimentConfig, spec: &RunSpec, trace_dir: Option<&Path>, keep_samples: bool) -> RunResult {
    let mut sim = prepare(cfg, spec);
    let mut result = RunResult {
        spec: *spec,
        label: cfg.name.clone(),
        metrics: None,
        summary: None,
        latency_cdf: Cdf::Empty,
        lag_cdf: Cdf::Empty,
        verdict: None,
        error: None,
        trace_file: None,
    };
    if cfg.check && sim.trace == TraceLevel::Off {
        sim.trace = TraceLevel::State;
    }
    let checker = cfg.check.then(|| Checker::new(spec.n));
    let file = match trace_dir.filter(|_| cfg.trace != TraceLevel::Off) {
        Some(dir) => {
            let path = dir.join(format!("{}.jsonl", spec.tag()));
            match File::create(&path) {
                Ok(f) => {
                    result.trace_file = Some(path);
                    Some(JsonlSink::new(BufWriter::new(f)))
                }
                Err(e) => {
                    result.error = Some(format!("cannot create {}: {e}", path.display()));
                    return result;
                }
            }
        }
        None => None,
    };
    let (out, (checker, file)) = match simulate_with(sim, (checker, file)) {
        Ok(r) => r,
        Err(e) => {
            result.error = Some(e.to_string());
            return result;
        }
    };
    if let Some(f) = file {
        if let Err(e) = f.finish().and_then(|mut w| w.flush()) {
            result.error = Some(format!("trace write failed: {e}"));
        }
    }
    if let Some(mut c) = checker {
        c.check_final(&out.final_states, &out.histories);
        result.verdict = Some(c.finish());
    }
    if !out.conservation.balanced() {
        result.error = Some(format!("message accounting does not balance: {:?}", out.conservation));
    }
    let mut metrics = out.metrics;
    let latencies: Vec<f64> = metrics.latencies_us.iter().map(|l| *l as f64 / 1e3).collect();
    result.latency_cdf = compute_cdf(&latencies).thin(CDF_POINTS);
    result.lag_cdf = compute_cdf(&metrics.follower_lags_ms()).thin(CDF_POINTS);
    result.summary = Some(metrics.summary_row(&cfg.name, spec.repeat));
    if !keep_samples {
        metrics.latencies_us = Vec::new();
        metrics.commit_lag = Vec::new();
    }
    result.metrics = Some(metrics);
    result
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot start worker threads: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub name: String,
    pub runs: Vec<RunResult>,
    /// Means over the repeats of each (variant, n, rate).
    pub summary: Vec<SummaryRow>,
    /// All checker verdicts merged.
    pub verdict: Verdict,
}

/// Process exit status of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Passed,
    SafetyViolation,
    ConfigError,
    RunFailed,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Passed => 0,
            Outcome::SafetyViolation => 1,
            Outcome::ConfigError => 2,
            Outcome::RunFailed => 3,
        }
    }
}

impl ExperimentReport {
    pub fn outcome(&self) -> Outcome {
        if !self.verdict.passed() {
            Outcome::SafetyViolation
        } else if self.runs.iter().any(|r| r.error.is_some()) {
            Outcome::RunFailed
        } else {
            Outcome::Passed
        }
    }

    pub fn rows(&self) -> Vec<SummaryRow> {
        self.runs.iter().filter_map(|r| r.summary.clone()).collect()
    }

    /// Aggregated row for one variant and size (first rate point).
    pub fn row(&self, variant: Variant, n: usize) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == variant.as_str() && r.n == n)
    }

    /// Human-readable comparison table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<9} {:>4} {:>7} {:>9} {:>8} {:>8} {:>10} {:>9} {:>9} {:>8} {:>7}\n",
            "variant", "n", "rate", "thr/s", "lat ms", "p99 ms", "leader cpu", "fol cpu", "cpu/cmt", "lag ms", "terms"
        );
        for r in &self.summary {
            let rate = if r.rate_rps.is_nan() { "-".to_string() } else { format!("{}", r.rate_rps) };
            s.push_str(&format!(
                "{:<9} {:>4} {:>7} {:>9.1} {:>8.2} {:>8.2} {:>10.0} {:>9.0} {:>9.3} {:>8.2} {:>7}\n",
                r.variant,
                r.n,
                rate,
                r.throughput_rps,
                r.mean_latency_ms,
                r.p99_latency_ms,
                r.leader_cost,
                r.mean_follower_cost,
                r.leader_cost_per_commit,
                r.median_follower_lag_ms,
                r.term_changes
            ));
        }
        s
    }

    /// Verdict lines: overall, then every failed run.
    pub fn verdict_text(&self) -> String {
        let mut s = String::new();
        let checked = self.runs.iter().filter(|r| r.verdict.is_some()).count();
        s.push_str(&format!(
            "{} runs, {} safety-checked, {} violations, {} failed runs\n",
            self.runs.len(),
            checked,
            self.verdict.total,
            self.runs.iter().filter(|r| r.error.is_some()).count()
        ));
        for r in &self.runs {
            if let Some(e) = &r.error {
                s.push_str(&format!("FAILED {}: {e}\n", r.spec.tag()));
            }
            if let Some(v) = r.verdict.as_ref().filter(|v| !v.passed()) {
                for x in &v.violations {
                    s.push_str(&format!("UNSAFE {}: {x}\n", r.spec.tag()));
                }
            }
        }
        s
    }

    pub fn write(&self, cfg: &ExperimentConfig, dir: &Path) -> Result<(), ExperimentError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| ExperimentError::Io { path, source }
        };
        let table = |name: &str, f: &dyn Fn(&mut CsvTable) -> std::io::Result<()>| {
            let path = dir.join(name);
            let mut t = CsvTable::create(&path, name.trim_end_matches(".csv")).map_err(io(&path))?;
            f(&mut t).and_then(|_| t.finish()).map_err(io(&path))
        };
        table("summary.csv", &|t| t.summary(&self.summary))?;
        table("runs.csv", &|t| t.summary(&self.rows()))?;
        table("nodes.csv", &|t| {
            self.runs
                .iter()
                .filter_map(|r| Some((r, r.metrics.as_ref()?)))
                .try_for_each(|(r, m)| t.nodes(&r.label, m))
        })?;
        table("latency_cdf.csv", &|t| {
            self.runs
                .iter()
                .filter_map(|r| Some((r, r.metrics.as_ref()?)))
                .try_for_each(|(r, m)| t.cdf(&r.label, m, &r.latency_cdf))
        })?;
        table("commit_lag_cdf.csv", &|t| {
            self.runs
                .iter()
                .filter_map(|r| Some((r, r.metrics.as_ref()?)))
                .try_for_each(|(r, m)| t.cdf(&r.label, m, &r.lag_cdf))
        })?;
        let path = dir.join("verdict.txt");
        std::fs::write(&path, self.verdict_text()).map_err(io(&path))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, cfg.to_toml()).map_err(io(&path))?;
        Ok(())
    }
}

/// Runs every cell of the matrix. Results come back in [`plan`] order
/// whatever the parallelism, so output files are reproducible.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport, ExperimentError> {
    let trace_dir = match &opts.out_dir {
        Some(dir) => {
            let io = |source| ExperimentError::Io {
                path: dir.display().to_string(),
                source,
            };
            std::fs::create_dir_all(dir).map_err(io)?;
            if cfg.trace != TraceLevel::Off {
                std::fs::create_dir_all(dir.join("traces")).map_err(io)?;
                Some(dir.join("traces"))
            } else {
                None
            }
        }
        None => None,
    };
    let specs = plan(cfg);
    let total = specs.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(0))
        .build()?;
    let runs: Vec<RunResult> = pool.install(|| {
        specs
            .par_iter()
            .map(|spec| {
                let r = run_one(cfg, spec, trace_dir.as_deref(), opts.keep_samples);
                if opts.progress {
                    let k = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                    let status = match (&r.error, r.safe()) {
                        (Some(_), _) => "FAILED",
                        (None, false) => "UNSAFE",
                        (None, true) => "ok",
                    };
                    eprintln!("[{k}/{total}] {} {status}", spec.tag());
                }
                r
            })
            .collect()
    });
    let mut verdict = Verdict::default();
    for r in &runs {
        if let Some(v) = &r.verdict {
            verdict.absorb(v.clone());
        }
    }
    let rows: Vec<SummaryRow> = runs.iter().filter_map(|r| r.summary.clone()).collect();
    let report = ExperimentReport {
        name: cfg.name.clone(),
        summary: aggregate(&rows),
        runs,
        verdict,
    };
    if let Some(dir) = &opts.out_dir {
        report.write(cfg, dir)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    #[test]
    fn plan_covers_the_matrix() {
        let mut cfg = preset("cpu-vs-load").unwrap();
        cfg.seeds = vec![1, 2];
        let p = plan(&cfg);
        assert_eq!(p.len(), cfg.run_count());
        assert_eq!(p.len(), 3 * 4 * 2 * 2);
        assert_eq!(p[0].rate, Some(250.0));
        let seeds: std::collections::BTreeSet<u64> = p.iter().map(RunSpec::run_seed).collect();
        assert_eq!(seeds.len(), 4);
    }

    #[test]
    fn fuzz_schedule_stays_in_window() {
        let f = FuzzSection::default();
        for seed in 0..50 {
            let (loss, faults) = fuzz_schedule(&f, 5, 200_000, 3_000_000, seed);
            assert!((0.0..=0.2).contains(&loss));
            let crashes = faults.iter().filter(|x| x.action == FaultAction::CrashLeader).count();
            assert!((1..=3).contains(&crashes));
            assert!(faults.iter().all(|x| (200_000..=2_500_000).contains(&x.at_us)));
            assert!(faults.windows(2).all(|w| w[0].at_us <= w[1].at_us));
            assert_eq!(fuzz_schedule(&f, 5, 200_000, 3_000_000, seed).1, faults);
        }
    }

    #[test]
    fn smoke_preset_passes_and_is_reproducible() {
        let cfg = preset("smoke").unwrap();
        let one = run_experiment(&cfg, &RunOptions { jobs: Some(1), ..Default::default() }).unwrap();
        let many = run_experiment(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(one.outcome(), Outcome::Passed, "{}", one.verdict_text());
        assert_eq!(format!("{:?}", one.summary), format!("{:?}", many.summary));
        assert_eq!(one.summary.len(), 3);
        assert!(one.summary.iter().all(|r| r.completed > 0));
    }

    #[test]
    fn writes_tables_and_traces() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = preset("smoke").unwrap();
        cfg.variants = vec![Variant::V2];
        cfg.duration_ms = 600.0;
        cfg.trace = TraceLevel::Messages;
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let report = run_experiment(&cfg, &opts).unwrap();
        for f in ["summary.csv", "runs.csv", "nodes.csv", "latency_cdf.csv", "commit_lag_cdf.csv", "verdict.txt", "config.toml"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let trace = report.runs[0].trace_file.clone().unwrap();
        let offline = crate::checker::check_jsonl(std::io::BufReader::new(File::open(trace).unwrap())).unwrap();
        assert_eq!(Some(&offline), report.runs[0].verdict.as_ref());
        let head = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(head.starts_with("# epiraft-metrics v"));
    }
}
