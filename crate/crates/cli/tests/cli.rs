use std::path::PathBuf;
use std::process::{Command, Output};

use clap::Parser;
use proptest::prelude::*;

use cyclic_bench::{sequential, KernelName, KernelSpec};
use cyclic_cli::args::{Cli, Command as Sub, VerifyArgs};
use cyclic_cli::report::{normalize, read_rows, run_sweep, Machine, Row};
use cyclic_cli::verify::battery;

fn cyclic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclic"))
        .args(args)
        .env_remove("CYCLIC_TASKS_SEED")
        .output()
        .expect("spawn cyclic")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cyclic-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let p = dir.join(name);
    let _ = std::fs::remove_file(&p);
    p
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let out = cyclic(&["run", "--kernel", "heat", "--variant", "fastest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("taskiter-is-bypass"));
}

#[test]
fn invalid_geometry_fails_cleanly() {
    let out = cyclic(&["run", "--kernel", "heat", "--grid", "20", "--block", "7", "--variant", "tasks"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn run_appends_rows_and_checksum_matches_reference() {
    let csv = scratch("run.csv");
    let args = [
        "run", "--kernel", "heat", "--grid", "24", "--block", "4", "--iters", "5", "--variant", "taskiter-is",
        "--threads", "2", "--reps", "2", "--seed", "3", "--csv", csv.to_str().unwrap(),
    ];
    for _ in 0..2 {
        let out = cyclic(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let stdout = String::from_utf8(out.stdout).unwrap();
        assert_eq!(stdout.lines().count(), 3);
        assert!(stdout.starts_with("kernel,variant,workers,block,"));
    }
    let rows = read_rows(&csv).unwrap();
    assert_eq!(rows.len(), 4);
    let want = sequential(&KernelSpec::new(KernelName::Heat, 24, 4, 5).seed(3)).unwrap();
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.checksum, format!("{:016x}", want.checksum));
        assert_eq!(r.rep, i % 2);
        assert_eq!((r.variant.as_str(), r.workers, r.iterations), ("taskiter-is", 2, 5));
        assert!(r.normalized.is_none());
    }
}

#[test]
fn verify_defaults() {
    let cli = Cli::try_parse_from(["cyclic", "verify"]).unwrap();
    let Sub::Verify(v) = cli.command else { panic!() };
    assert_eq!((v.cases, v.threads), (1000, 4));
}

#[test]
fn trace_round_trip_through_trace_stats() {
    let trace = scratch("run.jsonl");
    let out = cyclic(&[
        "run", "--kernel", "multisaxpy", "--grid", "64", "--block", "8", "--iters", "4", "--variant", "taskiter",
        "--threads", "2", "--trace", trace.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let out = cyclic(&["trace-stats", "--json", trace.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["executions"], 32);
    assert_eq!(v["created"], 8);
    assert_eq!(v["labels"]["saxpy"]["count"], 32);
    let out = cyclic(&["trace-stats", trace.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("executions"));
}

#[test]
fn malformed_trace_reports_line() {
    let p = scratch("bad.jsonl");
    std::fs::write(
        &p,
        "{\"ev\":\"create\",\"task\":1,\"label\":\"x\",\"worker\":0,\"iter\":0,\"t_ns\":5}\nnot json\n",
    )
    .unwrap();
    let out = cyclic(&["trace-stats", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn verify_passes_and_catches_injected_fault() {
    let ok = cyclic(&["verify", "--cases", "150"]);
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(ok.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6);
    let bad = cyclic(&["verify", "--cases", "150", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(1));
    let text = String::from_utf8_lossy(&bad.stdout);
    assert!(text.lines().any(|l| l.starts_with("FAIL order-audit")), "{text}");
    assert!(text.lines().any(|l| l.starts_with("FAIL graph-random-programs")), "{text}");
}

#[test]
fn battery_counts_are_deterministic() {
    let args = VerifyArgs {
        cases: 60,
        seed: 11,
        threads: 3,
        inject_fault: false,
    };
    let a: Vec<_> = battery(&args).iter().map(|p| (p.name, p.checked, p.passed())).collect();
    let b: Vec<_> = battery(&args).iter().map(|p| (p.name, p.checked, p.passed())).collect();
    assert_eq!(a, b);
    assert!(a.iter().all(|p| p.2));
}

fn sweep_args(threads: &str) -> cyclic_cli::args::SweepArgs {
    let cli = Cli::try_parse_from([
        "cyclic", "sweep", "--kernel", "heat", "--grid", "24", "--iters", "4", "--blocks", "4,8", "--threads",
        threads, "--seed", "5",
    ])
    .unwrap();
    match cli.command {
        Sub::Sweep(s) => s,
        _ => unreachable!(),
    }
}

fn stable(r: &Row, single: bool) -> impl PartialEq + std::fmt::Debug {
    (
        r.kernel.clone(),
        r.variant.clone(),
        r.workers,
        r.block,
        r.iterations,
        r.tasks_created,
        r.tasks_popped + r.bypasses,
        r.checksum.clone(),
        single.then_some((r.scheduler_entries, r.bypasses)),
    )
}

#[test]
fn sweep_is_deterministic() {
    for threads in ["1", "1,3"] {
        let m = Machine::detect();
        let a = run_sweep(&sweep_args(threads), &m).unwrap();
        let b = run_sweep(&sweep_args(threads), &m).unwrap();
        assert_eq!(a.len(), 2 * 7 * threads.split(',').count());
        for (x, y) in a.iter().zip(&b) {
            let single = x.workers == 1;
            assert_eq!(stable(x, single), stable(y, single));
        }
        let best = a.iter().filter_map(|r| r.normalized).fold(0.0, f64::max);
        assert_eq!(best, 1.0);
    }
}

fn row(kernel: &str, fom: f64) -> Row {
    Row {
        kernel: kernel.into(),
        variant: "tasks".into(),
        workers: 1,
        block: 1,
        size: 1,
        iterations: 1,
        rep: 0,
        seed: 0,
        wall_ms: 1.0,
        figure_of_merit: fom,
        fom_unit: "x/s".into(),
        tasks_created: 0,
        scheduler_entries: 0,
        tasks_popped: 0,
        bypasses: 0,
        checksum: String::new(),
        cpus: 1,
        cpu_model: String::new(),
        normalized: None,
    }
}

proptest! {
    #[test]
    fn normalized_is_relative_to_kernel_best(foms in prop::collection::vec((0usize..3, 0.0f64..1e9), 1..30)) {
        let names = ["heat", "nbody", "cg_lite"];
        let mut rows: Vec<Row> = foms.iter().map(|&(k, f)| row(names[k], f)).collect();
        normalize(&mut rows);
        for k in names {
            let mine: Vec<&Row> = rows.iter().filter(|r| r.kernel == k).collect();
            let Some(best) = mine.iter().map(|r| r.figure_of_merit).reduce(f64::max) else { continue };
            for r in &mine {
                let n = r.normalized.unwrap();
                prop_assert!((0.0..=1.0).contains(&n));
                if best > 0.0 {
                    prop_assert!((n * best - r.figure_of_merit).abs() <= 1e-9 * best);
                }
            }
            if best > 0.0 {
                prop_assert!(mine.iter().any(|r| r.normalized == Some(1.0)));
            }
        }
    }
}
