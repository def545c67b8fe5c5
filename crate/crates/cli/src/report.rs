//! `run` and `sweep`: CSV rows per repetition.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use serde::{Deserialize, Serialize};

use cyclic_bench::{run_cell, sequential, KernelSpec, Outcome, RunOptions};
use cyclic_tasks::trace::write_jsonl;
use cyclic_tasks::{TraceEvent, Variant};

use crate::args::{PolicyArgs, RunArgs, SweepArgs};

/// One CSV row. Column order is the field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub kernel: String,
    pub variant: String,
    pub workers: usize,
    pub block: usize,
    pub size: usize,
    pub iterations: u64,
    pub rep: usize,
    pub seed: u64,
    pub wall_ms: f64,
    pub figure_of_merit: f64,
    pub fom_unit: String,
    pub tasks_created: u64,
    pub scheduler_entries: u64,
    pub tasks_popped: u64,
    pub bypasses: u64,
    pub checksum: String,
    pub cpus: usize,
    pub cpu_model: String,
    /// Figure of merit over the best of the same kernel in the sweep.
    pub normalized: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Machine {
    pub cpus: usize,
    pub model: String,
}

impl Machine {
    pub fn detect() -> Self {
        let model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|m| m.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Machine {
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            model,
        }
    }
}

/// A cell whose checksum differs from the sequential reference.
#[derive(Debug)]
pub struct Mismatch {
    pub row: Row,
    pub expected: Outcome,
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} workers={} block={}: checksum {} after {} iterations, reference {:016x} after {}",
            self.row.kernel,
            self.row.variant,
            self.row.workers,
            self.row.block,
            self.row.checksum,
            self.row.iterations,
            self.expected.checksum,
            self.expected.iterations
        )
    }
}

fn options(policy: &PolicyArgs, seed: u64, trace: bool) -> RunOptions {
    RunOptions {
        unroll: policy.unroll,
        update: policy.update,
        skip_probability: policy.is_skip_prob,
        trace,
        seed,
        drop_cross_edge: None,
    }
}

/// Runs one cell `reps` times, checking every repetition against `expected`.
pub fn run_reps(
    spec: &KernelSpec,
    variant: Variant,
    workers: usize,
    opts: &RunOptions,
    reps: usize,
    expected: &Outcome,
    machine: &Machine,
) -> Result<(Vec<Row>, Vec<TraceEvent>), String> {
    let mut rows = Vec::new();
    let mut last_trace = Vec::new();
    for rep in 0..reps.max(1) {
        let r = run_cell(spec, variant, workers, opts)?;
        let t = &r.metrics.telemetry;
        let row = Row {
            kernel: spec.kernel.to_string(),
            variant: variant.to_string(),
            workers,
            block: spec.block,
            wall_ms: r.wall_ns as f64 / 1e6,
            figure_of_merit: r.figure_of_merit,
            tasks_created: t.tasks_created,
            scheduler_entries: t.scheduler_entries,
            bypasses: t.bypasses,
            checksum: format!("{:016x}", r.checksum),
            tasks_popped: t.tasks_popped,
            iterations: r.iterations,
            size: spec.size,
            rep,
            seed: spec.seed,
            fom_unit: spec.kernel.fom_unit().to_string(),
            cpus: machine.cpus,
            cpu_model: machine.model.clone(),
            normalized: None,
        };
        if r.checksum != expected.checksum || r.iterations != expected.iterations {
            return Err(Mismatch {
                row,
                expected: expected.clone(),
            }
            .to_string());
        }
        rows.push(row);
        last_trace = r.trace;
    }
    Ok((rows, last_trace))
}

/// Sets the normalized column: figure of merit over the best of its kernel.
pub fn normalize(rows: &mut [Row]) {
    let mut best: HashMap<String, f64> = HashMap::new();
    for r in rows.iter() {
        let b = best.entry(r.kernel.clone()).or_insert(0.0);
        *b = b.max(r.figure_of_merit);
    }
    for r in rows.iter_mut() {
        let b = best[&r.kernel];
        r.normalized = Some(if b > 0.0 { r.figure_of_merit / b } else { 0.0 });
    }
}

pub fn write_rows<W: Write>(out: W, rows: &[Row], header: bool) -> io::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    for r in rows {
        w.serialize(r).map_err(io::Error::other)?;
    }
    w.flush()
}

fn append_csv(path: &Path, rows: &[Row]) -> io::Result<()> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let f = OpenOptions::new().create(true).append(true).open(path)?;
    write_rows(BufWriter::new(f), rows, fresh)
}

pub fn read_rows(path: &Path) -> Result<Vec<Row>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    r.deserialize().map(|x| x.map_err(|e| e.to_string())).collect()
}

fn emit(rows: &[Row], csv: Option<&Path>) -> Result<(), String> {
    let mut buf = Vec::new();
    write_rows(&mut buf, rows, true).map_err(|e| e.to_string())?;
    crate::emit_stdout(&String::from_utf8_lossy(&buf))?;
    if let Some(p) = csv {
        append_csv(p, rows).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    Ok(())
}

pub fn cmd_run(a: &RunArgs) -> Result<ExitCode, String> {
    let spec = a.problem.spec(a.block);
    let expected = sequential(&spec)?;
    let machine = Machine::detect();
    let opts = options(&a.policy, spec.seed, a.trace.is_some());
    let (rows, trace) = run_reps(&spec, a.variant, a.threads, &opts, a.policy.reps, &expected, &machine)?;
    if let Some(p) = &a.trace {
        let f = File::create(p).map_err(|e| format!("{}: {e}", p.display()))?;
        write_jsonl(&trace, BufWriter::new(f)).map_err(|e| e.to_string())?;
    }
    emit(&rows, a.policy.csv.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

/// Runs a sweep plan and returns its rows with the normalized column set.
pub fn run_sweep(a: &SweepArgs, machine: &Machine) -> Result<Vec<Row>, String> {
    let variants = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants.clone()
    };
    let mut rows = Vec::new();
    for &block in &a.blocks {
        let spec = a.problem.spec(Some(block));
        let expected = sequential(&spec)?;
        for &v in &variants {
            for &w in &a.threads {
                let opts = options(&a.policy, spec.seed, false);
                let (r, _) = run_reps(&spec, v, w, &opts, a.policy.reps, &expected, machine)?;
                rows.extend(r);
            }
        }
    }
    normalize(&mut rows);
    Ok(rows)
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<ExitCode, String> {
    let rows = run_sweep(a, &Machine::detect())?;
    emit(&rows, a.policy.csv.as_deref())?;
    Ok(ExitCode::SUCCESS)
}
