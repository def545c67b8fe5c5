//! `trace-stats`: summary of a JSONL trace.

use std::fs::File;
use std::io::BufReader;
use std::process::ExitCode;

use cyclic_tasks::trace::{read_jsonl, summarize, TraceSummary};

use crate::args::TraceStatsArgs;

pub fn render(s: &TraceSummary) -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: String| out.push_str(&format!("{k:<22}{v}\n"));
    line("events", s.events.to_string());
    line("tasks created", s.created.to_string());
    line("executions", s.executions.to_string());
    line("span ms", format!("{:.3}", s.span_ns as f64 / 1e6));
    line("overlapping pairs", s.overlap_pairs.to_string());
    line(
        "creator",
        s.creator.map_or_else(|| "-".to_string(), |c| c.to_string()),
    );
    line("starvation gaps", s.starvation_gaps.to_string());
    line("starvation idle ms", format!("{:.3}", s.starvation_idle_ns as f64 / 1e6));
    for w in &s.workers {
        line(
            &format!("worker {}", w.worker),
            format!("{} tasks, {:.1}% busy", w.executions, 100.0 * w.utilization),
        );
    }
    for (label, l) in &s.labels {
        line(
            &format!("label {label}"),
            format!("{} runs, {:.3} ms", l.count, l.total_ns as f64 / 1e6),
        );
    }
    out
}

pub fn cmd_trace_stats(a: &TraceStatsArgs) -> Result<ExitCode, String> {
    let f = File::open(&a.path).map_err(|e| format!("{}: {e}", a.path.display()))?;
    let events = read_jsonl(BufReader::new(f)).map_err(|e| format!("{}: {e}", a.path.display()))?;
    let s = summarize(&events)?;
    if a.json {
        let json = serde_json::to_string_pretty(&s).map_err(|e| e.to_string())?;
        crate::emit_stdout(&(json + "\n"))?;
    } else {
        crate::emit_stdout(&render(&s))?;
    }
    Ok(ExitCode::SUCCESS)
}
