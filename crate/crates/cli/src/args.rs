use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use cyclic_bench::{KernelName, KernelSpec};
use cyclic_tasks::Variant;

#[derive(Debug, Parser)]
#[command(name = "cyclic", version, about = "Benchmarks for the cyclic-tasks runtime")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one kernel under one variant and print a CSV row per repetition.
    Run(RunArgs),
    /// Run every (block, variant, threads) cell of a plan.
    Sweep(SweepArgs),
    /// Run the oracle battery and report pass/fail per property.
    Verify(VerifyArgs),
    /// Summarize a JSONL trace.
    TraceStats(TraceStatsArgs),
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::from_name(s).ok_or_else(|| {
        let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant `{s}` (expected one of: {})", names.join(", "))
    })
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Clone, Args)]
pub struct ProblemArgs {
    #[arg(long)]
    pub kernel: KernelName,
    /// Problem size: vector length, grid side, Laplacian side or particle count.
    #[arg(long, visible_alias = "size")]
    pub grid: Option<usize>,
    /// Iteration count (iteration cap for heat_while).
    #[arg(long)]
    pub iters: Option<u64>,
    /// Convergence threshold (heat_while).
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, env = "CYCLIC_TASKS_SEED", default_value_t = 0)]
    pub seed: u64,
}

impl ProblemArgs {
    pub fn spec(&self, block: Option<usize>) -> KernelSpec {
        let mut s = KernelSpec::default_for(self.kernel);
        if let Some(g) = self.grid {
            s.size = g;
        }
        if let Some(b) = block {
            s.block = b;
        }
        if let Some(n) = self.iters {
            s.iterations = n;
        }
        if let Some(t) = self.threshold {
            s.threshold = t;
        }
        s.seed = self.seed;
        s
    }
}

#[derive(Debug, Clone, Args)]
pub struct PolicyArgs {
    #[arg(long, default_value_t = 1)]
    pub unroll: u64,
    /// Re-run the loop body every iteration to refresh task arguments.
    #[arg(long)]
    pub update: bool,
    /// Probability that a ready set yields no immediate successor.
    #[arg(long = "is-skip-prob", default_value_t = 0.0)]
    pub is_skip_prob: f64,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    /// Append rows to this CSV file (header written when the file is new).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, default_value_t = default_threads())]
    pub threads: usize,
    #[arg(long)]
    pub block: Option<usize>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Write the execution trace of the last repetition as JSONL.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub blocks: Vec<usize>,
    /// Variants to run (default: all seven).
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    pub variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![default_threads()])]
    pub threads: Vec<usize>,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Random programs checked against the unrolled-program oracle.
    #[arg(long, default_value_t = 1000)]
    pub cases: usize,
    #[arg(long, env = "CYCLIC_TASKS_SEED", default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub threads: usize,
    /// Drop one cross-iteration edge in every recorded graph.
    #[arg(long)]
    pub inject_fault: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TraceStatsArgs {
    pub path: PathBuf,
    /// Print the summary as JSON.
    #[arg(long)]
    pub json: bool,
}
