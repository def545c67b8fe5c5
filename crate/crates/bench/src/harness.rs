//! Runs one kernel under one variant and collects timing and telemetry.

use std::time::Instant;

use cyclic_tasks::{
    BypassRecord, DctgInfo, GraphMode, Iterations, Metrics, Runtime, RuntimeConfig, TaskiterOptions, TraceEvent,
    Variant,
};

use crate::{build, KernelSpec};

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub unroll: u64,
    pub update: bool,
    pub skip_probability: f64,
    pub trace: bool,
    pub seed: u64,
    #[doc(hidden)]
    pub drop_cross_edge: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            unroll: 1,
            update: false,
            skip_probability: 0.0,
            trace: false,
            seed: 0,
            drop_cross_edge: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub checksum: u64,
    pub iterations: u64,
    pub wall_ns: u64,
    pub figure_of_merit: f64,
    pub tasks_per_iteration: usize,
    pub metrics: Metrics,
    /// Graph shape, for the variants that record one.
    pub info: Option<DctgInfo>,
    pub trace: Vec<TraceEvent>,
    pub bypass_log: Vec<BypassRecord>,
}

pub fn run_cell(spec: &KernelSpec, variant: Variant, workers: usize, opts: &RunOptions) -> Result<CellResult, String> {
    let kernel = build(spec)?;
    let condition = kernel.condition();
    if condition.is_some() && (opts.unroll != 1 || opts.update) {
        return Err("convergence-driven kernels support neither unrolling nor update mode".into());
    }
    let mut config = RuntimeConfig::for_variant(variant, workers, opts.seed)
        .with_trace(opts.trace)
        .with_skip_probability(opts.skip_probability);
    config.drop_cross_edge = opts.drop_cross_edge;
    let rt = Runtime::new(config);
    let err = |e: cyclic_tasks::RuntimeError| e.to_string();

    let t0 = Instant::now();
    let info = match variant {
        Variant::Tasks | Variant::TasksIS | Variant::TasksISBypass => {
            match &condition {
                Some((cond, _)) => {
                    for i in 0.. {
                        kernel.spawn_iteration(i, &mut rt.spawner(i)).map_err(err)?;
                        rt.taskwait();
                        if !cond(i) {
                            break;
                        }
                    }
                }
                None => {
                    for i in 0..spec.iterations {
                        kernel.spawn_iteration(i, &mut rt.spawner(i)).map_err(err)?;
                    }
                }
            }
            None
        }
        _ => {
            let iterations = match &condition {
                Some((cond, reads)) => Iterations::While {
                    condition: cond.clone(),
                    reads: reads.clone(),
                },
                None => Iterations::Fixed(spec.iterations),
            };
            let opts = if variant == Variant::Caching {
                TaskiterOptions {
                    mode: GraphMode::Cached,
                    ..TaskiterOptions::fixed(1)
                }
            } else {
                TaskiterOptions::fixed(1).unroll(opts.unroll).update(opts.update)
            };
            let opts = TaskiterOptions { iterations, ..opts };
            Some(
                rt.run_taskiter(opts, |i, sp| kernel.spawn_iteration(i, sp))
                    .map_err(err)?,
            )
        }
    };
    rt.taskwait();
    let wall_ns = (t0.elapsed().as_nanos() as u64).max(1);

    let mut metrics = rt.snapshot_metrics();
    metrics.wall_ns = wall_ns;
    let trace = rt.take_trace();
    let bypass_log = rt.take_bypass_log();
    drop(rt);

    let iterations = kernel.iterations_done();
    Ok(CellResult {
        checksum: kernel.checksum(),
        iterations,
        wall_ns,
        figure_of_merit: kernel.work_per_iteration() * iterations as f64 / (wall_ns as f64 * 1e-9),
        tasks_per_iteration: kernel.tasks_per_iteration(),
        metrics,
        info,
        trace,
        bypass_log,
    })
}
