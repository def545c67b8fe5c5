//! `verify`: the oracle battery.
//!
//! Every recorded graph is compared with the dependency graph of the
//! physically unrolled program, and every trace is audited against the
//! ordering that program implies.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cyclic_bench::{run_cell, sequential, KernelName, KernelSpec, RunOptions};
use cyclic_tasks::oracle::{
    add_condition_gates, graph_predecessors, graph_program, nearest_predecessors, order_constraints, random_body, unroll,
};
use cyclic_tasks::trace::{audit_order, check_well_formed, intervals};
use cyclic_tasks::{DataAccess, DctgInfo, Runtime, RuntimeConfig, Task, TaskiterOptions, TraceEvent, Variant};

use crate::args::VerifyArgs;

#[derive(Clone, Debug)]
pub struct Property {
    pub name: &'static str,
    pub checked: u64,
    pub failures: Vec<String>,
}

impl Property {
    fn new(name: &'static str) -> Self {
        Property {
            name,
            checked: 0,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, what: impl FnOnce() -> String, r: Result<(), String>) {
        self.checked += 1;
        if let Err(e) = r {
            self.failures.push(format!("{}: {e}", what()));
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn line(&self) -> String {
        if self.passed() {
            format!("PASS {:<22} {} checks", self.name, self.checked)
        } else {
            format!(
                "FAIL {:<22} {} of {} checks failed; first: {}",
                self.name,
                self.failures.len(),
                self.checked,
                self.failures.first().map_or("no checks ran", String::as_str)
            )
        }
    }
}

struct Battery {
    graph_random: Property,
    graph_kernels: Property,
    order: Property,
    well_formed: Property,
    checksums: Property,
    locality: Property,
}

fn same_graph(info: &DctgInfo, n: u64, expected: Option<&[Vec<DataAccess>]>) -> Result<(), String> {
    let program = graph_program(info, n);
    let flat = expected.unwrap_or(&program);
    let got = graph_predecessors(info, n);
    let mut want = nearest_predecessors(flat);
    if let Some(c) = info.nodes.iter().position(|x| x.condition) {
        add_condition_gates(&mut want, info.nodes.len(), c);
    }
    match got.iter().zip(&want).position(|(g, w)| g != w) {
        None => Ok(()),
        Some(p) => Err(format!("instance {p}: graph {:?}, oracle {:?}", got[p], want[p])),
    }
}

fn audit(info: &DctgInfo, n: u64, trace: &[TraceEvent]) -> Result<(), String> {
    let iv = intervals(trace)?;
    let v = audit_order(&iv, &order_constraints(info, n));
    match v.first() {
        None => Ok(()),
        Some(first) => Err(format!("{} violations; first: {}", v.len(), first.detail)),
    }
}

fn well_formed(trace: &[TraceEvent], instances: usize) -> Result<(), String> {
    check_well_formed(trace)?;
    let ran = intervals(trace)?.len();
    if ran != instances {
        return Err(format!("{ran} executions for {instances} instances"));
    }
    Ok(())
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(p))))
}

fn config(variant: Variant, a: &VerifyArgs, seed: u64) -> RuntimeConfig {
    let mut c = RuntimeConfig::for_variant(variant, a.threads, seed).with_trace(true);
    if a.inject_fault {
        c.drop_cross_edge = Some(0);
    }
    c
}

const TASKITER_VARIANTS: [Variant; 3] = [Variant::Taskiter, Variant::TaskiterIS, Variant::TaskiterISBypass];

fn random_programs(a: &VerifyArgs, b: &mut Battery) {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let rts: Vec<Runtime> = TASKITER_VARIANTS
        .iter()
        .map(|&v| Runtime::new(config(v, a, a.seed)))
        .collect();
    for case in 0..a.cases {
        let body = random_body(&mut rng, 12, 5);
        let n = rng.gen_range(1..=6u64);
        let dynamic = case % 4 == 3;
        let u = if dynamic { 1 } else { rng.gen_range(1..=n.min(3)) };
        let reads: Vec<DataAccess> = (0..5u64).filter(|_| rng.gen_bool(0.4)).map(DataAccess::read).collect();
        let opts = if dynamic {
            TaskiterOptions::while_(move |i| i + 1 < n, reads.clone())
        } else {
            TaskiterOptions::fixed(n).unroll(u)
        };
        let rt = &rts[case % rts.len()];
        let recorded = guarded(|| {
            let info = rt
                .run_taskiter(opts, |_, sp| {
                    for (pos, acc) in body.iter().enumerate() {
                        sp.spawn(Task::new(format!("t{pos}")).accesses(acc.clone()).body(|_| {}))?;
                    }
                    Ok(())
                })
                .map_err(|e| e.to_string())?;
            rt.taskwait();
            Ok((info, rt.take_trace()))
        });
        let what = || format!("case {case} (n={n}, unroll={u}, dynamic={dynamic}, {} tasks)", body.len());
        match recorded {
            Ok((info, trace)) => {
                let mut full = body.clone();
                if dynamic {
                    full.push(reads.clone());
                }
                let flat = unroll(&full, n);
                b.graph_random.record(what, same_graph(&info, n, Some(&flat)));
                b.order.record(what, audit(&info, n, &trace));
                b.well_formed.record(what, well_formed(&trace, flat.len()));
            }
            Err(e) => b.graph_random.record(what, Err(e)),
        }
    }
}

fn kernels(a: &VerifyArgs, b: &mut Battery) {
    for kernel in KernelName::ALL {
        let spec = KernelSpec::tiny(kernel, a.seed);
        let expected = match sequential(&spec) {
            Ok(e) => e,
            Err(e) => {
                b.checksums.record(|| kernel.to_string(), Err(e));
                continue;
            }
        };
        for variant in TASKITER_VARIANTS {
            let unrolls: &[u64] = if kernel == KernelName::HeatWhile { &[1] } else { &[1, 2] };
            for &unroll in unrolls {
                let opts = RunOptions {
                    unroll,
                    trace: true,
                    seed: a.seed,
                    drop_cross_edge: a.inject_fault.then_some(0),
                    ..RunOptions::default()
                };
                let what = || format!("{kernel} {variant} unroll={unroll}");
                let r = match guarded(|| run_cell(&spec, variant, a.threads, &opts)) {
                    Ok(r) => r,
                    Err(e) => {
                        b.checksums.record(what, Err(e));
                        continue;
                    }
                };
                b.checksums.record(
                    what,
                    if r.checksum == expected.checksum && r.iterations == expected.iterations {
                        Ok(())
                    } else {
                        Err(format!("checksum {:016x}, reference {:016x}", r.checksum, expected.checksum))
                    },
                );
                let Some(info) = r.info.as_ref() else {
                    b.graph_kernels.record(what, Err("no graph recorded".into()));
                    continue;
                };
                let n = r.iterations;
                let instances = graph_program(info, n).len();
                b.graph_kernels.record(what, same_graph(info, n, None));
                b.order.record(what, audit(info, n, &r.trace));
                b.well_formed.record(what, well_formed(&r.trace, instances));
                if variant == Variant::TaskiterISBypass {
                    let bad = r.bypass_log.iter().filter(|x| !x.shares_key()).count();
                    b.locality.record(
                        what,
                        if bad == 0 {
                            Ok(())
                        } else {
                            Err(format!("{bad} of {} bypasses share no key", r.bypass_log.len()))
                        },
                    );
                }
            }
        }
    }
}

/// A writer that must wait for the previous iteration's slow reader.
fn probe(a: &VerifyArgs, b: &mut Battery) {
    const N: u64 = 4;
    for variant in TASKITER_VARIANTS {
        let what = || format!("probe {variant}");
        let r = guarded(|| {
            let rt = Runtime::new(config(variant, a, a.seed));
            let info = rt
                .run_taskiter(TaskiterOptions::fixed(N), |_, sp| {
                    sp.spawn(Task::new("A").writes(1u64).priority(10).body(|_| {}))?;
                    sp.spawn(
                        Task::new("B")
                            .reads(1u64)
                            .updates(2u64)
                            .body(|_| std::thread::sleep(Duration::from_millis(2))),
                    )?;
                    Ok(())
                })
                .map_err(|e| e.to_string())?;
            rt.taskwait();
            Ok((info, rt.take_trace()))
        });
        match r {
            Ok((info, trace)) => b.order.record(what, audit(&info, N, &trace)),
            Err(e) => b.order.record(what, Err(e)),
        }
    }
}

/// Runs every property and returns them in report order.
pub fn battery(a: &VerifyArgs) -> Vec<Property> {
    let mut b = Battery {
        graph_random: Property::new("graph-random-programs"),
        graph_kernels: Property::new("graph-kernels"),
        order: Property::new("order-audit"),
        well_formed: Property::new("trace-well-formed"),
        checksums: Property::new("kernel-checksums"),
        locality: Property::new("bypass-locality"),
    };
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    random_programs(a, &mut b);
    kernels(a, &mut b);
    probe(a, &mut b);
    std::panic::set_hook(hook);
    vec![b.graph_random, b.graph_kernels, b.order, b.well_formed, b.checksums, b.locality]
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<ExitCode, String> {
    let props = battery(a);
    let mut ok = true;
    for p in &props {
        crate::emit_stdout(&(p.line() + "\n"))?;
        ok &= p.passed();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
