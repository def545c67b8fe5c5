//! Worker pool, task lifecycle and the public task-creation API.

use std::collections::{BTreeMap, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_utils::CachePadded;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::access::{normalize_access_list, AccessKey, AccessMode, DataAccess};
use crate::deps::{BottomMap, EdgeKind, TaskId};
use crate::error::RuntimeError;
use crate::node::{Body, Node, NodeKind, NodeSpec, Owner, Ready};
use crate::scheduler::{Next, Placement, PolicyConfig, SchedTelemetry, Scheduler, WorkerSlot};
use crate::trace::{EventKind, TraceBuffers, TraceEvent};

static NEXT_TASK_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_task_id() -> TaskId {
    TaskId(NEXT_TASK_ID.fetch_add(1, Ordering::Relaxed))
}

/// The seven ways a benchmark loop can be run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Tasks,
    TasksIS,
    TasksISBypass,
    Caching,
    Taskiter,
    TaskiterIS,
    TaskiterISBypass,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Tasks,
        Variant::TasksIS,
        Variant::TasksISBypass,
        Variant::Caching,
        Variant::Taskiter,
        Variant::TaskiterIS,
        Variant::TaskiterISBypass,
    ];

    pub fn placement(self) -> Placement {
        match self {
            Variant::Tasks | Variant::Caching | Variant::Taskiter => Placement::None,
            Variant::TasksIS | Variant::TaskiterIS => Placement::InsideScheduler,
            Variant::TasksISBypass | Variant::TaskiterISBypass => Placement::OutsideScheduler,
        }
    }

    pub fn uses_taskiter(self) -> bool {
        matches!(self, Variant::Taskiter | Variant::TaskiterIS | Variant::TaskiterISBypass)
    }

    /// Kebab-case name used on the command line and in CSV output.
    pub fn name(self) -> &'static str {
        match self {
            Variant::Tasks => "tasks",
            Variant::TasksIS => "tasks-is",
            Variant::TasksISBypass => "tasks-is-bypass",
            Variant::Caching => "caching",
            Variant::Taskiter => "taskiter",
            Variant::TaskiterIS => "taskiter-is",
            Variant::TaskiterISBypass => "taskiter-is-bypass",
        }
    }

    pub fn from_name(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct RuntimeConfig {
    /// Threads executing tasks, the creating thread included.
    pub workers: usize,
    pub policy: PolicyConfig,
    pub trace: bool,
    pub seed: u64,
    /// Fault injection: drop the n-th cross-iteration edge when closing a taskiter.
    #[doc(hidden)]
    pub drop_cross_edge: Option<usize>,
}

impl RuntimeConfig {
    pub fn new(workers: usize) -> Self {
        RuntimeConfig {
            workers: workers.max(1),
            policy: PolicyConfig::default(),
            trace: false,
            seed: 0,
            drop_cross_edge: None,
        }
    }

    pub fn for_variant(variant: Variant, workers: usize, seed: u64) -> Self {
        RuntimeConfig {
            policy: PolicyConfig {
                placement: variant.placement(),
                skip_probability: 0.0,
                seed,
            },
            seed,
            ..Self::new(workers)
        }
    }

    pub fn with_trace(mut self, on: bool) -> Self {
        self.trace = on;
        self
    }

    pub fn with_skip_probability(mut self, p: f64) -> Self {
        self.policy.skip_probability = p.clamp(0.0, 1.0);
        self
    }
}

/// Task description handed to [`Spawner::spawn`].
pub struct Task {
    pub(crate) label: Arc<str>,
    pub(crate) accesses: Vec<DataAccess>,
    pub(crate) priority: i32,
    pub(crate) body: Option<Body>,
    pub(crate) args: Option<Vec<u8>>,
    pub(crate) iteration: u64,
}

impl Task {
    pub fn new(label: impl Into<Arc<str>>) -> Self {
        Task {
            label: label.into(),
            accesses: Vec::new(),
            priority: 0,
            body: None,
            args: None,
            iteration: 0,
        }
    }

    pub fn access(mut self, key: impl Into<AccessKey>, mode: AccessMode) -> Self {
        self.accesses.push(DataAccess::new(key, mode));
        self
    }

    pub fn reads(self, key: impl Into<AccessKey>) -> Self {
        self.access(key, AccessMode::In)
    }

    pub fn writes(self, key: impl Into<AccessKey>) -> Self {
        self.access(key, AccessMode::Out)
    }

    pub fn updates(self, key: impl Into<AccessKey>) -> Self {
        self.access(key, AccessMode::InOut)
    }

    pub fn accesses(mut self, list: impl IntoIterator<Item = DataAccess>) -> Self {
        self.accesses.extend(list);
        self
    }

    pub fn priority(mut self, p: i32) -> Self {
        self.priority = p;
        self
    }

    /// Per-iteration payload, delivered through [`TaskContext::args`].
    pub fn args(mut self, payload: Vec<u8>) -> Self {
        self.args = Some(payload);
        self
    }

    /// Loop index reported by [`TaskContext::iteration`] for plain tasks.
    pub fn iteration(mut self, i: u64) -> Self {
        self.iteration = i;
        self
    }

    pub fn body(mut self, f: impl Fn(&TaskContext<'_>) + Send + Sync + 'static) -> Self {
        self.body = Some(Arc::new(f));
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn access_list(&self) -> &[DataAccess] {
        &self.accesses
    }
}

/// Something tasks can be created in: the main scope or a taskiter recorder.
pub trait Spawner {
    fn spawn(&mut self, task: Task) -> Result<TaskId, RuntimeError>;
}

/// Handle passed to task bodies.
pub struct TaskContext<'a> {
    shared: &'a Arc<Shared>,
    node: &'a Arc<Node>,
    iteration: u64,
    worker: usize,
    args: Option<Vec<u8>>,
}

impl TaskContext<'_> {
    /// Loop index of the running instance.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn worker(&self) -> usize {
        self.worker
    }

    pub fn task_id(&self) -> TaskId {
        self.node.id
    }

    pub fn label(&self) -> &str {
        &self.node.label
    }

    /// Payload recorded for this iteration, if any.
    pub fn args(&self) -> Option<&[u8]> {
        self.args.as_deref()
    }

    /// Spawns a nested task. Nested tasks carry no dependencies; the
    /// enclosing task completes only after all of them finished.
    pub fn spawn(&self, label: impl Into<Arc<str>>, f: impl Fn(&TaskContext<'_>) + Send + Sync + 'static) -> TaskId {
        self.node.pending.fetch_add(1, Ordering::AcqRel);
        let node = Arc::new(Node::new(
            next_task_id(),
            NodeSpec {
                label: label.into(),
                priority: self.node.priority,
                accesses: Vec::new(),
                kind: NodeKind::Task(Arc::new(f)),
                owner: Owner::Parent(Arc::clone(self.node)),
                iter_base: self.iteration,
                iter_stride: 0,
                limit: 1,
                base0: 0,
                args: None,
                update: false,
            },
        ));
        let id = node.id;
        self.shared.created(self.worker, &node, self.iteration);
        let j = node.kick().expect("nested task has no predecessors");
        self.shared.sched.enqueue(
            self.worker,
            [Ready {
                node,
                iter: j,
                successor: false,
            }],
        );
        id
    }
}

/// Per-label execution time histogram (power-of-two nanosecond buckets).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub count: u64,
    pub total_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
    /// `buckets[i]` counts durations in `[2^i, 2^(i+1))` ns.
    pub buckets: Vec<u64>,
}

impl Histogram {
    fn add(&mut self, ns: u64) {
        if self.count == 0 || ns < self.min_ns {
            self.min_ns = ns;
        }
        self.max_ns = self.max_ns.max(ns);
        self.count += 1;
        self.total_ns += ns;
        let b = 63 - ns.max(1).leading_zeros() as usize;
        if self.buckets.len() <= b {
            self.buckets.resize(b + 1, 0);
        }
        self.buckets[b] += 1;
    }

    fn merge(&mut self, o: &Histogram) {
        if o.count == 0 {
            return;
        }
        if self.count == 0 || o.min_ns < self.min_ns {
            self.min_ns = o.min_ns;
        }
        self.max_ns = self.max_ns.max(o.max_ns);
        self.count += o.count;
        self.total_ns += o.total_ns;
        if self.buckets.len() < o.buckets.len() {
            self.buckets.resize(o.buckets.len(), 0);
        }
        for (a, b) in self.buckets.iter_mut().zip(&o.buckets) {
            *a += b;
        }
    }

    pub fn mean_ns(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total_ns as f64 / self.count as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub telemetry: SchedTelemetry,
    pub wall_ns: u64,
    pub labels: BTreeMap<String, Histogram>,
}

/// A scheduler bypass: `to` ran on `worker` right after `from` finished there.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BypassRecord {
    pub worker: usize,
    pub from: TaskId,
    pub to: TaskId,
    pub from_accesses: Vec<DataAccess>,
    pub to_accesses: Vec<DataAccess>,
}

impl BypassRecord {
    pub fn shares_key(&self) -> bool {
        crate::access::shares_key(&self.from_accesses, &self.to_accesses)
    }
}

type PerWorker<T> = Box<[CachePadded<Mutex<T>>]>;

pub(crate) struct Shared {
    pub config: RuntimeConfig,
    pub sched: Scheduler<Ready>,
    trace: Option<TraceBuffers>,
    bypass_log: Option<PerWorker<Vec<BypassRecord>>>,
    histograms: PerWorker<HashMap<Arc<str>, Histogram>>,
    epoch: Instant,
    pending: AtomicUsize,
    shutdown: AtomicBool,
    pub recording: AtomicBool,
    poison: Mutex<Option<String>>,
    pub main_map: Mutex<BottomMap<Arc<Node>>>,
}

impl Shared {
    pub(crate) fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    fn event(&self, worker: usize, ev: EventKind, node: &Node, iter: u64) {
        if let Some(t) = &self.trace {
            t.push(worker, ev, node.id, &node.label, iter, self.now_ns());
        }
    }

    pub(crate) fn created(&self, worker: usize, node: &Node, iter: u64) {
        self.sched.record_created(worker, 1);
        self.event(worker, EventKind::Create, node, iter);
    }

    pub(crate) fn scope_add(&self) {
        self.pending.fetch_add(1, Ordering::AcqRel);
    }

    fn scope_done_one(&self) {
        if self.pending.fetch_sub(1, Ordering::AcqRel) == 1 {
            self.sched.wake_all();
        }
    }

    /// Turns a newly ready node into scheduler work. Gate nodes open their
    /// taskiter instead of running.
    pub(crate) fn admit(&self, node: Arc<Node>, iter: u64, successor: bool, out: &mut Vec<Ready>) {
        if let NodeKind::Gate(g) = &node.kind {
            let g = Arc::clone(g);
            g.open_gate(self, out);
            return;
        }
        out.push(Ready { node, iter, successor });
    }

    /// Finishes the running instance of `node` and collects what became ready.
    pub(crate) fn complete(&self, node: &Arc<Node>, out: &mut Vec<Ready>) {
        let f = node.finish();
        for s in f.successors.iter() {
            let target = match s.kind {
                EdgeKind::Intra => f.iter,
                EdgeKind::CrossIteration => f.iter + 1,
            };
            if s.node.release(target) {
                self.admit(Arc::clone(&s.node), target, s.local, out);
            }
        }
        if let Some(g) = node.graph() {
            g.after_node_finished(self, f.iter, out);
        }
        if let Some(j) = f.self_ready {
            let local = !node.accesses.is_empty();
            self.admit(Arc::clone(node), j, local, out);
        }
        if f.retired {
            self.on_retire(node, out);
        }
    }

    pub(crate) fn on_retire(&self, node: &Arc<Node>, out: &mut Vec<Ready>) {
        match &node.owner {
            Owner::Scope => self.scope_done_one(),
            Owner::Parent(p) => {
                if p.pending.fetch_sub(1, Ordering::AcqRel) == 1 {
                    self.complete(p, out);
                }
            }
            Owner::Graph(g) => g.node_retired(self, out),
            Owner::Gate => {}
        }
    }

    /// Called when a taskiter has fully retired.
    pub(crate) fn graph_finished(&self, gate: Option<Arc<Node>>, out: &mut Vec<Ready>) {
        if let Some(gate) = gate {
            self.complete(&gate, out);
        }
        self.scope_done_one();
    }

    fn execute(self: &Arc<Self>, worker: usize, r: Ready) -> Vec<Ready> {
        let Ready { node, iter, .. } = r;
        let loop_index = node.loop_index(iter);
        self.sched.record_execution(worker);
        self.event(worker, EventKind::Start, &node, loop_index);
        node.pending.store(1, Ordering::Release);
        let args = node.take_args(iter);
        let t0 = Instant::now();
        let mut out = Vec::new();
        let result = panic::catch_unwind(AssertUnwindSafe(|| match &node.kind {
            NodeKind::Task(body) => {
                let ctx = TaskContext {
                    shared: self,
                    node: &node,
                    iteration: loop_index,
                    worker,
                    args,
                };
                body(&ctx);
                None
            }
            NodeKind::Condition(cond) => Some(cond(loop_index)),
            NodeKind::Gate(_) => unreachable!("gate nodes are never queued"),
        }));
        let elapsed = t0.elapsed().as_nanos() as u64;
        self.event(worker, EventKind::End, &node, loop_index);
        self.histograms[worker].lock().entry(Arc::clone(&node.label)).or_default().add(elapsed);
        match result {
            Ok(Some(false)) => {
                if let Some(g) = node.graph() {
                    g.stop_after(self, iter + 1, &mut out);
                }
            }
            Ok(_) => {}
            Err(payload) => {
                let msg = payload
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| payload.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "non-string panic".into());
                let diag = format!(
                    "task {} ({}) iteration {} panicked on worker {}: {}",
                    node.id, node.label, loop_index, worker, msg
                );
                self.poison.lock().get_or_insert(diag);
                self.sched.wake_all();
                return out;
            }
        }
        if node.pending.fetch_sub(1, Ordering::AcqRel) == 1 {
            self.complete(&node, &mut out);
        }
        out
    }

    /// Runs one task if any is available. Returns false when idle.
    fn run_one(self: &Arc<Self>, slot: &mut WorkerSlot<Ready>, last: &mut Option<Arc<Node>>) -> bool {
        let task = match slot.immediate_successor.take() {
            Some(t) => {
                if self.config.policy.placement == Placement::OutsideScheduler {
                    self.sched.record_bypass(slot.id);
                    if let (Some(log), Some(prev)) = (&self.bypass_log, last.as_ref()) {
                        log[slot.id].lock().push(BypassRecord {
                            worker: slot.id,
                            from: prev.id,
                            to: t.node.id,
                            from_accesses: prev.accesses.to_vec(),
                            to_accesses: t.node.accesses.to_vec(),
                        });
                    }
                }
                t
            }
            None => match self.sched.fetch(slot.id) {
                Some(t) => t,
                None => return false,
            },
        };
        let node = Arc::clone(&task.node);
        let ready = self.execute(slot.id, task);
        match self.sched.on_task_finished(slot, ready) {
            Next::ExecuteNow(t) => slot.immediate_successor = Some(t),
            Next::FetchFromScheduler => {}
        }
        *last = Some(node);
        true
    }

    fn worker_loop(self: Arc<Self>, id: usize) {
        let mut slot = self.sched.worker_slot(id);
        let mut last = None;
        let mut idle_spins = 0u32;
        loop {
            if self.run_one(&mut slot, &mut last) {
                idle_spins = 0;
                continue;
            }
            if self.shutdown.load(Ordering::Acquire) {
                break;
            }
            idle_spins += 1;
            if idle_spins < 32 {
                std::thread::yield_now();
            } else {
                self.sched
                    .park(Duration::from_millis(5), || self.shutdown.load(Ordering::Acquire));
            }
        }
    }

    fn check_poison(&self) {
        if let Some(msg) = self.poison.lock().clone() {
            panic!("{msg}");
        }
    }
}

/// A task-parallel runtime instance.
///
/// The creating thread counts as worker 0: it creates tasks and joins the
/// execution while waiting in [`Runtime::taskwait`].
pub struct Runtime {
    pub(crate) shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
    main_slot: Mutex<(WorkerSlot<Ready>, Option<Arc<Node>>)>,
}

impl Runtime {
    pub fn new(config: RuntimeConfig) -> Self {
        let workers = config.workers.max(1);
        let sched = Scheduler::new(workers, config.policy);
        let main_slot = Mutex::new((sched.worker_slot(0), None));
        let shared = Arc::new(Shared {
            trace: config.trace.then(|| TraceBuffers::new(workers)),
            bypass_log: config
                .trace
                .then(|| (0..workers).map(|_| CachePadded::new(Mutex::new(Vec::new()))).collect()),
            histograms: (0..workers).map(|_| CachePadded::new(Mutex::new(HashMap::new()))).collect(),
            sched,
            epoch: Instant::now(),
            pending: AtomicUsize::new(0),
            shutdown: AtomicBool::new(false),
            recording: AtomicBool::new(false),
            poison: Mutex::new(None),
            main_map: Mutex::new(BottomMap::new()),
            config,
        });
        let threads = (1..workers)
            .map(|id| {
                let s = Arc::clone(&shared);
                std::thread::Builder::new()
                    .name(format!("worker-{id}"))
                    .spawn(move || s.worker_loop(id))
                    .expect("spawn worker thread")
            })
            .collect();
        Runtime {
            shared,
            threads,
            main_slot,
        }
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.shared.config
    }

    pub fn workers(&self) -> usize {
        self.shared.sched.workers()
    }

    /// Creates a task in the main scope.
    pub fn spawn(&self, task: Task) -> Result<TaskId, RuntimeError> {
        let accesses = normalize_access_list(task.accesses)?;
        let node = Arc::new(Node::new(
            next_task_id(),
            NodeSpec {
                label: task.label,
                priority: task.priority,
                accesses,
                kind: NodeKind::Task(task.body.unwrap_or_else(|| Arc::new(|_| {}))),
                owner: Owner::Scope,
                iter_base: task.iteration,
                iter_stride: 0,
                limit: 1,
                base0: 0,
                args: task.args,
                update: false,
            },
        ));
        let id = node.id;
        self.shared.scope_add();
        self.shared.created(0, &node, task.iteration);
        self.register_in_main(node);
        Ok(id)
    }

    /// Derives the edges of a main-scope node, links it and publishes it when
    /// nothing is outstanding.
    pub(crate) fn register_in_main(&self, node: Arc<Node>) {
        let shared = &self.shared;
        let mut map = shared.main_map.lock();
        let edges = map.register(&node, &node.accesses, None);
        node.set_base0(edges.len() as u32);
        let mut out = Vec::new();
        for e in &edges {
            if e.from.link(&node, EdgeKind::Intra, true) && node.release(0) {
                shared.admit(Arc::clone(&node), 0, false, &mut out);
            }
        }
        drop(map);
        if let Some(j) = node.kick() {
            shared.admit(Arc::clone(&node), j, false, &mut out);
        }
        shared.sched.enqueue(0, out);
    }

    /// A spawner for the main scope that tags tasks with loop index `iteration`.
    pub fn spawner(&self, iteration: u64) -> MainSpawner<'_> {
        MainSpawner { rt: self, iteration }
    }

    /// Waits until every task of the main scope finished, executing tasks on
    /// the calling thread meanwhile.
    pub fn taskwait(&self) {
        let shared = &self.shared;
        let mut guard = self.main_slot.lock();
        let (slot, last) = &mut *guard;
        let mut idle = 0u32;
        loop {
            shared.check_poison();
            if shared.pending.load(Ordering::Acquire) == 0 && slot.immediate_successor.is_none() {
                return;
            }
            if shared.run_one(slot, last) {
                idle = 0;
                continue;
            }
            idle += 1;
            if idle < 32 {
                std::thread::yield_now();
            } else {
                shared.sched.park(Duration::from_millis(2), || {
                    shared.pending.load(Ordering::Acquire) == 0 || shared.poison.lock().is_some()
                });
            }
        }
    }

    pub fn snapshot_metrics(&self) -> Metrics {
        let mut labels: BTreeMap<String, Histogram> = BTreeMap::new();
        for h in self.shared.histograms.iter() {
            for (k, v) in h.lock().iter() {
                labels.entry(k.to_string()).or_default().merge(v);
            }
        }
        Metrics {
            telemetry: self.shared.sched.telemetry(),
            wall_ns: self.shared.now_ns().max(1),
            labels,
        }
    }

    pub fn telemetry(&self) -> SchedTelemetry {
        self.shared.sched.telemetry()
    }

    /// Drains the recorded trace (empty when tracing is off).
    pub fn take_trace(&self) -> Vec<TraceEvent> {
        self.shared.trace.as_ref().map(|t| t.take()).unwrap_or_default()
    }

    /// Drains the log of scheduler bypasses (recorded only when tracing).
    pub fn take_bypass_log(&self) -> Vec<BypassRecord> {
        let mut out = Vec::new();
        if let Some(log) = &self.shared.bypass_log {
            for l in log.iter() {
                out.append(&mut l.lock());
            }
        }
        out
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        if !std::thread::panicking() && self.shared.poison.lock().is_none() {
            self.taskwait();
        }
        self.shared.shutdown.store(true, Ordering::Release);
        self.shared.sched.wake_all();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

pub struct MainSpawner<'a> {
    rt: &'a Runtime,
    iteration: u64,
}

impl Spawner for MainSpawner<'_> {
    fn spawn(&mut self, mut task: Task) -> Result<TaskId, RuntimeError> {
        task.iteration = self.iteration;
        self.rt.spawn(task)
    }
}
