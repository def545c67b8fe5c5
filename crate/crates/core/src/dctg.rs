//! Recorded, replayable task graphs for iterative loops.
//!
//! A taskiter records the tasks of one loop iteration (or `unroll`
//! consecutive iterations) into a graph, derives the edges that cross from
//! one iteration into the next, and then replays the graph until the loop
//! ends. No task is re-created and no barrier separates iterations: each
//! node starts iteration `j + 1` as soon as its own predecessors allow it.
//!
//! In cached mode the graph is replayed the same way but every iteration
//! waits for the previous one to finish entirely.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::access::{normalize_access_list, DataAccess};
use crate::deps::{match_cross_iteration, BottomMap, Edge, EdgeKind, TaskId, TopMap};
use crate::error::RuntimeError;
use crate::node::{ConditionFn, Node, NodeKind, NodeSpec, Owner, Ready};
use crate::runtime::{next_task_id, Runtime, Shared, Spawner, Task};

/// How many times the loop body runs.
#[derive(Clone)]
pub enum Iterations {
    Fixed(u64),
    /// Runs the body, then evaluates `condition(i)` for loop index `i` once
    /// every task writing one of `reads` finished. `false` ends the loop.
    While {
        condition: ConditionFn,
        reads: Vec<DataAccess>,
    },
}

impl std::fmt::Debug for Iterations {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Iterations::Fixed(n) => write!(f, "Fixed({n})"),
            Iterations::While { reads, .. } => write!(f, "While({reads:?})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphMode {
    /// Cross-iteration edges, no barrier between iterations.
    Cyclic,
    /// Iterations separated by a barrier.
    Cached,
}

#[derive(Clone, Debug)]
pub struct TaskiterOptions {
    pub iterations: Iterations,
    /// Iterations recorded into one graph.
    pub unroll: u64,
    /// Re-run the body on the creating thread for every iteration to refresh
    /// task payloads.
    pub update: bool,
    /// Accesses of the loop as a whole, ordering it against surrounding tasks.
    pub boundary: Vec<DataAccess>,
    pub mode: GraphMode,
}

impl TaskiterOptions {
    pub fn fixed(iterations: u64) -> Self {
        TaskiterOptions {
            iterations: Iterations::Fixed(iterations),
            unroll: 1,
            update: false,
            boundary: Vec::new(),
            mode: GraphMode::Cyclic,
        }
    }

    pub fn while_(condition: impl Fn(u64) -> bool + Send + Sync + 'static, reads: Vec<DataAccess>) -> Self {
        TaskiterOptions {
            iterations: Iterations::While {
                condition: Arc::new(condition),
                reads,
            },
            ..Self::fixed(1)
        }
    }

    pub fn unroll(mut self, u: u64) -> Self {
        self.unroll = u;
        self
    }

    pub fn update(mut self, on: bool) -> Self {
        self.update = on;
        self
    }

    pub fn boundary(mut self, accesses: Vec<DataAccess>) -> Self {
        self.boundary = accesses;
        self
    }

    pub fn mode(mut self, mode: GraphMode) -> Self {
        self.mode = mode;
        self
    }

    fn validate(&self) -> Result<(), RuntimeError> {
        let u = self.unroll;
        match &self.iterations {
            Iterations::Fixed(0) => return Err(RuntimeError::ZeroIterations),
            Iterations::Fixed(n) if u == 0 || u > *n => {
                return Err(RuntimeError::InvalidUnroll {
                    unroll: u,
                    iterations: *n,
                })
            }
            Iterations::While { .. } if u != 1 => {
                return Err(RuntimeError::UnsupportedOptions("a while loop cannot be unrolled"))
            }
            Iterations::While { .. } if self.update => {
                return Err(RuntimeError::UnsupportedOptions("a while loop cannot use update mode"))
            }
            _ => {}
        }
        if self.mode == GraphMode::Cached && (u != 1 || self.update) {
            return Err(RuntimeError::UnsupportedOptions(
                "cached graphs support neither unrolling nor update mode",
            ));
        }
        Ok(())
    }
}

/// Recorded node, as seen by tests and tools.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeInfo {
    pub id: TaskId,
    pub label: String,
    /// Unrolled copy the node belongs to.
    pub copy: u64,
    pub accesses: Vec<DataAccess>,
    pub condition: bool,
}

/// Shape of a closed graph.
#[derive(Clone, Debug, Default)]
pub struct DctgInfo {
    pub nodes: Vec<NodeInfo>,
    pub intra_edges: Vec<Edge<TaskId>>,
    pub cross_edges: Vec<Edge<TaskId>>,
    /// Condition node to root edges.
    pub gating_edges: Vec<(TaskId, TaskId)>,
    pub unroll: u64,
}

impl DctgInfo {
    pub fn node(&self, id: TaskId) -> Option<&NodeInfo> {
        self.nodes.iter().find(|n| n.id == id)
    }
}

struct GateState {
    open: bool,
    waiting: Vec<Arc<Node>>,
    finished: bool,
}

struct BarrierState {
    count: usize,
    total: Option<usize>,
}

pub(crate) struct GraphShared {
    mode: GraphMode,
    nodes: Mutex<Vec<Arc<Node>>>,
    live: AtomicUsize,
    gate: Mutex<GateState>,
    gate_node: Mutex<Option<Arc<Node>>>,
    barrier: Mutex<BarrierState>,
}

impl GraphShared {
    fn new(mode: GraphMode, gated: bool) -> Self {
        GraphShared {
            mode,
            nodes: Mutex::new(Vec::new()),
            live: AtomicUsize::new(1),
            gate: Mutex::new(GateState {
                open: !gated,
                waiting: Vec::new(),
                finished: false,
            }),
            gate_node: Mutex::new(None),
            barrier: Mutex::new(BarrierState { count: 0, total: None }),
        }
    }

    fn snapshot(&self) -> Vec<Arc<Node>> {
        self.nodes.lock().clone()
    }

    /// Releases a root node now, or once the boundary gate opens.
    fn release_root(&self, shared: &Shared, node: &Arc<Node>, out: &mut Vec<Ready>) {
        let mut g = self.gate.lock();
        if !g.open {
            g.waiting.push(Arc::clone(node));
            return;
        }
        drop(g);
        if node.release(0) {
            shared.admit(Arc::clone(node), 0, false, out);
        }
    }

    pub(crate) fn open_gate(&self, shared: &Shared, out: &mut Vec<Ready>) {
        let mut g = self.gate.lock();
        g.open = true;
        let waiting = std::mem::take(&mut g.waiting);
        let finished = g.finished;
        drop(g);
        for n in waiting {
            if n.release(0) {
                shared.admit(n, 0, false, out);
            }
        }
        if finished {
            self.finish_gate(shared, out);
        }
    }

    fn finish_gate(&self, shared: &Shared, out: &mut Vec<Ready>) {
        let gate = self.gate_node.lock().take();
        shared.graph_finished(gate, out);
    }

    pub(crate) fn node_retired(&self, shared: &Shared, out: &mut Vec<Ready>) {
        if self.live.fetch_sub(1, Ordering::AcqRel) == 1 {
            self.nodes.lock().clear();
            let mut g = self.gate.lock();
            if g.open {
                drop(g);
                self.finish_gate(shared, out);
            } else {
                g.finished = true;
            }
        }
    }

    pub(crate) fn after_node_finished(&self, shared: &Shared, iter: u64, out: &mut Vec<Ready>) {
        if self.mode != GraphMode::Cached {
            return;
        }
        let fire = {
            let mut b = self.barrier.lock();
            b.count += 1;
            b.total == Some(b.count) && {
                b.count = 0;
                true
            }
        };
        if fire {
            self.release_all(shared, iter + 1, out);
        }
    }

    fn release_all(&self, shared: &Shared, iter: u64, out: &mut Vec<Ready>) {
        for n in self.snapshot() {
            if n.release(iter) {
                shared.admit(n, iter, false, out);
            }
        }
    }

    /// Ends the loop after iteration `limit - 1`.
    pub(crate) fn stop_after(&self, shared: &Shared, limit: u64, out: &mut Vec<Ready>) {
        for n in self.snapshot() {
            if n.lower_limit(limit) {
                shared.on_retire(&n, out);
            }
        }
    }
}

struct Recorded {
    node: Arc<Node>,
    copy: u64,
    intra: u32,
    root: bool,
}

struct Recorder<'a> {
    rt: &'a Runtime,
    graph: Arc<GraphShared>,
    bottom: BottomMap<Arc<Node>>,
    top: TopMap<Arc<Node>>,
    nodes: Vec<Recorded>,
    intra_edges: Vec<Edge<TaskId>>,
    copy: u64,
    unroll: u64,
    limits: Vec<u64>,
    update: bool,
    gated: bool,
}

impl Recorder<'_> {
    fn add(&mut self, spec: NodeSpec) -> Arc<Node> {
        let shared = &self.rt.shared;
        let node = Arc::new(Node::new(next_task_id(), spec));
        let edges = self.bottom.register(&node, &node.accesses, Some(&mut self.top));
        let root = edges.is_empty();
        node.set_base0(edges.len() as u32 + u32::from(root && self.gated));
        self.graph.live.fetch_add(1, Ordering::AcqRel);
        self.graph.nodes.lock().push(Arc::clone(&node));
        shared.created(0, &node, node.loop_index(0));
        let mut out = Vec::new();
        for e in &edges {
            self.intra_edges.push(e.ids());
            if e.from.link(&node, EdgeKind::Intra, true) && node.release(0) {
                shared.admit(Arc::clone(&node), 0, true, &mut out);
            }
        }
        if root && self.gated {
            self.graph.release_root(shared, &node, &mut out);
        } else if let Some(j) = node.kick() {
            shared.admit(Arc::clone(&node), j, false, &mut out);
        }
        self.nodes.push(Recorded {
            node: Arc::clone(&node),
            copy: self.copy,
            intra: edges.len() as u32,
            root,
        });
        shared.sched.enqueue(0, out);
        node
    }
}

impl Spawner for Recorder<'_> {
    fn spawn(&mut self, task: Task) -> Result<TaskId, RuntimeError> {
        let accesses = normalize_access_list(task.accesses)?;
        let node = self.add(NodeSpec {
            label: task.label,
            priority: task.priority,
            accesses,
            kind: NodeKind::Task(task.body.unwrap_or_else(|| Arc::new(|_| {}))),
            owner: Owner::Graph(Arc::clone(&self.graph)),
            iter_base: self.copy,
            iter_stride: self.unroll,
            limit: self.limits[self.copy as usize],
            base0: 0,
            args: task.args,
            update: self.update,
        });
        Ok(node.id)
    }
}

/// Re-runs the body for one iteration and matches its tasks to the graph.
struct Capture<'a> {
    nodes: &'a [Recorded],
    copy: u64,
    iter: u64,
    pos: usize,
    error: Option<String>,
}

impl Capture<'_> {
    fn next_node(&mut self) -> Option<&Recorded> {
        while let Some(r) = self.nodes.get(self.pos) {
            self.pos += 1;
            if r.copy == self.copy && matches!(r.node.kind, NodeKind::Task(_)) {
                return Some(r);
            }
        }
        None
    }

    fn finish(mut self) -> Option<String> {
        if self.error.is_none() && self.next_node().is_some() {
            self.error = Some("fewer tasks than recorded".into());
        }
        self.error
    }
}

impl Spawner for Capture<'_> {
    fn spawn(&mut self, task: Task) -> Result<TaskId, RuntimeError> {
        let accesses = normalize_access_list(task.accesses)?;
        let iter = self.iter;
        let Some(r) = self.next_node() else {
            self.error.get_or_insert_with(|| "more tasks than recorded".into());
            return Ok(TaskId(0));
        };
        let node = Arc::clone(&r.node);
        if self.error.is_none() && (*node.label != *task.label || *node.accesses != *accesses) {
            self.error = Some(format!(
                "task `{}` {:?} does not match recorded `{}` {:?}",
                task.label, accesses, node.label, node.accesses
            ));
        }
        if self.error.is_none() {
            node.set_args(iter, task.args);
        }
        Ok(node.id)
    }
}

impl Runtime {
    /// Records the loop body into a graph and replays it.
    ///
    /// `body(i, spawner)` creates the tasks of loop index `i`. The call
    /// returns once the graph is closed; the loop then runs in the
    /// background. Use [`Runtime::taskwait`] to wait for it.
    pub fn run_taskiter<F>(&self, opts: TaskiterOptions, mut body: F) -> Result<DctgInfo, RuntimeError>
    where
        F: FnMut(u64, &mut dyn Spawner) -> Result<(), RuntimeError>,
    {
        opts.validate()?;
        let boundary = normalize_access_list(opts.boundary.clone())?;
        let shared = &self.shared;
        if shared.recording.swap(true, Ordering::AcqRel) {
            return Err(RuntimeError::NestedTaskiter);
        }
        let u = opts.unroll;
        let (limits, cond) = match &opts.iterations {
            Iterations::Fixed(n) => ((0..u).map(|c| (n - c).div_ceil(u)).collect::<Vec<_>>(), None),
            Iterations::While { condition, reads } => (
                vec![u64::MAX],
                Some((Arc::clone(condition), normalize_access_list(reads.clone())?)),
            ),
        };
        let gated = !boundary.is_empty();
        let graph = Arc::new(GraphShared::new(opts.mode, gated));
        shared.scope_add();
        if gated {
            let gate = Arc::new(Node::new(
                next_task_id(),
                NodeSpec {
                    label: "taskiter".into(),
                    priority: 0,
                    accesses: boundary,
                    kind: NodeKind::Gate(Arc::clone(&graph)),
                    owner: Owner::Gate,
                    iter_base: 0,
                    iter_stride: 0,
                    limit: 1,
                    base0: 0,
                    args: None,
                    update: false,
                },
            ));
            *graph.gate_node.lock() = Some(Arc::clone(&gate));
            self.register_in_main(gate);
        }
        let mut rec = Recorder {
            rt: self,
            graph: Arc::clone(&graph),
            bottom: BottomMap::new(),
            top: TopMap::default(),
            nodes: Vec::new(),
            intra_edges: Vec::new(),
            copy: 0,
            unroll: u,
            limits,
            update: opts.update,
            gated,
        };
        let mut result = Ok(());
        for c in 0..u {
            rec.copy = c;
            if let Err(e) = body(c, &mut rec) {
                result = Err(e);
                break;
            }
        }
        if result.is_err() {
            let mut out = Vec::new();
            graph.stop_after(shared, 1, &mut out);
            shared.sched.enqueue(0, out);
        }
        let mut gating = Vec::new();
        if let Some((condition, reads)) = cond {
            rec.copy = 0;
            let cnode = rec.add(NodeSpec {
                label: "condition".into(),
                priority: 0,
                accesses: reads,
                kind: NodeKind::Condition(condition),
                owner: Owner::Graph(Arc::clone(&graph)),
                iter_base: 0,
                iter_stride: 1,
                limit: u64::MAX,
                base0: 0,
                args: None,
                update: false,
            });
            for r in rec.nodes.iter().filter(|r| r.root) {
                gating.push((Arc::clone(&cnode), Arc::clone(&r.node)));
            }
        }
        let info = self.close(&mut rec, &gating);
        shared.recording.store(false, Ordering::Release);
        result?;

        if opts.update {
            let rounds = rec.limits[0];
            for j in 1..rounds {
                for c in 0..u {
                    if rec.limits[c as usize] <= j {
                        continue;
                    }
                    let mut cap = Capture {
                        nodes: &rec.nodes,
                        copy: c,
                        iter: j,
                        pos: 0,
                        error: None,
                    };
                    let r = body(c + j * u, &mut cap);
                    let err = match r {
                        Err(e) => Some(e),
                        Ok(()) => cap.finish().map(|detail| RuntimeError::ShapeMismatch {
                            iteration: c + j * u,
                            detail,
                        }),
                    };
                    if let Some(e) = err {
                        let mut out = Vec::new();
                        graph.stop_after(shared, j, &mut out);
                        shared.sched.enqueue(0, out);
                        return Err(e);
                    }
                }
                let mut out = Vec::new();
                for r in &rec.nodes {
                    if r.node.release(j) {
                        shared.admit(Arc::clone(&r.node), j, false, &mut out);
                    }
                }
                shared.sched.enqueue(0, out);
            }
        }
        Ok(info)
    }

    /// Records a graph replayed with a barrier between iterations.
    pub fn run_caching<F>(&self, iterations: u64, body: F) -> Result<DctgInfo, RuntimeError>
    where
        F: FnMut(u64, &mut dyn Spawner) -> Result<(), RuntimeError>,
    {
        self.run_taskiter(TaskiterOptions::fixed(iterations).mode(GraphMode::Cached), body)
    }

    fn close(&self, rec: &mut Recorder<'_>, gating: &[(Arc<Node>, Arc<Node>)]) -> DctgInfo {
        let shared = &self.shared;
        let graph = &rec.graph;
        let mut cross = Vec::new();
        if graph.mode == GraphMode::Cyclic {
            cross = match_cross_iteration(&rec.top, &rec.bottom);
            if let Some(k) = shared.config.drop_cross_edge {
                if k < cross.len() {
                    cross.remove(k);
                }
            }
        }
        let mut extra = vec![0u32; rec.nodes.len()];
        let mut credits: Vec<Arc<Node>> = Vec::new();
        let index_of = |n: &Arc<Node>| rec.nodes.iter().position(|r| Arc::ptr_eq(&r.node, n)).expect("graph node");
        let links = cross
            .iter()
            .map(|e| (&e.from, &e.to, true))
            .chain(gating.iter().map(|(f, t)| (f, t, false)));
        for (from, to, local) in links {
            if to.limit() <= 1 {
                continue;
            }
            extra[index_of(to)] += 1;
            if from.link(to, EdgeKind::CrossIteration, local) {
                credits.push(Arc::clone(to));
            }
        }
        let fixed = u32::from(rec.update) + u32::from(graph.mode == GraphMode::Cached);
        let mut out = Vec::new();
        for (r, x) in rec.nodes.iter().zip(&extra) {
            if let Some(j) = r.node.seal(r.intra + x + fixed) {
                shared.admit(Arc::clone(&r.node), j, false, &mut out);
            }
        }
        for n in credits {
            if n.release(1) {
                shared.admit(n, 1, true, &mut out);
            }
        }
        if graph.mode == GraphMode::Cached {
            let fire = {
                let mut b = graph.barrier.lock();
                b.total = Some(rec.nodes.len());
                b.count == rec.nodes.len() && {
                    b.count = 0;
                    true
                }
            };
            if fire {
                graph.release_all(shared, 1, &mut out);
            }
        }
        graph.node_retired(shared, &mut out);
        shared.sched.enqueue(0, out);

        DctgInfo {
            nodes: rec
                .nodes
                .iter()
                .map(|r| NodeInfo {
                    id: r.node.id,
                    label: r.node.label.to_string(),
                    copy: r.copy,
                    accesses: r.node.accesses.to_vec(),
                    condition: matches!(r.node.kind, NodeKind::Condition(_)),
                })
                .collect(),
            intra_edges: std::mem::take(&mut rec.intra_edges),
            cross_edges: cross.iter().map(Edge::ids).collect(),
            gating_edges: gating.iter().map(|(f, t)| (f.id, t.id)).collect(),
            unroll: rec.unroll,
        }
    }
}
