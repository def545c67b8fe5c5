//! Task descriptors and their dependency counters.
//!
//! Every node carries two release counters, one per iteration parity, so that
//! releases for the next iteration can accumulate while the current one is
//! still pending. Releases that target an iteration two or more steps ahead of
//! the node's current one are parked in a small FIFO and folded into the
//! freed parity slot when the node completes.

use std::collections::VecDeque;
use std::sync::atomic::AtomicUsize;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::access::DataAccess;
use crate::dctg::GraphShared;
use crate::deps::{EdgeKind, TaskId, TaskRef};
use crate::runtime::TaskContext;
use crate::scheduler::Schedulable;

pub(crate) type Body = Arc<dyn Fn(&TaskContext<'_>) + Send + Sync>;
pub type ConditionFn = Arc<dyn Fn(u64) -> bool + Send + Sync>;

pub(crate) enum NodeKind {
    Task(Body),
    /// Evaluates the loop condition; `false` stops the graph after this iteration.
    Condition(ConditionFn),
    /// Stands for a taskiter in its parent scope. Never executed by a worker.
    Gate(Arc<GraphShared>),
}

pub(crate) enum Owner {
    /// Top-level task of the runtime's main scope.
    Scope,
    /// Nested task; the parent instance completes after it.
    Parent(Arc<Node>),
    Graph(Arc<GraphShared>),
    /// Boundary node of a taskiter; its graph accounts for it.
    Gate,
}

#[derive(Clone)]
pub(crate) struct Succ {
    pub node: Arc<Node>,
    pub kind: EdgeKind,
    /// Whether the edge comes from a shared access (IS candidate).
    pub local: bool,
}

pub(crate) struct Node {
    pub id: TaskId,
    pub label: Arc<str>,
    pub priority: i32,
    pub accesses: Box<[DataAccess]>,
    pub kind: NodeKind,
    pub owner: Owner,
    /// Loop index of iteration `j` is `iter_base + j * iter_stride`.
    pub iter_base: u64,
    pub iter_stride: u64,
    /// Per-iteration payloads (update mode).
    pub args: Option<Mutex<Vec<Option<Vec<u8>>>>>,
    /// Body plus unfinished nested children of the running instance.
    pub pending: AtomicUsize,
    state: Mutex<NodeState>,
}

struct NodeState {
    completed: u64,
    in_flight: bool,
    retired: bool,
    sealed: bool,
    limit: u64,
    received: [u32; 2],
    deferred: VecDeque<u32>,
    base0: u32,
    base_next: u32,
    successors: Vec<Succ>,
    frozen: Option<Arc<[Succ]>>,
}

impl NodeState {
    fn base(&self, iter: u64) -> u32 {
        if iter == 0 {
            self.base0
        } else {
            self.base_next
        }
    }

    fn try_start(&mut self) -> Option<u64> {
        let j = self.completed;
        if self.in_flight || self.retired || j >= self.limit || (j > 0 && !self.sealed) {
            return None;
        }
        if self.received[(j % 2) as usize] != self.base(j) {
            return None;
        }
        self.in_flight = true;
        Some(j)
    }

    fn retire(&mut self) {
        self.retired = true;
        self.successors = Vec::new();
        self.frozen = None;
        self.deferred.clear();
    }
}

/// Outcome of finishing one iteration of a node.
pub(crate) struct Finished {
    pub iter: u64,
    pub successors: Arc<[Succ]>,
    pub self_ready: Option<u64>,
    pub retired: bool,
}

pub(crate) struct NodeSpec {
    pub label: Arc<str>,
    pub priority: i32,
    pub accesses: Vec<DataAccess>,
    pub kind: NodeKind,
    pub owner: Owner,
    pub iter_base: u64,
    pub iter_stride: u64,
    pub limit: u64,
    pub base0: u32,
    pub args: Option<Vec<u8>>,
    pub update: bool,
}

impl Node {
    pub(crate) fn new(id: TaskId, spec: NodeSpec) -> Self {
        let args = if spec.update || spec.args.is_some() {
            Some(Mutex::new(vec![spec.args]))
        } else {
            None
        };
        Node {
            id,
            label: spec.label,
            priority: spec.priority,
            accesses: spec.accesses.into_boxed_slice(),
            kind: spec.kind,
            owner: spec.owner,
            iter_base: spec.iter_base,
            iter_stride: spec.iter_stride,
            args,
            pending: AtomicUsize::new(0),
            state: Mutex::new(NodeState {
                completed: 0,
                in_flight: false,
                retired: false,
                sealed: false,
                limit: spec.limit,
                received: [0, 0],
                deferred: VecDeque::new(),
                base0: spec.base0,
                base_next: 0,
                successors: Vec::new(),
                frozen: None,
            }),
        }
    }

    pub(crate) fn loop_index(&self, iter: u64) -> u64 {
        self.iter_base + iter * self.iter_stride
    }

    fn in_graph(&self) -> bool {
        matches!(self.owner, Owner::Graph(_))
    }

    pub(crate) fn graph(&self) -> Option<&Arc<GraphShared>> {
        match &self.owner {
            Owner::Graph(g) => Some(g),
            _ => None,
        }
    }

    /// Adds an edge to `succ`. Returns true when this node already finished
    /// the iteration the edge refers to, in which case the caller credits the
    /// successor itself.
    pub(crate) fn link(&self, succ: &Arc<Node>, kind: EdgeKind, local: bool) -> bool {
        let mut s = self.state.lock();
        let done = s.completed >= 1;
        let keep = if self.in_graph() { !s.retired } else { !done };
        if keep {
            s.successors.push(Succ {
                node: Arc::clone(succ),
                kind,
                local,
            });
        }
        done
    }

    /// Applies one release aimed at iteration `iter`. Returns true when the
    /// node became ready for it; exactly one caller observes that.
    pub(crate) fn release(&self, iter: u64) -> bool {
        let mut s = self.state.lock();
        if iter >= s.limit || s.retired {
            return false;
        }
        let c = s.completed;
        assert!(
            iter >= c,
            "release for finished iteration {iter} of task {} ({})",
            self.id,
            self.label
        );
        if iter <= c + 1 {
            let slot = (iter % 2) as usize;
            s.received[slot] += 1;
            if iter == 0 || s.sealed {
                assert!(
                    s.received[slot] <= s.base(iter),
                    "too many releases for iteration {iter} of task {} ({})",
                    self.id,
                    self.label
                );
            }
        } else {
            let idx = (iter - c - 2) as usize;
            if s.deferred.len() <= idx {
                s.deferred.resize(idx + 1, 0);
            }
            s.deferred[idx] += 1;
        }
        iter == c && s.try_start().is_some()
    }

    /// Starts the current iteration if nothing is outstanding.
    pub(crate) fn kick(&self) -> Option<u64> {
        self.state.lock().try_start()
    }

    /// Marks the running iteration as finished.
    pub(crate) fn finish(&self) -> Finished {
        let mut s = self.state.lock();
        assert!(s.in_flight, "task {} finished while not running", self.id);
        let c = s.completed;
        s.in_flight = false;
        s.completed = c + 1;
        s.received[(c % 2) as usize] = s.deferred.pop_front().unwrap_or(0);
        let successors: Arc<[Succ]> = match &s.frozen {
            Some(f) => Arc::clone(f),
            None if self.in_graph() => s.successors.clone().into(),
            None => std::mem::take(&mut s.successors).into(),
        };
        let retired = s.completed >= s.limit;
        let self_ready = if retired {
            s.retire();
            None
        } else {
            s.try_start()
        };
        Finished {
            iter: c,
            successors,
            self_ready,
            retired,
        }
    }

    /// Fixes the successor list and the per-iteration requirement for
    /// iterations after the first. Returns the iteration that became ready.
    pub(crate) fn seal(&self, base_next: u32) -> Option<u64> {
        let mut s = self.state.lock();
        s.sealed = true;
        if s.retired {
            return None;
        }
        s.base_next = base_next;
        let succ = std::mem::take(&mut s.successors);
        s.frozen = Some(succ.into());
        for j in [s.completed, s.completed + 1] {
            if j > 0 {
                assert!(s.received[(j % 2) as usize] <= base_next);
            }
        }
        s.try_start()
    }

    /// Lowers the iteration limit. Returns true if the node retired now.
    pub(crate) fn lower_limit(&self, limit: u64) -> bool {
        let mut s = self.state.lock();
        s.limit = s.limit.min(limit);
        if !s.retired && !s.in_flight && s.completed >= s.limit {
            s.retire();
            true
        } else {
            false
        }
    }

    /// Sets the number of releases iteration 0 waits for. Only valid before
    /// the node is reachable from any predecessor.
    pub(crate) fn set_base0(&self, n: u32) {
        self.state.lock().base0 = n;
    }

    pub(crate) fn limit(&self) -> u64 {
        self.state.lock().limit
    }

    pub(crate) fn take_args(&self, iter: u64) -> Option<Vec<u8>> {
        let args = self.args.as_ref()?;
        let mut v = args.lock();
        v.get_mut(iter as usize).and_then(Option::take)
    }

    pub(crate) fn set_args(&self, iter: u64, payload: Option<Vec<u8>>) {
        if let Some(args) = &self.args {
            let mut v = args.lock();
            let idx = iter as usize;
            if v.len() <= idx {
                v.resize_with(idx + 1, || None);
            }
            v[idx] = payload;
        }
    }
}

impl TaskRef for Arc<Node> {
    fn task_id(&self) -> TaskId {
        self.id
    }
}

/// A node instance ready to run.
pub(crate) struct Ready {
    pub node: Arc<Node>,
    pub iter: u64,
    pub successor: bool,
}

impl Schedulable for Ready {
    fn priority(&self) -> i32 {
        self.node.priority
    }

    fn is_successor(&self) -> bool {
        self.successor
    }
}

impl std::fmt::Debug for Ready {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{}", self.node.id, self.iter)
    }
}
