//! Centralized ready queue behind a delegation lock, plus the
//! immediate-successor (IS) policy in its two placements.
//!
//! Workers that find the queue lock taken post a request in their own slot
//! instead of queueing on the mutex; whoever holds the lock serves pending
//! requests before releasing it, so one acquisition can hand tasks to several
//! workers.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::time::Duration;

use crossbeam_utils::CachePadded;
use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What the scheduler needs to know about a ready task.
pub trait Schedulable: Send {
    fn priority(&self) -> i32;
    /// Whether the task was made ready through a dependency of the task that
    /// just finished on this worker (only those may become an IS).
    fn is_successor(&self) -> bool;
}

/// Priority-ordered multi-queue, FIFO within a priority level.
#[derive(Debug)]
pub struct ReadyQueue<T> {
    // Sorted by descending priority. Levels are kept once created.
    levels: Vec<(i32, VecDeque<T>)>,
    len: usize,
}

impl<T> Default for ReadyQueue<T> {
    fn default() -> Self {
        ReadyQueue { levels: Vec::new(), len: 0 }
    }
}

impl<T: Schedulable> ReadyQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, task: T) {
        let prio = task.priority();
        let idx = match self.levels.binary_search_by(|(p, _)| prio.cmp(p)) {
            Ok(i) => i,
            Err(i) => {
                self.levels.insert(i, (prio, VecDeque::new()));
                i
            }
        };
        self.levels[idx].1.push_back(task);
        self.len += 1;
    }

    pub fn pop(&mut self) -> Option<T> {
        if self.len == 0 {
            return None;
        }
        for (_, q) in self.levels.iter_mut() {
            if let Some(t) = q.pop_front() {
                self.len -= 1;
                return Some(t);
            }
        }
        None
    }

    /// Highest priority currently queued.
    pub fn top_priority(&self) -> Option<i32> {
        self.levels.iter().find(|(_, q)| !q.is_empty()).map(|(p, _)| *p)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placement {
    None,
    InsideScheduler,
    OutsideScheduler,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub placement: Placement,
    /// Probability that a ready set does not produce an immediate successor.
    pub skip_probability: f64,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            placement: Placement::None,
            skip_probability: 0.0,
            seed: 0,
        }
    }
}

/// Counter snapshot. `tasks_popped + bypasses` equals executed tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedTelemetry {
    pub scheduler_entries: u64,
    pub bypasses: u64,
    pub tasks_enqueued: u64,
    pub tasks_popped: u64,
    pub tasks_created: u64,
    /// Ready sets that contained at least one IS candidate.
    pub ready_sets: u64,
    /// Ready sets that produced an IS.
    pub is_marked: u64,
    pub executions: u64,
}

#[derive(Default)]
struct WorkerCounters {
    scheduler_entries: AtomicU64,
    bypasses: AtomicU64,
    tasks_enqueued: AtomicU64,
    tasks_popped: AtomicU64,
    tasks_created: AtomicU64,
    ready_sets: AtomicU64,
    is_marked: AtomicU64,
    executions: AtomicU64,
}

fn bump(c: &AtomicU64, n: u64) {
    c.fetch_add(n, Ordering::Relaxed);
}

const IDLE: u8 = 0;
const WAITING: u8 = 1;
const CLAIMED: u8 = 2;
const SERVED: u8 = 3;

struct Request<T> {
    state: AtomicU8,
    task: Mutex<Option<T>>,
}

/// Per-worker state owned by the worker thread.
pub struct WorkerSlot<T> {
    pub id: usize,
    /// The immediate successor, executed next without entering the scheduler.
    pub immediate_successor: Option<T>,
    rng: ChaCha8Rng,
}

impl<T> WorkerSlot<T> {
    pub fn new(id: usize, seed: u64) -> Self {
        let mixed = seed ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        WorkerSlot {
            id,
            immediate_successor: None,
            rng: ChaCha8Rng::seed_from_u64(mixed),
        }
    }
}

/// What the worker does after a task finished.
#[derive(Debug)]
pub enum Next<T> {
    ExecuteNow(T),
    FetchFromScheduler,
}

pub struct Scheduler<T> {
    queue: Mutex<ReadyQueue<T>>,
    queued: AtomicUsize,
    requests: Box<[CachePadded<Request<T>>]>,
    counters: Box<[CachePadded<WorkerCounters>]>,
    policy: PolicyConfig,
    sleep_lock: Mutex<()>,
    wake: Condvar,
    sleepers: AtomicUsize,
}

impl<T: Schedulable> Scheduler<T> {
    pub fn new(workers: usize, policy: PolicyConfig) -> Self {
        let workers = workers.max(1);
        Scheduler {
            queue: Mutex::new(ReadyQueue::new()),
            queued: AtomicUsize::new(0),
            requests: (0..workers)
                .map(|_| {
                    CachePadded::new(Request {
                        state: AtomicU8::new(IDLE),
                        task: Mutex::new(None),
                    })
                })
                .collect(),
            counters: (0..workers).map(|_| CachePadded::new(WorkerCounters::default())).collect(),
            policy,
            sleep_lock: Mutex::new(()),
            wake: Condvar::new(),
            sleepers: AtomicUsize::new(0),
        }
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy
    }

    pub fn workers(&self) -> usize {
        self.requests.len()
    }

    pub fn worker_slot(&self, id: usize) -> WorkerSlot<T> {
        WorkerSlot::new(id, self.policy.seed)
    }

    /// Approximate number of queued tasks.
    pub fn queued(&self) -> usize {
        self.queued.load(Ordering::SeqCst)
    }

    /// Publishes `tasks` under the queue lock. Counts one scheduler entry
    /// when the batch is non-empty.
    pub fn enqueue(&self, worker: usize, tasks: impl IntoIterator<Item = T>) {
        let mut tasks = tasks.into_iter().peekable();
        if tasks.peek().is_none() {
            return;
        }
        let c = &self.counters[worker];
        bump(&c.scheduler_entries, 1);
        let mut q = self.queue.lock();
        let mut n = 0;
        for t in tasks {
            q.push(t);
            n += 1;
        }
        self.serve_waiters(&mut q, worker);
        self.queued.store(q.len(), Ordering::SeqCst);
        drop(q);
        bump(&c.tasks_enqueued, n);
        self.notify(n as usize);
    }

    /// Returns a highest-priority task, or `None` when the queue is empty.
    pub fn fetch(&self, worker: usize) -> Option<T> {
        let got = self.fetch_inner(worker);
        if got.is_some() {
            let c = &self.counters[worker];
            bump(&c.scheduler_entries, 1);
            bump(&c.tasks_popped, 1);
        }
        got
    }

    fn fetch_inner(&self, worker: usize) -> Option<T> {
        let req = &self.requests[worker];
        let mut spins = 0u32;
        loop {
            if self.queued.load(Ordering::SeqCst) == 0 && !self.queue.is_locked() {
                return None;
            }
            if let Some(mut q) = self.queue.try_lock() {
                let mine = q.pop();
                self.serve_waiters(&mut q, worker);
                self.queued.store(q.len(), Ordering::SeqCst);
                return mine;
            }
            // Lock busy: leave a request for the holder.
            req.state.store(WAITING, Ordering::SeqCst);
            loop {
                match req.state.load(Ordering::Acquire) {
                    SERVED => {
                        let t = req.task.lock().take();
                        req.state.store(IDLE, Ordering::Release);
                        return t;
                    }
                    CLAIMED => {}
                    _ => {
                        if !self.queue.is_locked()
                            && req
                                .state
                                .compare_exchange(WAITING, IDLE, Ordering::AcqRel, Ordering::Acquire)
                                .is_ok()
                        {
                            break;
                        }
                    }
                }
                spins += 1;
                if spins.is_multiple_of(64) {
                    std::thread::yield_now();
                } else {
                    std::hint::spin_loop();
                }
            }
        }
    }

    fn serve_waiters(&self, q: &mut ReadyQueue<T>, holder: usize) {
        for (i, req) in self.requests.iter().enumerate() {
            if i == holder || req.state.load(Ordering::Acquire) != WAITING {
                continue;
            }
            if req
                .state
                .compare_exchange(WAITING, CLAIMED, Ordering::AcqRel, Ordering::Acquire)
                .is_err()
            {
                continue;
            }
            *req.task.lock() = q.pop();
            req.state.store(SERVED, Ordering::Release);
        }
    }

    /// Applies the IS policy to the tasks released by the task that just
    /// finished on `slot`'s worker.
    pub fn on_task_finished(&self, slot: &mut WorkerSlot<T>, mut ready: Vec<T>) -> Next<T> {
        let c = &self.counters[slot.id];
        let mut is = None;
        if self.policy.placement != Placement::None {
            let mut best: Option<(usize, i32)> = None;
            for (i, t) in ready.iter().enumerate() {
                if t.is_successor() && best.is_none_or(|(_, p)| t.priority() > p) {
                    best = Some((i, t.priority()));
                }
            }
            if let Some((idx, _)) = best {
                bump(&c.ready_sets, 1);
                let draw: f64 = slot.rng.gen();
                if draw >= self.policy.skip_probability {
                    bump(&c.is_marked, 1);
                    is = Some(ready.remove(idx));
                }
            }
        }
        match (self.policy.placement, is) {
            (Placement::OutsideScheduler, Some(t)) => {
                self.enqueue(slot.id, ready);
                Next::ExecuteNow(t)
            }
            (Placement::InsideScheduler, Some(t)) => {
                // Same lock acquisition publishes the rest and hands the IS back.
                bump(&c.scheduler_entries, 1);
                bump(&c.tasks_popped, 1);
                let n = ready.len() as u64;
                if n > 0 {
                    let mut q = self.queue.lock();
                    for r in ready {
                        q.push(r);
                    }
                    self.serve_waiters(&mut q, slot.id);
                    self.queued.store(q.len(), Ordering::SeqCst);
                    drop(q);
                    bump(&c.tasks_enqueued, n);
                    self.notify(n as usize);
                }
                Next::ExecuteNow(t)
            }
            _ => {
                self.enqueue(slot.id, ready);
                Next::FetchFromScheduler
            }
        }
    }

    pub fn record_bypass(&self, worker: usize) {
        bump(&self.counters[worker].bypasses, 1);
    }

    pub fn record_execution(&self, worker: usize) {
        bump(&self.counters[worker].executions, 1);
    }

    pub fn record_created(&self, worker: usize, n: u64) {
        bump(&self.counters[worker].tasks_created, n);
    }

    pub fn telemetry(&self) -> SchedTelemetry {
        let mut t = SchedTelemetry::default();
        for c in self.counters.iter() {
            let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
            t.scheduler_entries += get(&c.scheduler_entries);
            t.bypasses += get(&c.bypasses);
            t.tasks_enqueued += get(&c.tasks_enqueued);
            t.tasks_popped += get(&c.tasks_popped);
            t.tasks_created += get(&c.tasks_created);
            t.ready_sets += get(&c.ready_sets);
            t.is_marked += get(&c.is_marked);
            t.executions += get(&c.executions);
        }
        t
    }

    fn notify(&self, n: usize) {
        if self.sleepers.load(Ordering::SeqCst) > 0 {
            let _g = self.sleep_lock.lock();
            if n == 1 {
                self.wake.notify_one();
            } else {
                self.wake.notify_all();
            }
        }
    }

    /// Wakes every parked worker (shutdown, scope completion).
    pub fn wake_all(&self) {
        let _g = self.sleep_lock.lock();
        self.wake.notify_all();
    }

    /// Parks the calling worker until work is enqueued, `done` holds, or the
    /// timeout elapses.
    pub fn park(&self, timeout: Duration, done: impl Fn() -> bool) {
        let mut g = self.sleep_lock.lock();
        self.sleepers.fetch_add(1, Ordering::SeqCst);
        if self.queued.load(Ordering::SeqCst) == 0 && !done() {
            self.wake.wait_for(&mut g, timeout);
        }
        self.sleepers.fetch_sub(1, Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[derive(Debug, Clone, PartialEq)]
    struct T {
        name: &'static str,
        prio: i32,
        succ: bool,
    }

    impl Schedulable for T {
        fn priority(&self) -> i32 {
            self.prio
        }
        fn is_successor(&self) -> bool {
            self.succ
        }
    }

    fn t(name: &'static str, prio: i32) -> T {
        T { name, prio, succ: true }
    }

    #[test]
    fn pop_order_is_priority_then_fifo() {
        let mut q = ReadyQueue::new();
        for (n, p) in [("a", 3), ("b", 7), ("c", 7), ("d", 1)] {
            q.push(t(n, p));
        }
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).map(|x| x.name).collect();
        assert_eq!(order, vec!["b", "c", "a", "d"]);
    }

    #[test]
    fn fetch_on_empty_is_idle() {
        let s: Scheduler<T> = Scheduler::new(1, PolicyConfig::default());
        assert!(s.fetch(0).is_none());
        assert_eq!(s.telemetry().scheduler_entries, 0);
    }

    #[test]
    fn outside_picks_first_highest_priority() {
        let s = Scheduler::new(
            1,
            PolicyConfig {
                placement: Placement::OutsideScheduler,
                ..Default::default()
            },
        );
        let mut slot = s.worker_slot(0);
        let next = s.on_task_finished(&mut slot, vec![t("s5", 1), t("s9a", 9), t("s9b", 9)]);
        match next {
            Next::ExecuteNow(x) => assert_eq!(x.name, "s9a"),
            other => panic!("expected IS, got {other:?}"),
        }
        let tel = s.telemetry();
        assert_eq!(tel.tasks_enqueued, 2);
        // Only the enqueue of the two leftovers touched the lock.
        assert_eq!(tel.scheduler_entries, 1);
        assert_eq!(s.fetch(0).unwrap().name, "s9b");
        assert_eq!(s.fetch(0).unwrap().name, "s5");
    }

    #[test]
    fn empty_ready_set_fetches() {
        let s: Scheduler<T> = Scheduler::new(
            1,
            PolicyConfig {
                placement: Placement::OutsideScheduler,
                ..Default::default()
            },
        );
        let mut slot = s.worker_slot(0);
        assert!(matches!(s.on_task_finished(&mut slot, vec![]), Next::FetchFromScheduler));
        assert_eq!(s.telemetry().ready_sets, 0);
    }

    #[test]
    fn non_successors_never_become_is() {
        let s = Scheduler::new(
            1,
            PolicyConfig {
                placement: Placement::OutsideScheduler,
                ..Default::default()
            },
        );
        let mut slot = s.worker_slot(0);
        let other = T { name: "x", prio: 5, succ: false };
        let next = s.on_task_finished(&mut slot, vec![other, t("y", 0)]);
        assert!(matches!(next, Next::ExecuteNow(T { name: "y", .. })));
    }

    #[test]
    fn inside_hands_back_through_the_lock() {
        let s = Scheduler::new(
            1,
            PolicyConfig {
                placement: Placement::InsideScheduler,
                ..Default::default()
            },
        );
        let mut slot = s.worker_slot(0);
        let next = s.on_task_finished(&mut slot, vec![t("a", 0), t("b", 0)]);
        assert!(matches!(next, Next::ExecuteNow(T { name: "a", .. })));
        let tel = s.telemetry();
        assert_eq!(tel.scheduler_entries, 1);
        assert_eq!(tel.tasks_popped, 1);
        assert_eq!(tel.tasks_enqueued, 1);
    }

    #[test]
    fn skip_probability_one_disables_is() {
        let s = Scheduler::new(
            1,
            PolicyConfig {
                placement: Placement::OutsideScheduler,
                skip_probability: 1.0,
                seed: 3,
            },
        );
        let mut slot = s.worker_slot(0);
        for _ in 0..1000 {
            assert!(matches!(s.on_task_finished(&mut slot, vec![t("a", 0)]), Next::FetchFromScheduler));
            s.fetch(0).unwrap();
        }
        let tel = s.telemetry();
        assert_eq!(tel.is_marked, 0);
        assert_eq!(tel.ready_sets, 1000);
    }

    #[test]
    fn skip_probability_matches_bernoulli_rate() {
        let p = 0.3;
        let draws = 20_000u64;
        let s = Scheduler::new(
            1,
            PolicyConfig {
                placement: Placement::OutsideScheduler,
                skip_probability: p,
                seed: 11,
            },
        );
        let mut slot = s.worker_slot(0);
        for _ in 0..draws {
            if let Next::FetchFromScheduler = s.on_task_finished(&mut slot, vec![t("a", 0)]) {
                s.fetch(0).unwrap();
            }
        }
        let marked = s.telemetry().is_marked as f64;
        let expected = (1.0 - p) * draws as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((marked - expected).abs() <= 3.0 * sigma, "{marked} vs {expected} ± {}", 3.0 * sigma);
    }

    #[derive(Debug)]
    struct Id(u64);
    impl Schedulable for Id {
        fn priority(&self) -> i32 {
            (self.0 % 3) as i32
        }
        fn is_successor(&self) -> bool {
            false
        }
    }

    #[test]
    fn concurrent_enqueue_fetch_loses_nothing() {
        const WORKERS: usize = 8;
        const PER: u64 = 12_500;
        let s = Arc::new(Scheduler::<Id>::new(WORKERS, PolicyConfig::default()));
        let seen: Vec<Vec<u64>> = std::thread::scope(|sc| {
            let handles: Vec<_> = (0..WORKERS)
                .map(|w| {
                    let s = Arc::clone(&s);
                    sc.spawn(move || {
                        let mut got = Vec::new();
                        for i in 0..PER {
                            s.enqueue(w, [Id(w as u64 * PER + i)]);
                            if let Some(x) = s.fetch(w) {
                                got.push(x.0);
                            }
                        }
                        got
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut all: Vec<u64> = seen.into_iter().flatten().collect();
        while let Some(x) = s.fetch(0) {
            all.push(x.0);
        }
        all.sort_unstable();
        let expected: Vec<u64> = (0..WORKERS as u64 * PER).collect();
        assert_eq!(all, expected);
    }
}
