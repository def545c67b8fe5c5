#![allow(dead_code)]

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use cyclic_tasks::oracle::{conflicting_pairs, Body};
use cyclic_tasks::{Spawner, Task, TaskContext};

pub type Entry = (usize, u64, u64, u64);

/// Logical clock shared by task bodies; every start and end takes a tick.
#[derive(Clone, Default)]
pub struct Log {
    clock: Arc<AtomicU64>,
    /// `(body position, loop index, start tick, end tick)`
    pub entries: Arc<Mutex<Vec<Entry>>>,
}

impl Log {
    pub fn task(&self, pos: usize, label: String, accesses: Vec<cyclic_tasks::DataAccess>) -> Task {
        let log = self.clone();
        Task::new(label).accesses(accesses).body(move |ctx: &TaskContext<'_>| {
            let s = log.clock.fetch_add(1, Ordering::SeqCst);
            std::hint::spin_loop();
            let e = log.clock.fetch_add(1, Ordering::SeqCst);
            log.entries.lock().push((pos, ctx.iteration(), s, e));
        })
    }

    pub fn spawn_body(&self, body: &Body, sp: &mut dyn Spawner) {
        for (pos, acc) in body.iter().enumerate() {
            sp.spawn(self.task(pos, format!("t{pos}"), acc.clone())).unwrap();
        }
    }

    /// Checks exactly-once execution of every instance and that every
    /// conflicting pair of the unrolled program ran in program order.
    pub fn check(&self, body: &Body, iterations: u64) -> Result<(), String> {
        let k = body.len();
        let n = k * iterations as usize;
        let mut at: Vec<Option<(u64, u64)>> = vec![None; n];
        for &(pos, it, s, e) in self.entries.lock().iter() {
            if it >= iterations {
                return Err(format!("task {pos} ran for loop index {it}"));
            }
            let idx = it as usize * k + pos;
            if at[idx].replace((s, e)).is_some() {
                return Err(format!("task {pos} iteration {it} ran twice"));
            }
        }
        if let Some(i) = at.iter().position(Option::is_none) {
            return Err(format!("task {} iteration {} never ran", i % k, i / k));
        }
        let flat = cyclic_tasks::oracle::unroll(body, iterations);
        for (a, b) in conflicting_pairs(&flat) {
            let (_, ea) = at[a].unwrap();
            let (sb, _) = at[b].unwrap();
            if ea > sb {
                return Err(format!(
                    "instance {} (task {} iter {}) overlaps its successor {} (task {} iter {})",
                    a,
                    a % k,
                    a / k,
                    b,
                    b % k,
                    b / k
                ));
            }
        }
        Ok(())
    }
}
