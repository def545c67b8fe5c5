//! Brute-force reference models used by tests and the `verify` tool.
//!
//! Everything here works on the physically unrolled program: the loop body
//! repeated once per iteration, as a flat sequence of task instances.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;

use crate::access::{conflicts, AccessKey, AccessMode, DataAccess};
use crate::dctg::DctgInfo;
use crate::deps::TaskId;
use crate::trace::OrderConstraint;

/// Loop body: the access lists of its tasks in creation order.
pub type Body = Vec<Vec<DataAccess>>;

/// Flat sequence of `iterations` copies of `body`.
pub fn unroll(body: &Body, iterations: u64) -> Vec<Vec<DataAccess>> {
    (0..iterations).flat_map(|_| body.iter().cloned()).collect()
}

/// Immediate predecessors of every instance, by scanning backwards for the
/// nearest conflicting accesses: a reader waits for the last writer, a writer
/// waits for the readers since the last writer or, if none, for that writer.
pub fn nearest_predecessors(flat: &[Vec<DataAccess>]) -> Vec<BTreeSet<usize>> {
    let mut out = Vec::with_capacity(flat.len());
    for (p, accesses) in flat.iter().enumerate() {
        let mut preds = BTreeSet::new();
        for a in accesses {
            let mut readers = Vec::new();
            let mut writer = None;
            for q in (0..p).rev() {
                if let Some(b) = flat[q].iter().find(|b| b.key == a.key) {
                    if b.mode.writes() {
                        writer = Some(q);
                        break;
                    }
                    readers.push(q);
                }
            }
            if a.mode.writes() && !readers.is_empty() {
                preds.extend(readers);
            } else if let Some(w) = writer {
                preds.insert(w);
            }
        }
        out.push(preds);
    }
    out
}

/// Adds the ordering a loop condition imposes on `preds`, the nearest-conflict
/// predecessors of a flat program of `body_len` tasks per iteration whose
/// condition task is at position `condition` of the body: every instance with
/// no predecessor inside its own iteration waits for the previous iteration's
/// condition.
pub fn add_condition_gates(preds: &mut [BTreeSet<usize>], body_len: usize, condition: usize) {
    for (p, set) in preds.iter_mut().enumerate().skip(body_len) {
        let start = p / body_len * body_len;
        if set.iter().all(|&q| q < start) {
            set.insert(start - body_len + condition);
        }
    }
}

/// Every pair `(a, b)`, `a < b`, whose access lists conflict.
pub fn conflicting_pairs(flat: &[Vec<DataAccess>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for b in 0..flat.len() {
        for a in 0..b {
            if flat[a].iter().any(|x| flat[b].iter().any(|y| conflicts(*x, *y))) {
                out.push((a, b));
            }
        }
    }
    out
}

/// Reachability over a predecessor relation whose edges all point backwards.
pub fn transitive_closure(preds: &[BTreeSet<usize>]) -> Vec<Vec<bool>> {
    let n = preds.len();
    let mut reach = vec![vec![false; n]; n];
    for b in 0..n {
        for &a in &preds[b] {
            assert!(a < b, "edge {a} -> {b} points forward in program order");
            reach[b][a] = true;
            let (lo, hi) = reach.split_at_mut(b);
            for (x, r) in hi[0].iter_mut().zip(&lo[a]) {
                *x |= *r;
            }
        }
    }
    reach
}

/// Conflicting pairs not ordered by `preds`.
pub fn unordered_conflicts(flat: &[Vec<DataAccess>], preds: &[BTreeSet<usize>]) -> Vec<(usize, usize)> {
    let reach = transitive_closure(preds);
    conflicting_pairs(flat)
        .into_iter()
        .filter(|&(a, b)| !reach[b][a])
        .collect()
}

/// Position of every recorded task node in the unrolled program.
pub struct InstanceMap {
    /// `(node id, loop index)` for each flat position.
    pub instances: Vec<(TaskId, u64)>,
    pub index: HashMap<(TaskId, u64), usize>,
}

/// Lays the nodes of `info` out as the unrolled program of `iterations`
/// loop indices. A condition node sits at the end of its iteration.
pub fn instance_map(info: &DctgInfo, iterations: u64) -> InstanceMap {
    let u = info.unroll.max(1);
    let mut per_copy: Vec<Vec<TaskId>> = vec![Vec::new(); u as usize];
    for n in info.nodes.iter() {
        per_copy[n.copy as usize].push(n.id);
    }
    let mut instances = Vec::new();
    for i in 0..iterations {
        for &id in &per_copy[(i % u) as usize] {
            instances.push((id, i));
        }
    }
    let index = instances.iter().enumerate().map(|(p, &k)| (k, p)).collect();
    InstanceMap { instances, index }
}

/// Predecessors of every flat instance as implied by the recorded graph.
pub fn graph_predecessors(info: &DctgInfo, iterations: u64) -> Vec<BTreeSet<usize>> {
    let u = info.unroll.max(1);
    let map = instance_map(info, iterations);
    let copy: HashMap<TaskId, u64> = info.nodes.iter().map(|n| (n.id, n.copy)).collect();
    let mut preds = vec![BTreeSet::new(); map.instances.len()];
    for (p, &(id, i)) in map.instances.iter().enumerate() {
        let j = i / u;
        for e in info.intra_edges.iter().filter(|e| e.to == id) {
            if let Some(&q) = map.index.get(&(e.from, copy[&e.from] + j * u)) {
                preds[p].insert(q);
            }
        }
        if j > 0 {
            let cross = info.cross_edges.iter().map(|e| (e.from, e.to));
            for (from, _) in cross.chain(info.gating_edges.iter().copied()).filter(|e| e.1 == id) {
                if let Some(&q) = map.index.get(&(from, copy[&from] + (j - 1) * u)) {
                    preds[p].insert(q);
                }
            }
        }
    }
    preds
}

/// Access lists of the flat instances of `info`.
pub fn graph_program(info: &DctgInfo, iterations: u64) -> Vec<Vec<DataAccess>> {
    let map = instance_map(info, iterations);
    map.instances
        .iter()
        .map(|(id, _)| info.node(*id).expect("node").accesses.clone())
        .collect()
}

/// One ordering constraint per conflicting pair of the unrolled program.
pub fn order_constraints(info: &DctgInfo, iterations: u64) -> Vec<OrderConstraint> {
    let map = instance_map(info, iterations);
    let flat = graph_program(info, iterations);
    conflicting_pairs(&flat)
        .into_iter()
        .map(|(a, b)| OrderConstraint {
            before: map.instances[a],
            after: map.instances[b],
        })
        .collect()
}

/// Random loop body over `keys` keys. Access lists have distinct keys.
pub fn random_body<R: Rng>(rng: &mut R, max_tasks: usize, keys: u64) -> Body {
    let n = rng.gen_range(1..=max_tasks);
    (0..n)
        .map(|_| {
            let mut chosen: Vec<u64> = (0..keys).filter(|_| rng.gen_bool(0.35)).collect();
            if chosen.is_empty() {
                chosen.push(rng.gen_range(0..keys));
            }
            chosen
                .into_iter()
                .map(|k| {
                    let mode = match rng.gen_range(0..3) {
                        0 => AccessMode::In,
                        1 => AccessMode::Out,
                        _ => AccessMode::InOut,
                    };
                    DataAccess::new(AccessKey(k), mode)
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(k: u64) -> DataAccess {
        DataAccess::read(k)
    }
    fn w(k: u64) -> DataAccess {
        DataAccess::write(k)
    }

    #[test]
    fn nearest_conflict_chain() {
        let flat = vec![vec![w(0)], vec![r(0)], vec![r(0)], vec![w(0)], vec![r(0)]];
        let p = nearest_predecessors(&flat);
        let sets: Vec<Vec<usize>> = p.iter().map(|s| s.iter().copied().collect()).collect();
        assert_eq!(sets, vec![vec![], vec![0], vec![0], vec![1, 2], vec![3]]);
        assert!(unordered_conflicts(&flat, &p).is_empty());
    }

    #[test]
    fn missing_edge_is_reported() {
        let flat = vec![vec![w(0)], vec![w(0)]];
        let p = vec![BTreeSet::new(), BTreeSet::new()];
        assert_eq!(unordered_conflicts(&flat, &p), vec![(0, 1)]);
    }

    #[test]
    fn condition_gates_only_roots() {
        // body: [w0, r0 w1, cond r1]; root of each iteration is position 0.
        let body = vec![vec![w(0)], vec![r(0), w(1)], vec![r(1)]];
        let flat = unroll(&body, 3);
        let mut preds = nearest_predecessors(&flat);
        add_condition_gates(&mut preds, 3, 2);
        let want: Vec<BTreeSet<usize>> = [
            vec![],
            vec![0],
            vec![1],
            vec![1, 2],
            vec![3, 2],
            vec![4],
            vec![4, 5],
            vec![6, 5],
            vec![7],
        ]
        .into_iter()
        .map(|v| v.into_iter().collect())
        .collect();
        assert_eq!(preds, want);
    }
}
