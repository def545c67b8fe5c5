//! Edge derivation from declared accesses.
//!
//! [`BottomMap`] tracks, per key, the most recent writer and the readers that
//! followed it. Registering a task against it yields the intra-scope edges.
//! A recording scope additionally fills a [`TopMap`] with the first accessors
//! of each key, and [`match_cross_iteration`] pairs the final bottom map with
//! the top map to produce the edges that cross an iteration boundary.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::access::{AccessKey, DataAccess};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// Anything the maps can point at.
pub trait TaskRef: Clone {
    fn task_id(&self) -> TaskId;
}

impl TaskRef for TaskId {
    fn task_id(&self) -> TaskId {
        *self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    Intra,
    CrossIteration,
}

#[derive(Clone, Debug)]
pub struct Edge<T> {
    pub from: T,
    pub to: T,
    pub kind: EdgeKind,
    pub shared_key: AccessKey,
}

impl<T: TaskRef> Edge<T> {
    pub fn ids(&self) -> Edge<TaskId> {
        Edge {
            from: self.from.task_id(),
            to: self.to.task_id(),
            kind: self.kind,
            shared_key: self.shared_key,
        }
    }
}

#[derive(Clone, Debug)]
struct BottomEntry<T> {
    last_writer: Option<T>,
    trailing_readers: Vec<T>,
}

impl<T> Default for BottomEntry<T> {
    fn default() -> Self {
        BottomEntry {
            last_writer: None,
            trailing_readers: Vec::new(),
        }
    }
}

/// Last accessors per key.
#[derive(Clone, Debug)]
pub struct BottomMap<T> {
    entries: HashMap<AccessKey, BottomEntry<T>>,
}

impl<T> Default for BottomMap<T> {
    fn default() -> Self {
        BottomMap {
            entries: HashMap::new(),
        }
    }
}

/// First accessors per key, captured while recording.
///
/// A key first touched by readers keeps the whole leading reader group and
/// also the writer that closes it, so that the next iteration's writer is
/// ordered after this iteration's trailing readers.
#[derive(Clone, Debug)]
pub struct TopMap<T> {
    entries: HashMap<AccessKey, TopEntry<T>>,
    order: Vec<AccessKey>,
}

#[derive(Clone, Debug)]
pub struct TopEntry<T> {
    pub leading_readers: Vec<T>,
    pub first_writer: Option<T>,
}

impl<T> Default for TopMap<T> {
    fn default() -> Self {
        TopMap {
            entries: HashMap::new(),
            order: Vec::new(),
        }
    }
}

impl<T: TaskRef> TopMap<T> {
    fn note(&mut self, task: &T, access: DataAccess) {
        let entry = self.entries.entry(access.key).or_insert_with(|| {
            self.order.push(access.key);
            TopEntry {
                leading_readers: Vec::new(),
                first_writer: None,
            }
        });
        if entry.first_writer.is_some() {
            return;
        }
        if access.mode.writes() {
            entry.first_writer = Some(task.clone());
        } else {
            entry.leading_readers.push(task.clone());
        }
    }

    pub fn get(&self, key: AccessKey) -> Option<&TopEntry<T>> {
        self.entries.get(&key)
    }

    /// Keys in first-touch order.
    pub fn keys(&self) -> &[AccessKey] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

impl<T: TaskRef> BottomMap<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `task` with its (normalized) access list and returns the
    /// edges from earlier tasks, one per distinct predecessor, in creation
    /// order of the accesses. When `top` is given the task is also recorded
    /// as a first accessor where applicable.
    pub fn register(&mut self, task: &T, accesses: &[DataAccess], mut top: Option<&mut TopMap<T>>) -> Vec<Edge<T>> {
        let mut edges: Vec<Edge<T>> = Vec::new();
        let push = |from: &T, key: AccessKey, edges: &mut Vec<Edge<T>>| {
            let id = from.task_id();
            if !edges.iter().any(|e| e.from.task_id() == id) {
                edges.push(Edge {
                    from: from.clone(),
                    to: task.clone(),
                    kind: EdgeKind::Intra,
                    shared_key: key,
                });
            }
        };
        for &access in accesses {
            if let Some(top) = top.as_deref_mut() {
                top.note(task, access);
            }
            let entry = self.entries.entry(access.key).or_default();
            if access.mode.writes() {
                if !entry.trailing_readers.is_empty() {
                    for r in &entry.trailing_readers {
                        push(r, access.key, &mut edges);
                    }
                } else if let Some(w) = &entry.last_writer {
                    push(w, access.key, &mut edges);
                }
                entry.trailing_readers.clear();
                entry.last_writer = Some(task.clone());
            } else {
                if let Some(w) = &entry.last_writer {
                    push(w, access.key, &mut edges);
                }
                entry.trailing_readers.push(task.clone());
            }
        }
        edges
    }

    pub fn last_writer(&self, key: AccessKey) -> Option<&T> {
        self.entries.get(&key).and_then(|e| e.last_writer.as_ref())
    }

    pub fn trailing_readers(&self, key: AccessKey) -> &[T] {
        self.entries.get(&key).map(|e| e.trailing_readers.as_slice()).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drops every entry; later registrations start from empty maps.
    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Edges from the end of one recorded iteration to the start of the next.
///
/// Produces exactly the edges that registering the next iteration's first
/// accessors against `bottom` would create towards tasks of the previous
/// iteration.
pub fn match_cross_iteration<T: TaskRef>(top: &TopMap<T>, bottom: &BottomMap<T>) -> Vec<Edge<T>> {
    let mut edges: Vec<Edge<T>> = Vec::new();
    let mut push = |from: &T, to: &T, key: AccessKey| {
        let (f, t) = (from.task_id(), to.task_id());
        if !edges.iter().any(|e| e.from.task_id() == f && e.to.task_id() == t) {
            edges.push(Edge {
                from: from.clone(),
                to: to.clone(),
                kind: EdgeKind::CrossIteration,
                shared_key: key,
            });
        }
    };
    for &key in top.keys() {
        let Some(b) = bottom.entries.get(&key) else { continue };
        let t = &top.entries[&key];
        if let Some(w) = &b.last_writer {
            for r in &t.leading_readers {
                push(w, r, key);
            }
        }
        if let Some(fw) = &t.first_writer {
            if !b.trailing_readers.is_empty() {
                for r in &b.trailing_readers {
                    push(r, fw, key);
                }
            } else if t.leading_readers.is_empty() {
                if let Some(w) = &b.last_writer {
                    push(w, fw, key);
                }
            }
        }
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::access::AccessMode::*;

    fn acc(key: u64, mode: crate::access::AccessMode) -> DataAccess {
        DataAccess::new(key, mode)
    }

    fn pairs(edges: &[Edge<TaskId>]) -> Vec<(u64, u64)> {
        edges.iter().map(|e| (e.from.0, e.to.0)).collect()
    }

    #[test]
    fn reader_then_writer() {
        let mut m = BottomMap::new();
        assert!(m.register(&TaskId(1), &[acc(0xA, In)], None).is_empty());
        let e = m.register(&TaskId(2), &[acc(0xA, Out)], None);
        assert_eq!(pairs(&e), vec![(1, 2)]);
        assert_eq!(e[0].shared_key, AccessKey(0xA));
        assert_eq!(e[0].kind, EdgeKind::Intra);
        assert_eq!(m.last_writer(AccessKey(0xA)), Some(&TaskId(2)));
        assert!(m.trailing_readers(AccessKey(0xA)).is_empty());
    }

    #[test]
    fn first_accessor_has_no_edges() {
        let mut m = BottomMap::new();
        assert!(m.register(&TaskId(1), &[acc(1, Out)], None).is_empty());
    }

    #[test]
    fn reader_group_between_writers() {
        let mut m = BottomMap::new();
        let w = TaskId(1);
        assert!(m.register(&w, &[acc(1, Out)], None).is_empty());
        assert_eq!(pairs(&m.register(&TaskId(2), &[acc(1, In)], None)), vec![(1, 2)]);
        assert_eq!(pairs(&m.register(&TaskId(3), &[acc(1, In)], None)), vec![(1, 3)]);
        assert_eq!(pairs(&m.register(&TaskId(4), &[acc(1, Out)], None)), vec![(2, 4), (3, 4)]);
    }

    #[test]
    fn duplicate_predecessors_collapse() {
        let mut m = BottomMap::new();
        m.register(&TaskId(1), &[acc(1, Out), acc(2, Out)], None);
        let e = m.register(&TaskId(2), &[acc(1, In), acc(2, InOut)], None);
        assert_eq!(pairs(&e), vec![(1, 2)]);
        assert_eq!(e[0].shared_key, AccessKey(1));
    }

    #[test]
    fn clear_forgets_everything() {
        let mut m = BottomMap::new();
        m.register(&TaskId(1), &[acc(1, Out)], None);
        m.clear();
        assert!(m.register(&TaskId(2), &[acc(1, Out)], None).is_empty());
        let mut empty: BottomMap<TaskId> = BottomMap::new();
        empty.clear();
        assert!(empty.is_empty());
    }

    #[test]
    fn cross_edge_writer_to_leading_reader() {
        // T1 reads A, T2 writes A: next iteration's T1 waits for this T2.
        let mut m = BottomMap::new();
        let mut top = TopMap::default();
        m.register(&TaskId(1), &[acc(0xA, In)], Some(&mut top));
        m.register(&TaskId(2), &[acc(0xA, Out)], Some(&mut top));
        let cross = match_cross_iteration(&top, &m);
        assert_eq!(pairs(&cross), vec![(2, 1)]);
        assert_eq!(cross[0].kind, EdgeKind::CrossIteration);
    }

    #[test]
    fn read_only_key_has_no_cross_edge() {
        let mut m = BottomMap::new();
        let mut top = TopMap::default();
        m.register(&TaskId(1), &[acc(5, In)], Some(&mut top));
        m.register(&TaskId(2), &[acc(5, In)], Some(&mut top));
        assert!(match_cross_iteration(&top, &m).is_empty());
    }

    #[test]
    fn trailing_readers_precede_next_first_writer() {
        // [R1, W, R3]: next W must wait for this R3 even though R1 is the first accessor.
        let mut m = BottomMap::new();
        let mut top = TopMap::default();
        m.register(&TaskId(1), &[acc(1, In)], Some(&mut top));
        m.register(&TaskId(2), &[acc(1, Out)], Some(&mut top));
        m.register(&TaskId(3), &[acc(1, In)], Some(&mut top));
        let mut got = pairs(&match_cross_iteration(&top, &m));
        got.sort();
        assert_eq!(got, vec![(2, 1), (3, 2)]);
    }

    #[test]
    fn self_dependent_writer_loops_to_itself() {
        let mut m = BottomMap::new();
        let mut top = TopMap::default();
        m.register(&TaskId(9), &[acc(1, InOut)], Some(&mut top));
        assert_eq!(pairs(&match_cross_iteration(&top, &m)), vec![(9, 9)]);
    }
}
