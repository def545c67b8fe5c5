use std::collections::BTreeSet;

use proptest::prelude::*;

use cyclic_tasks::deps::{match_cross_iteration, BottomMap, TopMap};
use cyclic_tasks::oracle::{nearest_predecessors, unordered_conflicts, unroll, Body};
use cyclic_tasks::{AccessKey, AccessMode, DataAccess, TaskId};

fn body_strategy(max_tasks: usize, keys: u64) -> impl Strategy<Value = Body> {
    let access = (0..keys, 0..3u8).prop_map(|(k, m)| {
        let mode = match m {
            0 => AccessMode::In,
            1 => AccessMode::Out,
            _ => AccessMode::InOut,
        };
        DataAccess::new(AccessKey(k), mode)
    });
    let task = prop::collection::vec(access, 1..4).prop_map(|mut v| {
        v.sort_by_key(|a| a.key);
        v.dedup_by_key(|a| a.key);
        v
    });
    prop::collection::vec(task, 1..=max_tasks)
}

fn register_all(flat: &[Vec<DataAccess>]) -> Vec<BTreeSet<usize>> {
    let mut map = BottomMap::new();
    flat.iter()
        .enumerate()
        .map(|(i, acc)| {
            map.register(&TaskId(i as u64), acc, None)
                .into_iter()
                .map(|e| e.from.0 as usize)
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn registration_matches_nearest_conflict_scan(body in body_strategy(12, 4)) {
        let preds = register_all(&body);
        prop_assert_eq!(&preds, &nearest_predecessors(&body));
    }

    #[test]
    fn every_conflict_is_ordered(body in body_strategy(16, 5)) {
        let preds = register_all(&body);
        prop_assert!(unordered_conflicts(&body, &preds).is_empty());
    }

    #[test]
    fn edges_only_join_conflicting_tasks(body in body_strategy(12, 4)) {
        let mut map = BottomMap::new();
        for (i, acc) in body.iter().enumerate() {
            for e in map.register(&TaskId(i as u64), acc, None) {
                let from = &body[e.from.0 as usize];
                let shared = from.iter().find(|a| a.key == e.shared_key).unwrap();
                let here = acc.iter().find(|a| a.key == e.shared_key).unwrap();
                prop_assert!(cyclic_tasks::access::conflicts(*shared, *here));
            }
        }
    }

    #[test]
    fn cross_edges_match_second_iteration(body in body_strategy(10, 4)) {
        // Registering two iterations back to back and keeping the edges that
        // point from the first into the second gives the cross edges.
        let k = body.len();
        let mut top = TopMap::default();
        let mut map = BottomMap::new();
        for (i, acc) in body.iter().enumerate() {
            map.register(&TaskId(i as u64), acc, Some(&mut top));
        }
        let mut got: Vec<(u64, u64)> = match_cross_iteration(&top, &map)
            .iter()
            .map(|e| (e.from.0, e.to.0))
            .collect();
        got.sort();
        let flat = unroll(&body, 2);
        let mut want: Vec<(u64, u64)> = nearest_predecessors(&flat)[k..]
            .iter()
            .enumerate()
            .flat_map(|(t, ps)| ps.iter().filter(|&&p| p < k).map(move |&p| (p as u64, t as u64)))
            .collect();
        want.sort();
        prop_assert_eq!(got, want);
    }
}
