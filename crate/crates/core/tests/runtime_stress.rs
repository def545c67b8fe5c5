mod common;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::Log;
use cyclic_tasks::oracle::random_body;
use cyclic_tasks::{DataAccess, Runtime, RuntimeConfig, Task, Variant};

#[test]
fn random_dags_run_exactly_once_in_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for variant in [Variant::Tasks, Variant::TasksIS, Variant::TasksISBypass] {
        let rt = Runtime::new(RuntimeConfig::for_variant(variant, 8, 3));
        for _ in 0..3_400 {
            let body = random_body(&mut rng, 10, 4);
            let log = Log::default();
            log.spawn_body(&body, &mut rt.spawner(0));
            rt.taskwait();
            log.check(&body, 1).unwrap();
        }
        let t = rt.telemetry();
        assert_eq!(t.tasks_popped + t.bypasses, t.executions);
    }
}

#[test]
fn diamond() {
    let rt = Runtime::new(RuntimeConfig::new(4));
    let log = Log::default();
    let body = vec![
        vec![DataAccess::write(1), DataAccess::write(2)],
        vec![DataAccess::read(1), DataAccess::write(3)],
        vec![DataAccess::read(2), DataAccess::write(4)],
        vec![DataAccess::read(3), DataAccess::read(4)],
    ];
    log.spawn_body(&body, &mut rt.spawner(0));
    rt.taskwait();
    log.check(&body, 1).unwrap();
}

#[test]
fn single_worker_runs_chain_in_order() {
    let rt = Runtime::new(RuntimeConfig::new(1));
    let order = Arc::new(parking_lot::Mutex::new(Vec::new()));
    for i in 0..3 {
        let o = Arc::clone(&order);
        rt.spawn(Task::new("link").updates(7).body(move |_| o.lock().push(i))).unwrap();
    }
    rt.taskwait();
    assert_eq!(*order.lock(), vec![0, 1, 2]);
}

#[test]
fn taskwait_with_nothing_pending_returns() {
    let rt = Runtime::new(RuntimeConfig::new(2));
    rt.taskwait();
    assert_eq!(rt.telemetry().executions, 0);
}

#[test]
fn nested_tasks_complete_before_parent() {
    let rt = Runtime::new(RuntimeConfig::new(4).with_trace(true));
    let hits = Arc::new(AtomicU64::new(0));
    let seen = Arc::new(AtomicU64::new(u64::MAX));
    let h = Arc::clone(&hits);
    rt.spawn(Task::new("parent").writes(1).body(move |ctx| {
        for _ in 0..8 {
            let h = Arc::clone(&h);
            ctx.spawn("child", move |c| {
                h.fetch_add(1, Ordering::SeqCst);
                for _ in 0..2 {
                    let h = Arc::clone(&h);
                    c.spawn("grandchild", move |_| {
                        h.fetch_add(1, Ordering::SeqCst);
                    });
                }
            });
        }
    }))
    .unwrap();
    let (h, s) = (Arc::clone(&hits), Arc::clone(&seen));
    rt.spawn(Task::new("after").reads(1).body(move |_| {
        s.store(h.load(Ordering::SeqCst), Ordering::SeqCst);
    }))
    .unwrap();
    rt.taskwait();
    assert_eq!(hits.load(Ordering::SeqCst), 24);
    assert_eq!(seen.load(Ordering::SeqCst), 24, "successor ran before nested tasks finished");
    let trace = rt.take_trace();
    cyclic_tasks::trace::check_well_formed(&trace).unwrap();
}

#[test]
fn duplicate_key_is_rejected() {
    let rt = Runtime::new(RuntimeConfig::new(1));
    let err = rt.spawn(Task::new("dup").reads(3).writes(3)).unwrap_err();
    assert_eq!(err, cyclic_tasks::RuntimeError::DuplicateKey(3.into()));
}

#[test]
#[should_panic(expected = "boom")]
fn task_panic_surfaces_in_taskwait() {
    let rt = Runtime::new(RuntimeConfig::new(2));
    rt.spawn(Task::new("bad").body(|_| panic!("boom"))).unwrap();
    rt.taskwait();
}

#[test]
fn independent_tasks_end_before_taskwait_returns() {
    let rt = Runtime::new(RuntimeConfig::new(4).with_trace(true));
    for k in 0..32u64 {
        rt.spawn(Task::new("leaf").writes(k)).unwrap();
    }
    rt.taskwait();
    let t = rt.snapshot_metrics();
    assert_eq!(t.telemetry.executions, 32);
    assert!(t.wall_ns > 0);
    assert_eq!(t.labels["leaf"].count, 32);
    assert_eq!(t.telemetry.bypasses, 0);
}
