//! Unpreconditioned conjugate gradient with blocked vectors.
//!
//! Per iteration: a blocked SpMV, a gather task computing `p.q` and the step
//! length, blocked updates of `x` and `r`, a gather task computing `r.r` and
//! the direction coefficient, and a blocked update of `p`. Dot products run
//! in a single task each, so summation order is fixed.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use cyclic_tasks::{RuntimeError, Spawner, Task};

use crate::{checksum, key, rng, Blocks, Cell, Kernel, KernelSpec, Outcome};

const P: u64 = 20;
const Q: u64 = 21;
const X: u64 = 22;
const R: u64 = 23;
const ALPHA: u64 = 24;
const RR: u64 = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Matrix {
    /// 5-point Laplacian on an `n x n` grid.
    Laplacian,
    Identity,
}

fn apply_row(m: Matrix, n: usize, i: usize, p: impl Fn(usize) -> f64) -> f64 {
    match m {
        Matrix::Identity => p(i),
        Matrix::Laplacian => {
            let (a, c) = (i / n, i % n);
            let mut s = 4.0 * p(i);
            if a > 0 {
                s -= p(i - n);
            }
            if a + 1 < n {
                s -= p(i + n);
            }
            if c > 0 {
                s -= p(i - 1);
            }
            if c + 1 < n {
                s -= p(i + 1);
            }
            s
        }
    }
}

fn guarded_div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

struct RrState {
    rr: f64,
    beta: f64,
    history: Vec<f64>,
}

pub struct CgLite {
    matrix: Matrix,
    n: usize,
    bs: usize,
    x: Blocks,
    r: Blocks,
    p: Blocks,
    q: Blocks,
    alpha: Cell<f64>,
    rr: Cell<RrState>,
    done: AtomicU64,
}

fn rhs(spec: &KernelSpec) -> Vec<f64> {
    let mut g = rng(spec.seed, 3);
    (0..spec.size * spec.size).map(|_| g.gen::<f64>()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y)
}

impl CgLite {
    pub fn new(spec: &KernelSpec) -> Self {
        Self::with_system(Matrix::Laplacian, spec.size, spec.block, rhs(spec))
    }

    /// Solver for `A x = b` with `A` of dimension `n * n`, starting at zero.
    pub fn with_system(matrix: Matrix, n: usize, block: usize, b: Vec<f64>) -> Self {
        assert_eq!(b.len(), n * n);
        assert_eq!(b.len() % block, 0);
        let blocks = |name| Blocks::new(name, b.chunks(block).map(<[f64]>::to_vec));
        let zeros = |name| Blocks::new(name, b.chunks(block).map(|c| vec![0.0; c.len()]));
        CgLite {
            matrix,
            n,
            bs: block,
            x: zeros("x"),
            r: blocks("r"),
            p: blocks("p"),
            q: zeros("q"),
            alpha: Cell::new("alpha", 0.0),
            rr: Cell::new(
                "rr",
                RrState {
                    rr: dot(&b, &b),
                    beta: 0.0,
                    history: Vec::new(),
                },
            ),
            done: AtomicU64::new(0),
        }
    }

    fn blocks(&self) -> usize {
        self.x.len()
    }

    /// Blocks of `p` read by the SpMV rows of block `b`.
    fn spmv_inputs(&self, b: usize) -> std::ops::RangeInclusive<usize> {
        match self.matrix {
            Matrix::Identity => b..=b,
            Matrix::Laplacian => {
                let lo = (b * self.bs).saturating_sub(self.n);
                let hi = ((b + 1) * self.bs - 1 + self.n).min(self.n * self.n - 1);
                lo / self.bs..=hi / self.bs
            }
        }
    }

    fn spmv(&self, b: usize) {
        let range = self.spmv_inputs(b);
        let first = *range.start();
        let guards: Vec<_> = range.map(|j| self.p.read(j)).collect();
        let bs = self.bs;
        let get = |i: usize| guards[i / bs - first][i % bs];
        let mut q = self.q.write(b);
        for (off, v) in q.iter_mut().enumerate() {
            *v = apply_row(self.matrix, self.n, b * bs + off, get);
        }
    }

    fn dot_pq(&self) {
        let mut pq = 0.0;
        for b in 0..self.blocks() {
            pq = pq_step(pq, &self.p.read(b), &self.q.read(b));
        }
        let rr = self.rr.read().rr;
        *self.alpha.write() = guarded_div(rr, pq);
    }

    fn dot_rr(&self) {
        let mut s = 0.0;
        for b in 0..self.blocks() {
            let r = self.r.read(b);
            s = pq_step(s, &r, &r);
        }
        let mut st = self.rr.write();
        st.beta = guarded_div(s, st.rr);
        st.rr = s;
        st.history.push(s);
        self.done.fetch_add(1, Ordering::Relaxed);
    }

    pub fn x(&self) -> Vec<f64> {
        self.x.concat()
    }

    /// `r.r` after every iteration.
    pub fn history(&self) -> Vec<f64> {
        self.rr.read().history.clone()
    }
}

/// Continues a running dot product over one more block.
fn pq_step(acc: f64, a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(acc, |s, (x, y)| s + x * y)
}

impl Kernel for CgLite {
    fn tasks_per_iteration(&self) -> usize {
        4 * self.blocks() + 2
    }

    fn spawn_iteration(self: Arc<Self>, _i: u64, sp: &mut dyn Spawner) -> Result<(), RuntimeError> {
        let nb = self.blocks();
        for b in 0..nb {
            let k = Arc::clone(&self);
            let mut t = Task::new("spmv").writes(key(Q, b));
            for j in self.spmv_inputs(b) {
                t = t.reads(key(P, j));
            }
            sp.spawn(t.body(move |_| k.spmv(b)))?;
        }
        let k = Arc::clone(&self);
        let mut t = Task::new("dot_pq").reads(key(RR, 0)).writes(key(ALPHA, 0));
        for b in 0..nb {
            t = t.reads(key(P, b)).reads(key(Q, b));
        }
        sp.spawn(t.body(move |_| k.dot_pq()))?;
        for b in 0..nb {
            let k = Arc::clone(&self);
            sp.spawn(
                Task::new("axpy_x")
                    .reads(key(ALPHA, 0))
                    .reads(key(P, b))
                    .updates(key(X, b))
                    .body(move |_| {
                        let a = *k.alpha.read();
                        let p = k.p.read(b);
                        for (x, p) in k.x.write(b).iter_mut().zip(p.iter()) {
                            *x += a * p;
                        }
                    }),
            )?;
        }
        for b in 0..nb {
            let k = Arc::clone(&self);
            sp.spawn(
                Task::new("axpy_r")
                    .reads(key(ALPHA, 0))
                    .reads(key(Q, b))
                    .updates(key(R, b))
                    .body(move |_| {
                        let a = *k.alpha.read();
                        let q = k.q.read(b);
                        for (r, q) in k.r.write(b).iter_mut().zip(q.iter()) {
                            *r -= a * q;
                        }
                    }),
            )?;
        }
        let k = Arc::clone(&self);
        let mut t = Task::new("dot_rr").updates(key(RR, 0));
        for b in 0..nb {
            t = t.reads(key(R, b));
        }
        sp.spawn(t.body(move |_| k.dot_rr()))?;
        for b in 0..nb {
            let k = Arc::clone(&self);
            sp.spawn(
                Task::new("update_p")
                    .reads(key(RR, 0))
                    .reads(key(R, b))
                    .updates(key(P, b))
                    .body(move |_| {
                        let beta = k.rr.read().beta;
                        let r = k.r.read(b);
                        for (p, r) in k.p.write(b).iter_mut().zip(r.iter()) {
                            *p = r + beta * *p;
                        }
                    }),
            )?;
        }
        Ok(())
    }

    fn iterations_done(&self) -> u64 {
        self.done.load(Ordering::Relaxed)
    }

    fn checksum(&self) -> u64 {
        let mut v = self.x();
        v.extend(self.history());
        checksum(&v)
    }

    fn work_per_iteration(&self) -> f64 {
        1.0
    }
}

/// Sequential CG with the same operation order; returns `(x, history)`.
pub fn solve(matrix: Matrix, n: usize, b: &[f64], iterations: u64) -> (Vec<f64>, Vec<f64>) {
    let m = n * n;
    let mut x = vec![0.0; m];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut q = vec![0.0; m];
    let mut rr = dot(b, b);
    let mut history = Vec::new();
    for _ in 0..iterations {
        for (i, v) in q.iter_mut().enumerate() {
            *v = apply_row(matrix, n, i, |j| p[j]);
        }
        let alpha = guarded_div(rr, pq_step(0.0, &p, &q));
        for i in 0..m {
            x[i] += alpha * p[i];
        }
        for i in 0..m {
            r[i] -= alpha * q[i];
        }
        let s = pq_step(0.0, &r, &r);
        let beta = guarded_div(s, rr);
        rr = s;
        history.push(s);
        for i in 0..m {
            p[i] = r[i] + beta * p[i];
        }
    }
    (x, history)
}

pub fn sequential(spec: &KernelSpec) -> Outcome {
    let (mut x, history) = solve(Matrix::Laplacian, spec.size, &rhs(spec), spec.iterations);
    x.extend(history);
    Outcome {
        checksum: checksum(&x),
        iterations: spec.iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::KernelName;
    use cyclic_tasks::{Runtime, RuntimeConfig, TaskiterOptions, Variant};

    fn run(k: &Arc<CgLite>, n: u64, workers: usize) -> cyclic_tasks::DctgInfo {
        let rt = Runtime::new(RuntimeConfig::for_variant(Variant::TaskiterISBypass, workers, 1));
        let info = rt
            .run_taskiter(TaskiterOptions::fixed(n), |i, sp| Arc::clone(k).spawn_iteration(i, sp))
            .unwrap();
        rt.taskwait();
        info
    }

    #[test]
    fn identity_converges_in_one_step() {
        let mut b = vec![0.0; 16];
        b[0] = 1.0;
        let k = Arc::new(CgLite::with_system(Matrix::Identity, 4, 4, b));
        run(&k, 3, 2);
        let mut e1 = vec![0.0; 16];
        e1[0] = 1.0;
        assert_eq!(k.x(), e1);
        assert_eq!(k.history(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn laplacian_history_matches_reference() {
        let spec = KernelSpec::new(KernelName::CgLite, 16, 32, 25).seed(4);
        let k = Arc::new(CgLite::new(&spec));
        run(&k, 25, 4);
        let (x, history) = solve(Matrix::Laplacian, 16, &rhs(&spec), 25);
        assert_eq!(k.history(), history);
        assert_eq!(k.x(), x);
        assert!(history[24] < history[0]);
    }

    #[test]
    fn gather_nodes_wait_for_every_block() {
        let spec = KernelSpec::new(KernelName::CgLite, 8, 16, 2);
        let k = Arc::new(CgLite::new(&spec));
        let info = run(&k, 2, 2);
        assert_eq!(info.nodes.len(), 4 * 4 + 2);
        let dot_pq = info.nodes.iter().find(|n| n.label == "dot_pq").unwrap().id;
        let preds = info.intra_edges.iter().filter(|e| e.to == dot_pq).count();
        assert_eq!(preds, 4);
    }
}
