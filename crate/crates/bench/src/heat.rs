//! Blocked Gauss-Seidel heat diffusion on a square grid with a fixed
//! boundary ring of blocks.
//!
//! Each interior block task updates its points in row-major order, reading
//! the halo of its four neighbours. Boundary blocks never change and are not
//! declared as accesses. The convergence-driven variant adds a gather task
//! summing per-block residuals and a loop condition reading that sum.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use cyclic_tasks::{ConditionFn, DataAccess, RuntimeError, Spawner, Task};

use crate::{checksum, key, rng, Blocks, Cell, Kernel, KernelName, KernelSpec, Outcome};

const GRID: u64 = 10;
const RESIDUAL: u64 = 11;

#[inline]
fn stencil(up: f64, down: f64, left: f64, right: f64) -> f64 {
    0.25 * (up + down + left + right)
}

fn initial_grid(spec: &KernelSpec) -> Vec<f64> {
    let n = spec.size;
    let b = spec.block;
    let mut r = rng(spec.seed, 2);
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let interior = (b..n - b).contains(&i) && (b..n - b).contains(&j);
            if !interior {
                g[i * n + j] = r.gen::<f64>();
            }
        }
    }
    g
}

pub struct Heat {
    nb: usize,
    bs: usize,
    grid: Blocks,
    /// Per-block residual of the last sweep, guarded by the block's key.
    block_res: Blocks,
    residual: Cell<f64>,
    dynamic: bool,
    threshold: f64,
    max_iterations: u64,
    done: AtomicU64,
}

impl Heat {
    pub fn new(spec: &KernelSpec) -> Self {
        let (n, bs) = (spec.size, spec.block);
        let nb = n / bs;
        let g = initial_grid(spec);
        let blocks = (0..nb * nb).map(|id| {
            let (br, bc) = (id / nb, id % nb);
            let mut v = Vec::with_capacity(bs * bs);
            for r in 0..bs {
                let row = (br * bs + r) * n + bc * bs;
                v.extend_from_slice(&g[row..row + bs]);
            }
            v
        });
        Heat {
            nb,
            bs,
            grid: Blocks::new("grid", blocks),
            block_res: Blocks::new("block residual", (0..nb * nb).map(|_| vec![0.0])),
            residual: Cell::new("residual", f64::INFINITY),
            dynamic: spec.kernel == KernelName::HeatWhile,
            threshold: spec.threshold,
            max_iterations: spec.iterations,
            done: AtomicU64::new(0),
        }
    }

    pub fn interior_blocks(&self) -> usize {
        (self.nb - 2) * (self.nb - 2)
    }

    fn is_interior(&self, r: usize, c: usize) -> bool {
        (1..self.nb - 1).contains(&r) && (1..self.nb - 1).contains(&c)
    }

    fn id(&self, r: usize, c: usize) -> usize {
        r * self.nb + c
    }

    /// Accesses of the task for interior block `(r, c)`.
    pub fn block_accesses(&self, r: usize, c: usize) -> Vec<DataAccess> {
        let mut acc = vec![DataAccess::read_write(key(GRID, self.id(r, c)))];
        for (nr, nc) in [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)] {
            if self.is_interior(nr, nc) {
                acc.push(DataAccess::read(key(GRID, self.id(nr, nc))));
            }
        }
        acc
    }

    fn update(&self, r: usize, c: usize) {
        let bs = self.bs;
        let up = self.grid.read(self.id(r - 1, c));
        let down = self.grid.read(self.id(r + 1, c));
        let left = self.grid.read(self.id(r, c - 1));
        let right = self.grid.read(self.id(r, c + 1));
        let mut me = self.grid.write(self.id(r, c));
        let mut res = 0.0;
        for i in 0..bs {
            for j in 0..bs {
                let u = if i > 0 { me[(i - 1) * bs + j] } else { up[(bs - 1) * bs + j] };
                let d = if i + 1 < bs { me[(i + 1) * bs + j] } else { down[j] };
                let l = if j > 0 { me[i * bs + j - 1] } else { left[i * bs + bs - 1] };
                let rt = if j + 1 < bs { me[i * bs + j + 1] } else { right[i * bs] };
                let new = stencil(u, d, l, rt);
                let delta = new - me[i * bs + j];
                res += delta * delta;
                me[i * bs + j] = new;
            }
        }
        if self.dynamic {
            self.block_res.write(self.id(r, c))[0] = res;
        }
    }

    fn gather(&self) {
        let mut sum = 0.0;
        for r in 1..self.nb - 1 {
            for c in 1..self.nb - 1 {
                sum += self.block_res.read(self.id(r, c))[0];
            }
        }
        *self.residual.write() = sum;
    }

    /// Full grid in row-major order.
    pub fn to_grid(&self) -> Vec<f64> {
        let (nb, bs) = (self.nb, self.bs);
        let n = nb * bs;
        let mut g = vec![0.0; n * n];
        for br in 0..nb {
            for bc in 0..nb {
                let blk = self.grid.read(self.id(br, bc));
                for r in 0..bs {
                    let row = (br * bs + r) * n + bc * bs;
                    g[row..row + bs].copy_from_slice(&blk[r * bs..(r + 1) * bs]);
                }
            }
        }
        g
    }
}

impl Kernel for Heat {
    fn tasks_per_iteration(&self) -> usize {
        self.interior_blocks() + usize::from(self.dynamic)
    }

    fn spawn_iteration(self: Arc<Self>, _i: u64, sp: &mut dyn Spawner) -> Result<(), RuntimeError> {
        let first = (1, 1);
        for r in 1..self.nb - 1 {
            for c in 1..self.nb - 1 {
                let k = Arc::clone(&self);
                sp.spawn(Task::new("block").accesses(self.block_accesses(r, c)).body(move |_| {
                    k.update(r, c);
                    if (r, c) == first {
                        k.done.fetch_add(1, Ordering::Relaxed);
                    }
                }))?;
            }
        }
        if self.dynamic {
            let k = Arc::clone(&self);
            let mut t = Task::new("residual").writes(key(RESIDUAL, 0));
            for r in 1..self.nb - 1 {
                for c in 1..self.nb - 1 {
                    t = t.reads(key(GRID, self.id(r, c)));
                }
            }
            sp.spawn(t.body(move |_| k.gather()))?;
        }
        Ok(())
    }

    fn condition(self: Arc<Self>) -> Option<(ConditionFn, Vec<DataAccess>)> {
        if !self.dynamic {
            return None;
        }
        let k = Arc::clone(&self);
        let f: ConditionFn = Arc::new(move |i| *k.residual.read() > k.threshold && i + 1 < k.max_iterations);
        Some((f, vec![DataAccess::read(key(RESIDUAL, 0))]))
    }

    fn iterations_done(&self) -> u64 {
        self.done.load(Ordering::Relaxed)
    }

    fn checksum(&self) -> u64 {
        checksum(&self.to_grid())
    }

    fn work_per_iteration(&self) -> f64 {
        self.interior_blocks() as f64
    }
}

/// Global row-major Gauss-Seidel over the interior points.
pub fn sequential(spec: &KernelSpec) -> Outcome {
    let (grid, iterations) = sequential_grid(spec);
    Outcome {
        checksum: checksum(&grid),
        iterations,
    }
}

pub fn sequential_grid(spec: &KernelSpec) -> (Vec<f64>, u64) {
    let (n, bs) = (spec.size, spec.block);
    let nb = n / bs;
    let mut g = initial_grid(spec);
    let dynamic = spec.kernel == KernelName::HeatWhile;
    let mut k = 0;
    loop {
        let mut res = vec![0.0; nb * nb];
        for i in bs..n - bs {
            for j in bs..n - bs {
                let new = stencil(g[(i - 1) * n + j], g[(i + 1) * n + j], g[i * n + j - 1], g[i * n + j + 1]);
                let delta = new - g[i * n + j];
                res[(i / bs) * nb + j / bs] += delta * delta;
                g[i * n + j] = new;
            }
        }
        k += 1;
        if !dynamic {
            if k == spec.iterations {
                break;
            }
            continue;
        }
        let mut sum = 0.0;
        for r in 1..nb - 1 {
            for c in 1..nb - 1 {
                sum += res[r * nb + c];
            }
        }
        if !(sum > spec.threshold && k < spec.iterations) {
            break;
        }
    }
    (g, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cyclic_tasks::{Runtime, RuntimeConfig, TaskId, TaskiterOptions, Variant};

    fn record(spec: &KernelSpec) -> (Arc<Heat>, cyclic_tasks::DctgInfo) {
        let k = Arc::new(Heat::new(spec));
        let rt = Runtime::new(RuntimeConfig::for_variant(Variant::Taskiter, 2, 0));
        let info = rt
            .run_taskiter(TaskiterOptions::fixed(spec.iterations), |i, sp| Arc::clone(&k).spawn_iteration(i, sp))
            .unwrap();
        rt.taskwait();
        (k, info)
    }

    #[test]
    fn single_interior_block_has_one_self_edge() {
        let (_, info) = record(&KernelSpec::new(KernelName::Heat, 12, 4, 3));
        assert_eq!(info.nodes.len(), 1);
        assert!(info.intra_edges.is_empty());
        assert_eq!(info.cross_edges.len(), 1);
        assert_eq!(info.cross_edges[0].from, info.cross_edges[0].to);
    }

    #[test]
    fn wavefront_intra_edges() {
        let spec = KernelSpec::new(KernelName::Heat, 24, 4, 2);
        let (k, info) = record(&spec);
        assert_eq!(info.nodes.len(), 16);
        let id = |r: usize, c: usize| info.nodes[(r - 1) * 4 + (c - 1)].id;
        for r in 1..=4 {
            for c in 1..=4 {
                let mut got: Vec<TaskId> = info.intra_edges.iter().filter(|e| e.to == id(r, c)).map(|e| e.from).collect();
                got.sort();
                let mut want = Vec::new();
                if r > 1 {
                    want.push(id(r - 1, c));
                }
                if c > 1 {
                    want.push(id(r, c - 1));
                }
                want.sort();
                assert_eq!(got, want, "block ({r},{c})");
            }
        }
        assert_eq!(k.checksum(), sequential(&spec).checksum);
    }

    #[test]
    fn blocked_update_matches_global_sweep() {
        for seed in 0..3 {
            let spec = KernelSpec::new(KernelName::Heat, 30, 5, 4).seed(seed);
            let (k, _) = record(&spec);
            assert_eq!(k.to_grid(), sequential_grid(&spec).0);
        }
    }

    #[test]
    fn while_variant_stops_like_reference() {
        let spec = KernelSpec::new(KernelName::HeatWhile, 24, 4, 500).threshold(1e-3);
        let (_, k_ref) = sequential_grid(&spec);
        assert!(k_ref > 1 && k_ref < 500, "reference converged after {k_ref}");
        let fixed = KernelSpec {
            kernel: KernelName::Heat,
            iterations: k_ref,
            ..spec.clone()
        };
        assert_eq!(sequential_grid(&fixed).0, sequential_grid(&spec).0);
    }
}
