//! Blocked `y += a_i * x`, repeated for every iteration `i`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use cyclic_tasks::{RuntimeError, Spawner, Task};

use crate::{checksum, key, rng, Blocks, Kernel, KernelSpec, Outcome};

const X: u64 = 1;
const Y: u64 = 2;

/// Scalar used in iteration `i`.
pub fn coefficient(i: u64) -> f64 {
    1.0 + 0.25 * (i % 4) as f64
}

pub struct Multisaxpy {
    x: Blocks,
    y: Blocks,
    block: usize,
    a: fn(u64) -> f64,
    done: AtomicU64,
}

fn initial(spec: &KernelSpec) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(spec.seed, 1);
    let x = (0..spec.size).map(|_| r.gen::<f64>()).collect();
    let y = (0..spec.size).map(|_| r.gen::<f64>()).collect();
    (x, y)
}

impl Multisaxpy {
    pub fn new(spec: &KernelSpec) -> Self {
        let (x, y) = initial(spec);
        Self::with_data(x, y, spec.block, coefficient)
    }

    pub fn with_data(x: Vec<f64>, y: Vec<f64>, block: usize, a: fn(u64) -> f64) -> Self {
        assert_eq!(x.len(), y.len());
        assert_eq!(x.len() % block, 0);
        Multisaxpy {
            x: Blocks::new("x", x.chunks(block).map(<[f64]>::to_vec)),
            y: Blocks::new("y", y.chunks(block).map(<[f64]>::to_vec)),
            block,
            a,
            done: AtomicU64::new(0),
        }
    }

    pub fn y(&self) -> Vec<f64> {
        self.y.concat()
    }
}

fn saxpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

impl Kernel for Multisaxpy {
    fn tasks_per_iteration(&self) -> usize {
        self.x.len()
    }

    fn spawn_iteration(self: Arc<Self>, i: u64, sp: &mut dyn Spawner) -> Result<(), RuntimeError> {
        let a = (self.a)(i);
        for b in 0..self.x.len() {
            let k = Arc::clone(&self);
            sp.spawn(
                Task::new("saxpy")
                    .reads(key(X, b))
                    .updates(key(Y, b))
                    .args(a.to_le_bytes().to_vec())
                    .body(move |ctx| {
                        let a = match ctx.args() {
                            Some(p) => f64::from_le_bytes(p.try_into().expect("8-byte scalar")),
                            None => (k.a)(ctx.iteration()),
                        };
                        saxpy(a, &k.x.read(b), &mut k.y.write(b));
                        if b == 0 {
                            k.done.fetch_add(1, Ordering::Relaxed);
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
        checksum(&self.y())
    }

    fn work_per_iteration(&self) -> f64 {
        (self.x.len() * self.block) as f64
    }
}

pub fn sequential(spec: &KernelSpec) -> Outcome {
    let (x, mut y) = initial(spec);
    for i in 0..spec.iterations {
        saxpy(coefficient(i), &x, &mut y);
    }
    Outcome {
        checksum: checksum(&y),
        iterations: spec.iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::KernelName;
    use cyclic_tasks::{Runtime, RuntimeConfig, TaskiterOptions, Variant};

    #[test]
    fn closed_form_single_block() {
        let k = Arc::new(Multisaxpy::with_data(vec![1.0; 4], vec![0.0; 4], 4, |_| 1.0));
        let rt = Runtime::new(RuntimeConfig::for_variant(Variant::Taskiter, 2, 0));
        let kk = Arc::clone(&k);
        rt.run_taskiter(TaskiterOptions::fixed(3), |i, sp| Arc::clone(&kk).spawn_iteration(i, sp))
            .unwrap();
        rt.taskwait();
        assert_eq!(k.y(), vec![3.0; 4]);
    }

    #[test]
    fn graph_shape() {
        let spec = KernelSpec::new(KernelName::Multisaxpy, 40, 8, 4);
        let k = Arc::new(Multisaxpy::new(&spec));
        let rt = Runtime::new(RuntimeConfig::for_variant(Variant::Taskiter, 2, 0));
        let info = rt
            .run_taskiter(TaskiterOptions::fixed(4), |i, sp| Arc::clone(&k).spawn_iteration(i, sp))
            .unwrap();
        rt.taskwait();
        assert_eq!(info.nodes.len(), 5);
        assert_eq!(info.intra_edges.len(), 0);
        assert_eq!(info.cross_edges.len(), 5);
        assert!(info.cross_edges.iter().all(|e| e.from == e.to));
        assert_eq!(k.checksum(), sequential(&spec).checksum);
    }
}
