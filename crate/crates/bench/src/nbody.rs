//! All-pairs gravitational n-body with blocked particles.
//!
//! Each step spawns a force task per ordered block pair `(i, j)`, which adds
//! the pull of block `j` on block `i` (the `j = 0` task clears the
//! accumulator first), then an integrate task per block.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use cyclic_tasks::{RuntimeError, Spawner, Task};

use crate::{checksum, key, rng, Blocks, Kernel, KernelSpec, Outcome};

const POS: u64 = 30;
const FORCE: u64 = 31;
const DT: f64 = 1e-3;
const SOFTENING: f64 = 1e-2;

/// Particle layout inside a state block: x, y, z, vx, vy, vz.
const STRIDE: usize = 6;

fn initial(spec: &KernelSpec) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(spec.seed, 4);
    let state = (0..spec.size * STRIDE)
        .map(|i| if i % STRIDE < 3 { r.gen::<f64>() * 2.0 - 1.0 } else { 0.0 })
        .collect();
    let mass = (0..spec.size).map(|_| 0.5 + r.gen::<f64>()).collect();
    (state, mass)
}

fn accumulate(force: &mut [f64], pi: &[f64], pj: &[f64], mj: &[f64], same: bool) {
    for p in 0..pi.len() / STRIDE {
        let (x, y, z) = (pi[p * STRIDE], pi[p * STRIDE + 1], pi[p * STRIDE + 2]);
        let (mut fx, mut fy, mut fz) = (force[3 * p], force[3 * p + 1], force[3 * p + 2]);
        for q in 0..pj.len() / STRIDE {
            if same && p == q {
                continue;
            }
            let dx = pj[q * STRIDE] - x;
            let dy = pj[q * STRIDE + 1] - y;
            let dz = pj[q * STRIDE + 2] - z;
            let r2 = dx * dx + dy * dy + dz * dz + SOFTENING;
            let s = mj[q] / (r2 * r2.sqrt());
            fx += dx * s;
            fy += dy * s;
            fz += dz * s;
        }
        force[3 * p] = fx;
        force[3 * p + 1] = fy;
        force[3 * p + 2] = fz;
    }
}

fn integrate(state: &mut [f64], force: &[f64]) {
    for p in 0..state.len() / STRIDE {
        for d in 0..3 {
            state[p * STRIDE + 3 + d] += DT * force[3 * p + d];
            state[p * STRIDE + d] += DT * state[p * STRIDE + 3 + d];
        }
    }
}

pub struct Nbody {
    bs: usize,
    state: Blocks,
    force: Blocks,
    mass: Vec<Vec<f64>>,
    done: AtomicU64,
}

impl Nbody {
    pub fn new(spec: &KernelSpec) -> Self {
        let (state, mass) = initial(spec);
        Self::with_particles(state, mass, spec.block)
    }

    /// `state` holds `x, y, z, vx, vy, vz` per particle.
    pub fn with_particles(state: Vec<f64>, mass: Vec<f64>, block: usize) -> Self {
        assert_eq!(state.len(), mass.len() * STRIDE);
        assert_eq!(mass.len() % block, 0);
        Nbody {
            bs: block,
            state: Blocks::new("state", state.chunks(block * STRIDE).map(<[f64]>::to_vec)),
            force: Blocks::new("force", (0..mass.len() / block).map(|_| vec![0.0; 3 * block])),
            mass: mass.chunks(block).map(<[f64]>::to_vec).collect(),
            done: AtomicU64::new(0),
        }
    }

    pub fn state(&self) -> Vec<f64> {
        self.state.concat()
    }

    fn blocks(&self) -> usize {
        self.mass.len()
    }
}

impl Kernel for Nbody {
    fn tasks_per_iteration(&self) -> usize {
        let b = self.blocks();
        b * b + b
    }

    fn spawn_iteration(self: Arc<Self>, _i: u64, sp: &mut dyn Spawner) -> Result<(), RuntimeError> {
        let nb = self.blocks();
        for i in 0..nb {
            for j in 0..nb {
                let k = Arc::clone(&self);
                let mut t = Task::new("force").reads(key(POS, i)).updates(key(FORCE, i));
                if j != i {
                    t = t.reads(key(POS, j));
                }
                sp.spawn(t.body(move |_| {
                    let pi = k.state.read(i);
                    let pj = if i == j { None } else { Some(k.state.read(j)) };
                    let mut f = k.force.write(i);
                    if j == 0 {
                        f.fill(0.0);
                    }
                    accumulate(&mut f, &pi, pj.as_deref().unwrap_or(&pi), &k.mass[j], i == j);
                }))?;
            }
        }
        for i in 0..nb {
            let k = Arc::clone(&self);
            sp.spawn(
                Task::new("integrate")
                    .reads(key(FORCE, i))
                    .updates(key(POS, i))
                    .body(move |_| {
                        integrate(&mut k.state.write(i), &k.force.read(i));
                        if i == 0 {
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
        checksum(&self.state())
    }

    fn work_per_iteration(&self) -> f64 {
        let n = (self.blocks() * self.bs) as f64;
        n * n
    }
}

/// Two-phase loop over the same block order.
pub fn simulate(mut state: Vec<f64>, mass: &[f64], block: usize, steps: u64) -> Vec<f64> {
    let nb = mass.len() / block;
    let sb = block * STRIDE;
    let mut force = vec![0.0; 3 * mass.len()];
    for _ in 0..steps {
        for i in 0..nb {
            let f = &mut force[3 * block * i..3 * block * (i + 1)];
            f.fill(0.0);
            for j in 0..nb {
                accumulate(
                    f,
                    &state[i * sb..(i + 1) * sb],
                    &state[j * sb..(j + 1) * sb],
                    &mass[j * block..(j + 1) * block],
                    i == j,
                );
            }
        }
        for i in 0..nb {
            integrate(&mut state[i * sb..(i + 1) * sb], &force[3 * block * i..3 * block * (i + 1)]);
        }
    }
    state
}

pub fn sequential(spec: &KernelSpec) -> Outcome {
    let (state, mass) = initial(spec);
    let out = simulate(state, &mass, spec.block, spec.iterations);
    Outcome {
        checksum: checksum(&out),
        iterations: spec.iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::KernelName;
    use cyclic_tasks::{Runtime, RuntimeConfig, TaskiterOptions, Variant};

    fn run(k: &Arc<Nbody>, steps: u64) -> cyclic_tasks::DctgInfo {
        let rt = Runtime::new(RuntimeConfig::for_variant(Variant::TaskiterIS, 4, 2));
        let info = rt
            .run_taskiter(TaskiterOptions::fixed(steps), |i, sp| Arc::clone(k).spawn_iteration(i, sp))
            .unwrap();
        rt.taskwait();
        info
    }

    #[test]
    fn two_bodies_stay_mirrored() {
        let state = vec![-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let k = Arc::new(Nbody::with_particles(state, vec![1.0, 1.0], 1));
        run(&k, 1);
        let s = k.state();
        for d in 0..6 {
            assert_eq!(s[d], -s[STRIDE + d]);
        }
        assert!(s[0] > -1.0, "bodies attract");
    }

    #[test]
    fn graph_has_pairs_plus_blocks() {
        let spec = KernelSpec::new(KernelName::Nbody, 12, 4, 3);
        let k = Arc::new(Nbody::new(&spec));
        let info = run(&k, 3);
        assert_eq!(info.nodes.len(), 9 + 3);
        assert_eq!(k.checksum(), sequential(&spec).checksum);
    }
}
