//! Iterative benchmark kernels, their sequential references and a harness
//! that runs any kernel under any [`Variant`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::{RwLock, RwLockReadGuard, RwLockWriteGuard};
use serde::{Deserialize, Serialize};

use cyclic_tasks::{AccessKey, ConditionFn, DataAccess, RuntimeError, Spawner};

pub mod cg;
pub mod harness;
pub mod heat;
pub mod multisaxpy;
pub mod nbody;

pub use harness::{run_cell, CellResult, RunOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KernelName {
    Multisaxpy,
    Heat,
    HeatWhile,
    CgLite,
    Nbody,
}

impl KernelName {
    pub const ALL: [KernelName; 5] = [
        KernelName::Multisaxpy,
        KernelName::Heat,
        KernelName::HeatWhile,
        KernelName::CgLite,
        KernelName::Nbody,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelName::Multisaxpy => "multisaxpy",
            KernelName::Heat => "heat",
            KernelName::HeatWhile => "heat_while",
            KernelName::CgLite => "cg_lite",
            KernelName::Nbody => "nbody",
        }
    }

    /// Unit of the figure of merit.
    pub fn fom_unit(self) -> &'static str {
        match self {
            KernelName::Multisaxpy => "element-updates/s",
            KernelName::Heat | KernelName::HeatWhile => "block-updates/s",
            KernelName::CgLite => "iterations/s",
            KernelName::Nbody => "pair-interactions/s",
        }
    }
}

impl fmt::Display for KernelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        KernelName::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().replace('_', "-") == s)
            .ok_or_else(|| format!("unknown kernel `{s}`"))
    }
}

/// Problem description shared by all kernels.
///
/// `size` is the vector length (multisaxpy), the grid side including the
/// fixed boundary ring (heat), the grid side of the Laplacian (cg_lite) or
/// the particle count (nbody). `block` is the granularity lever: elements,
/// grid points per side, matrix rows or particles per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kernel: KernelName,
    pub size: usize,
    pub block: usize,
    pub iterations: u64,
    /// Convergence threshold of heat_while; `iterations` caps the loop.
    pub threshold: f64,
    pub seed: u64,
}

impl KernelSpec {
    pub fn new(kernel: KernelName, size: usize, block: usize, iterations: u64) -> Self {
        KernelSpec {
            kernel,
            size,
            block,
            iterations,
            threshold: 1e-3,
            seed: 0,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn threshold(mut self, t: f64) -> Self {
        self.threshold = t;
        self
    }

    /// Desk-scale default instance.
    pub fn default_for(kernel: KernelName) -> Self {
        match kernel {
            KernelName::Multisaxpy => KernelSpec::new(kernel, 1 << 20, 1 << 14, 50),
            KernelName::Heat => KernelSpec::new(kernel, 512, 32, 100),
            KernelName::HeatWhile => KernelSpec::new(kernel, 256, 32, 1000).threshold(1e-3),
            KernelName::CgLite => KernelSpec::new(kernel, 128, 1024, 50),
            KernelName::Nbody => KernelSpec::new(kernel, 1024, 128, 10),
        }
    }

    /// Tiny instance used by tests and the oracle battery.
    pub fn tiny(kernel: KernelName, seed: u64) -> Self {
        let s = match kernel {
            KernelName::Multisaxpy => KernelSpec::new(kernel, 64, 8, 6),
            KernelName::Heat => KernelSpec::new(kernel, 24, 4, 5),
            KernelName::HeatWhile => KernelSpec::new(kernel, 24, 4, 200).threshold(1e-2),
            KernelName::CgLite => KernelSpec::new(kernel, 8, 16, 6),
            KernelName::Nbody => KernelSpec::new(kernel, 24, 6, 3),
        };
        s.seed(seed)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.block == 0 || self.size == 0 {
            return Err("size and block must be positive".into());
        }
        if self.iterations == 0 {
            return Err("at least one iteration is required".into());
        }
        let units = match self.kernel {
            KernelName::CgLite => self.size * self.size,
            _ => self.size,
        };
        if units % self.block != 0 {
            return Err(format!("block {} does not divide {}", self.block, units));
        }
        if matches!(self.kernel, KernelName::Heat | KernelName::HeatWhile) && self.size / self.block < 3 {
            return Err("heat needs at least 3 blocks per side (one interior block)".into());
        }
        Ok(())
    }
}

/// What a sequential or task-parallel run produced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub checksum: u64,
    pub iterations: u64,
}

/// A kernel instance whose loop body can be spawned into any task scope.
pub trait Kernel: Send + Sync + 'static {
    /// Tasks of one iteration, in creation order.
    fn tasks_per_iteration(&self) -> usize;

    fn spawn_iteration(self: Arc<Self>, i: u64, sp: &mut dyn Spawner) -> Result<(), RuntimeError>;

    /// Loop condition for convergence-driven kernels: the closure and the
    /// keys it reads.
    fn condition(self: Arc<Self>) -> Option<(ConditionFn, Vec<DataAccess>)> {
        None
    }

    /// Iterations executed so far.
    fn iterations_done(&self) -> u64;

    fn checksum(&self) -> u64;

    /// Work units per iteration, in the unit of the figure of merit.
    fn work_per_iteration(&self) -> f64;
}

pub fn build(spec: &KernelSpec) -> Result<Arc<dyn KernelDyn>, String> {
    spec.validate()?;
    Ok(match spec.kernel {
        KernelName::Multisaxpy => handle(multisaxpy::Multisaxpy::new(spec)),
        KernelName::Heat | KernelName::HeatWhile => handle(heat::Heat::new(spec)),
        KernelName::CgLite => handle(cg::CgLite::new(spec)),
        KernelName::Nbody => handle(nbody::Nbody::new(spec)),
    })
}

/// Object-safe face of [`Kernel`].
pub trait KernelDyn: Send + Sync {
    fn tasks_per_iteration(&self) -> usize;
    fn spawn_iteration(&self, i: u64, sp: &mut dyn Spawner) -> Result<(), RuntimeError>;
    fn condition(&self) -> Option<(ConditionFn, Vec<DataAccess>)>;
    fn iterations_done(&self) -> u64;
    fn checksum(&self) -> u64;
    fn work_per_iteration(&self) -> f64;
}

/// Wrapper giving a kernel its own `Arc` handle for task bodies.
struct Handle<K>(Arc<K>);

impl<K: Kernel> KernelDyn for Handle<K> {
    fn tasks_per_iteration(&self) -> usize {
        self.0.tasks_per_iteration()
    }
    fn spawn_iteration(&self, i: u64, sp: &mut dyn Spawner) -> Result<(), RuntimeError> {
        Arc::clone(&self.0).spawn_iteration(i, sp)
    }
    fn condition(&self) -> Option<(ConditionFn, Vec<DataAccess>)> {
        Arc::clone(&self.0).condition()
    }
    fn iterations_done(&self) -> u64 {
        self.0.iterations_done()
    }
    fn checksum(&self) -> u64 {
        self.0.checksum()
    }
    fn work_per_iteration(&self) -> f64 {
        self.0.work_per_iteration()
    }
}

fn handle<K: Kernel>(k: K) -> Arc<dyn KernelDyn> {
    Arc::new(Handle(Arc::new(k)))
}

/// Runs the sequential reference of `spec`.
pub fn sequential(spec: &KernelSpec) -> Result<Outcome, String> {
    spec.validate()?;
    Ok(match spec.kernel {
        KernelName::Multisaxpy => multisaxpy::sequential(spec),
        KernelName::Heat | KernelName::HeatWhile => heat::sequential(spec),
        KernelName::CgLite => cg::sequential(spec),
        KernelName::Nbody => nbody::sequential(spec),
    })
}

/// FNV-1a over the little-endian bit patterns of `values`.
pub fn checksum<'a>(values: impl IntoIterator<Item = &'a f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Access key `idx` in namespace `space`.
pub(crate) fn key(space: u64, idx: usize) -> AccessKey {
    AccessKey(space << 40 | idx as u64)
}

/// Data blocks shared by task bodies. Locks are only ever taken with
/// `try_*`: a failure means two conflicting tasks ran at the same time.
pub(crate) struct Blocks {
    name: &'static str,
    blocks: Box<[RwLock<Vec<f64>>]>,
}

impl Blocks {
    pub fn new(name: &'static str, blocks: impl IntoIterator<Item = Vec<f64>>) -> Self {
        Blocks {
            name,
            blocks: blocks.into_iter().map(RwLock::new).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn read(&self, b: usize) -> RwLockReadGuard<'_, Vec<f64>> {
        self.blocks[b]
            .try_read()
            .unwrap_or_else(|| panic!("dependency violation: {}[{b}] is being written", self.name))
    }

    pub fn write(&self, b: usize) -> RwLockWriteGuard<'_, Vec<f64>> {
        self.blocks[b]
            .try_write()
            .unwrap_or_else(|| panic!("dependency violation: {}[{b}] is in use", self.name))
    }

    pub fn concat(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.read().clone()).collect()
    }
}

/// Scalar cell with the same race detection as [`Blocks`].
pub(crate) struct Cell<T> {
    name: &'static str,
    v: RwLock<T>,
}

impl<T> Cell<T> {
    pub fn new(name: &'static str, v: T) -> Self {
        Cell { name, v: RwLock::new(v) }
    }

    pub fn read(&self) -> RwLockReadGuard<'_, T> {
        self.v
            .try_read()
            .unwrap_or_else(|| panic!("dependency violation: {} is being written", self.name))
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, T> {
        self.v
            .try_write()
            .unwrap_or_else(|| panic!("dependency violation: {} is in use", self.name))
    }
}

pub(crate) fn rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
