//! Named parameters, non-trainable buffers, and the binding of both onto a
//! tape for one forward pass.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A trainable tensor with a unique dotted name such as `enc0.res1.conv1.weight`.
#[derive(Debug, Clone)]
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±1/sqrt(fan_in)`.
    KaimingUniform { fan_in: usize },
    /// Uniform in `±sqrt(6/fan_in)`, variance-preserving ahead of a ReLU.
    HeUniform { fan_in: usize },
}

/// Stable 64-bit FNV-1a, used to derive per-parameter RNG streams.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Owns every parameter and buffer of a model.
///
/// Initial values depend only on `(seed, name)`, so two models that share a
/// sub-network by name start from identical weights for it regardless of
/// what else they contain.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Real = f32> {
    seed: u64,
    params: Vec<Parameter<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(
            !self.index.contains_key(name) && !self.buffers.iter().any(|b| b.0 == name),
            "duplicate parameter name {name}"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::KaimingUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| T::of_f64(rng.random_range(-bound..bound)))
            }
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| T::of_f64(rng.random_range(-bound..bound)))
            }
        }
        .with_requires_grad(true);
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn register_buffer(&mut self, name: &str, value: Tensor<T>) -> BufferId {
        assert!(
            !self.index.contains_key(name) && !self.buffers.iter().any(|b| b.0 == name),
            "duplicate buffer name {name}"
        );
        self.buffers.push((name.to_string(), value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    /// Position of `id` in [`ParamStore::params`].
    pub fn index_of(&self, id: ParamId) -> usize {
        id.0
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    pub fn buffers(&self) -> &[(String, Tensor<T>)] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.buffers
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Scalar parameters whose names start with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Marks every parameter under `prefix` as frozen (or trainable).
    pub fn set_trainable(&mut self, prefix: &str, on: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.tensor.set_requires_grad(on);
            }
        }
    }

    /// Overwrites parameter and buffer values from `other` for every name
    /// under `prefix` in `other`, with `rename` mapping names across.
    pub fn copy_from(&mut self, other: &ParamStore<T>, rename: impl Fn(&str) -> String) -> Result<()> {
        for p in other.params() {
            let name = rename(&p.name);
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("no parameter named {name}")))?;
            let dst = &mut self.params[id.0].tensor;
            if dst.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            dst.data_mut().copy_from_slice(p.tensor.data());
        }
        for (bname, t) in other.buffers() {
            let name = rename(bname);
            let slot = self
                .buffers
                .iter_mut()
                .find(|b| b.0 == name)
                .ok_or_else(|| Error::Checkpoint(format!("no buffer named {name}")))?;
            if slot.1.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            slot.1.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

/// Whether batch statistics or running statistics drive normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update recorded during a training forward pass.
#[derive(Debug, Clone)]
pub struct RunningUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// A tape bound to a parameter store for one forward (and backward) pass.
pub struct Graph<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: HashMap<ParamId, Var>,
    pub mode: Mode,
    pub updates: Vec<RunningUpdate<T>>,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            mode,
            updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Tape handle for a parameter, recorded on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).tensor.clone());
        self.bound.insert(id, v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.leaf(t)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Parameter gradients produced by the last `backward`, keyed by id.
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        let mut out: Vec<(ParamId, &[T])> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| self.tape.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| id.0);
        out
    }
}

impl<T: Real> ParamStore<T> {
    /// Adds the gradients of a finished graph into parameter grad buffers.
    pub fn accumulate(&mut self, grads: &[(ParamId, &[T])]) {
        for (id, g) in grads {
            let p = &mut self.params[id.0].tensor;
            if p.requires_grad() {
                p.accumulate_grad(g);
            }
        }
    }

    /// Folds batch statistics into running buffers with the given momentum.
    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate<T>], momentum: f64) {
        let m = T::of_f64(momentum);
        for u in updates {
            for (buf, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                let t = &mut self.buffers[buf.0].1;
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }

    /// Converts every parameter and buffer to another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(n, t)| (n.clone(), t.cast().with_requires_grad(false)))
                .collect(),
            index: self.index.clone(),
        }
    }
}
