//! Named trainable parameters, non-trainable buffers and the per-pass
//! forward context that lifts them onto a tape.

use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{BatchStats, Gradients, Tape, Var, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub usize);

/// Which optimiser owns a parameter: network weights or architecture weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Weights,
    Arch,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
    pub momentum_buffer: Option<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashMap<String, Slot>,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        self.names.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name, Slot::Param(self.params.len()))?;
        self.params.push(Parameter {
            name,
            value: value.with_requires_grad(true),
            group,
            momentum_buffer: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name, Slot::Buffer(self.buffers.len()))?;
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.params[id.0].group == group).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name)? {
            Slot::Param(i) => Some(ParamId(*i)),
            Slot::Buffer(_) => None,
        }
    }

    /// Trainable scalar count (sum of parameter lengths) in a group.
    pub fn numel(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.grad = None;
        }
    }

    /// Adds the parameter-leaf gradients of one backward sweep.
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Gradients<T>) {
        for (id, g) in grads.param_grads(tape) {
            self.params[id.0].value.accumulate_grad(g);
        }
    }

    /// Every parameter and buffer as `(name, tensor)` in registration order.
    pub fn named_arrays(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone().with_requires_grad(false)))
            .chain(self.buffers.iter().map(|b| (b.name.clone(), b.value.clone())))
            .map(|(n, mut t)| {
                t.grad = None;
                (n, t)
            })
            .collect()
    }

    /// Overwrites values by name. Every parameter and buffer must be present
    /// with a matching shape; extra arrays are rejected.
    pub fn load_named(&mut self, arrays: &[(String, Tensor<T>)]) -> Result<()> {
        let mut seen = vec![false; self.params.len() + self.buffers.len()];
        for (name, t) in arrays {
            let slot = *self
                .names
                .get(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint array {name:?} has no matching parameter")))?;
            let (dst, idx) = match slot {
                Slot::Param(i) => (&mut self.params[i].value, i),
                Slot::Buffer(i) => (&mut self.buffers[i].value, self.params.len() + i),
            };
            if dst.shape() != t.shape() {
                return Err(Error::shape("load_named", dst.shape(), t.shape()));
            }
            dst.data_mut().copy_from_slice(t.data());
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let name = if missing < self.params.len() {
                &self.params[missing].name
            } else {
                &self.buffers[missing - self.params.len()].name
            };
            return Err(Error::invalid(format!("checkpoint lacks array {name:?}")));
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a digest over names and value bits, used to
    /// assert that a set of weights was left untouched.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in self.named_arrays() {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Digest restricted to one group.
    pub fn group_digest(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in self.params.iter().filter(|p| p.group == group) {
            for v in p.value.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Batch-norm layer state: affine parameters plus running statistics.
#[derive(Clone, Copy, Debug)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

/// Registers parameters under a hierarchical name prefix with seeded
/// initialisation.
pub struct Builder<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: Vec<String>,
    group: ParamGroup,
}

impl<'a, T: Real, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: Vec::new(),
            group: ParamGroup::Weights,
        }
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    /// Runs `f` with `segment` appended to the name prefix.
    pub fn scope<U>(&mut self, segment: impl std::fmt::Display, f: impl FnOnce(&mut Self) -> U) -> U {
        self.prefix.push(segment.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn with_group<U>(&mut self, group: ParamGroup, f: impl FnOnce(&mut Self) -> U) -> U {
        let prev = std::mem::replace(&mut self.group, group);
        let out = f(self);
        self.group = prev;
        out
    }

    pub fn tensor(&mut self, leaf: &str, value: Tensor<T>) -> Result<ParamId> {
        let name = self.full_name(leaf);
        self.store.add(name, value, self.group)
    }

    /// He-normal initialised convolution weight `out × in/groups × k × k`.
    pub fn conv(&mut self, leaf: &str, cin: usize, cout: usize, k: usize, groups: usize) -> Result<ParamId> {
        let fan_in = (cin / groups) * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = Tensor::randn(&[cout, cin / groups, k, k], std, self.rng)?;
        self.tensor(leaf, w)
    }

    pub fn prelu(&mut self, leaf: &str, c: usize) -> Result<ParamId> {
        self.tensor(leaf, Tensor::full(&[c], T::lit(0.25))?)
    }

    pub fn bn(&mut self, leaf: &str, c: usize) -> Result<BnIds> {
        self.scope(leaf, |b| {
            let gamma = b.tensor("weight", Tensor::full(&[c], T::one())?)?;
            let beta = b.tensor("bias", Tensor::zeros(&[c])?)?;
            let running_mean = b.store.add_buffer(b.full_name("running_mean"), Tensor::zeros(&[c])?)?;
            let running_var = b
                .store
                .add_buffer(b.full_name("running_var"), Tensor::full(&[c], T::one())?)?;
            Ok(BnIds {
                gamma,
                beta,
                running_mean,
                running_var,
            })
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Lifts parameters onto a tape for one forward pass.
///
/// Only parameters whose group is listed in `trainable` get
/// `requires_grad`; the rest enter the graph as constants. In training mode
/// batch-norm running statistics are updated after the pass with
/// [`Ctx::commit_stats`].
pub struct Ctx<'t, 's, T: Real> {
    pub tape: &'t Tape<T>,
    pub store: &'s mut ParamStore<T>,
    pub mode: Mode,
    trainable: Vec<ParamGroup>,
    cache: HashMap<ParamId, usize>,
    leaves: Vec<Var<'t, T>>,
    pending: Vec<(BnIds, BatchStats<T>)>,
}

impl<'t, 's, T: Real> Ctx<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s mut ParamStore<T>, mode: Mode, trainable: &[ParamGroup]) -> Self {
        Self {
            tape,
            store,
            mode,
            trainable: trainable.to_vec(),
            cache: HashMap::new(),
            leaves: Vec::new(),
            pending: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var<'t, T> {
        if let Some(&i) = self.cache.get(&id) {
            return self.leaves[i];
        }
        let p = self.store.param(id);
        let rg = self.trainable.contains(&p.group);
        let mut value = p.value.clone();
        value.grad = None;
        let v = self.tape.param_leaf(id, value, rg);
        self.cache.insert(id, self.leaves.len());
        self.leaves.push(v);
        v
    }

    /// Batch norm in the context's mode.
    pub fn batch_norm(&mut self, x: Var<'t, T>, bn: &BnIds) -> Result<Var<'t, T>> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        match self.mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm(gamma, beta, None)?;
                if let Some(stats) = stats {
                    self.pending.push((*bn, stats));
                }
                Ok(y)
            }
            Mode::Eval => {
                let m = self.store.buffer(bn.running_mean).value.data().to_vec();
                let v = self.store.buffer(bn.running_var).value.data().to_vec();
                Ok(x.batch_norm(gamma, beta, Some((&m, &v)))?.0)
            }
        }
    }

    /// Folds the batch statistics gathered during the pass into the running
    /// estimates (`running ← (1 − 0.1)·running + 0.1·batch`, unbiased variance).
    pub fn commit_stats(&mut self) {
        let mom = T::lit(BN_MOMENTUM);
        for (bn, stats) in self.pending.drain(..) {
            let n = stats.count as f64;
            let correction = if n > 1.0 { T::lit(n / (n - 1.0)) } else { T::one() };
            let rm = self.store.buffer_mut(bn.running_mean).value.data_mut();
            for (r, &m) in rm.iter_mut().zip(&stats.mean) {
                *r = (T::one() - mom) * *r + mom * m;
            }
            let rv = self.store.buffer_mut(bn.running_var).value.data_mut();
            for (r, &v) in rv.iter_mut().zip(&stats.var) {
                *r = (T::one() - mom) * *r + mom * v * correction;
            }
        }
    }
}
