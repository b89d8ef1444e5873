//! Parameter storage and the per-step session that binds parameters onto a
//! fresh tape.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (running statistics) are stored alongside parameters but
    /// never receive gradients.
    pub trainable: bool,
}

/// Named tensors in registration order. The order is part of the checkpoint
/// layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "parameter `{name}` registered twice"
        );
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.entries[id.0];
        if cur.value.shape() != value.shape() {
            return Err(Error::shape("set parameter", cur.value.shape(), value.shape()));
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.entries[id.0].trainable).collect()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }
}

/// Normal(0, std) truncated to ±2σ by rejection.
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

/// One forward/backward pass: a fresh tape plus lazily bound parameters.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    pub training: bool,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, training: bool) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            training,
            buffer_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape handle for a parameter; trainable entries become leaves and
    /// buffers become constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let v = if e.trainable {
            self.tape.leaf(e.value.clone())
        } else {
            self.tape.constant(e.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Queue a new value for a buffer; applied by [`Session::take_buffer_updates`].
    pub fn update_buffer(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Gradients of every bound trainable parameter, indexed by `ParamId`.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v)))
            .collect()
    }
}
