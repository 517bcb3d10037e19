//! Named parameter storage and gradient accumulation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters receive no gradient and are skipped by optimizers.
    pub frozen: bool,
}

/// Ordered collection of named tensors. Insertion order is the canonical order
/// used for checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, ParamId>,
}

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("parameter `{name}` has shape {expected:?}, got {actual:?}")]
    Shape { name: String, expected: (usize, usize), actual: (usize, usize) },
    #[error("duplicate parameter name `{0}`")]
    Duplicate(String),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Panics on duplicate names, which are
    /// always construction bugs.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let id = ParamId(self.entries.len());
        if self.index.insert(name.clone(), id).is_some() {
            panic!("duplicate parameter name `{name}`");
        }
        self.entries.push(ParamEntry { name, value, frozen: false });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    /// Overwrites a parameter by name, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<(), ParamError> {
        let id = self.id(name).ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        let expected = self.entries[id.0].value.shape();
        if expected != value.shape() {
            return Err(ParamError::Shape { name: name.to_string(), expected, actual: value.shape() });
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    /// Copies every parameter of `other` whose name (after stripping
    /// `strip_prefix` and prepending `add_prefix`) exists here.
    pub fn copy_matching(&mut self, other: &ParamStore, strip_prefix: &str, add_prefix: &str) -> Result<usize, ParamError> {
        let mut n = 0;
        for e in &other.entries {
            let Some(rest) = e.name.strip_prefix(strip_prefix) else { continue };
            let target = format!("{add_prefix}{rest}");
            if self.id(&target).is_some() {
                self.assign(&target, e.value.clone())?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// A scoped builder that prefixes names with `prefix/`.
    pub fn scope<'a, R: Rng>(&'a mut self, prefix: &str, rng: &'a mut R) -> Init<'a, R> {
        Init { store: self, prefix: prefix.to_string(), rng }
    }
}

/// Parameter initializer bound to a name prefix.
pub struct Init<'a, R: Rng> {
    store: &'a mut ParamStore,
    prefix: String,
    rng: &'a mut R,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn sub(&mut self, name: &str) -> Init<'_, R> {
        Init { store: self.store, prefix: join(&self.prefix, name), rng: self.rng }
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add(join(&self.prefix, name), Tensor::zeros(rows, cols))
    }

    pub fn constant(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(join(&self.prefix, name), value)
    }

    /// Uniform Glorot/Xavier initialization for a `fan_in × fan_out` matrix.
    pub fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-limit..limit)).collect();
        self.store.add(join(&self.prefix, name), Tensor::from_vec(fan_in, fan_out, data))
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(self.rng)).collect();
        self.store.add(join(&self.prefix, name), Tensor::from_vec(rows, cols, data))
    }

    pub fn rng(&mut self) -> &mut R {
        self.rng
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::new(store.len())
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}
