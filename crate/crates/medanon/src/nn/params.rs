//! Named parameter storage shared between networks, tapes and the optimizer.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Element, Tensor};

static NEXT_SET_ID: AtomicU32 = AtomicU32::new(0);

/// Index of a parameter inside its owning [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Globally unique parameter address: (set id, index within set).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub set: u32,
    pub index: u32,
}

/// How a network's parameters enter a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// Gradients are accumulated for these parameters.
    Trainable,
    /// Parameters act as constants; backward skips their gradients entirely.
    Frozen,
}

struct ParamEntry<E: Element> {
    name: String,
    value: Arc<Tensor<E>>,
}

/// One network's parameters. Each set has a process-unique id, so parameter
/// sets of different networks are disjoint by construction.
pub struct ParamSet<E: Element> {
    id: u32,
    name: String,
    entries: Vec<ParamEntry<E>>,
}

impl<E: Element> ParamSet<E> {
    pub fn new(name: impl Into<String>) -> Self {
        ParamSet {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            entries: Vec::new(),
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            value: Arc::new(value),
        });
        id
    }

    /// He-normal initialized tensor: std = sqrt(2 / fan_in).
    pub fn add_he_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| E::from_f64(dist.sample(rng)));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(
            name,
            ArrayD::from_elem(IxDyn(shape), E::from_f64(1.0)),
        )
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            set: self.id,
            index: id.0 as u32,
        }
    }

    pub fn value(&self, id: ParamId) -> &Arc<Tensor<E>> {
        &self.entries[id.0].value
    }

    pub fn value_by_index(&self, index: usize) -> &Arc<Tensor<E>> {
        &self.entries[index].value
    }

    pub fn name_of(&self, index: usize) -> &str {
        &self.entries[index].name
    }

    /// In-place update used by the optimizer. Must not be called while tapes
    /// still hold bindings into this set.
    pub fn update(&mut self, index: usize, f: impl FnOnce(&mut Tensor<E>)) {
        let entry = &mut self.entries[index];
        f(Arc::make_mut(&mut entry.value));
    }

    /// Replace a parameter value wholesale (checkpoint loading).
    pub fn set_value(&mut self, index: usize, value: Tensor<E>) {
        assert_eq!(
            self.entries[index].value.shape(),
            value.shape(),
            "parameter {} shape mismatch",
            self.entries[index].name
        );
        self.entries[index].value = Arc::new(value);
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Draws a standard-normal vector; shared helper for noise and init code.
pub fn standard_normal<E: Element>(dim: usize, rng: &mut impl Rng) -> Tensor<E> {
    let dist = Normal::new(0.0, 1.0).expect("valid normal");
    ArrayD::from_shape_fn(IxDyn(&[dim]), |_| E::from_f64(dist.sample(rng)))
}
