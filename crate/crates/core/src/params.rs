//! Named parameter storage shared by every model component.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::numerics::{Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered set of named tensors. Frozen entries are never touched by the
/// optimizer; trainable ones are.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| !self.is_trainable(id)).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total element count of trainable entries.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Places every entry on the tape; trainable ones require grad.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.bind_with(g, |_, e| e.trainable)
    }

    /// Places every entry on the tape as a constant.
    pub fn bind_constant(&self, g: &mut Graph<T>) -> Bound {
        self.bind_with(g, |_, _| false)
    }

    pub fn bind_with(&self, g: &mut Graph<T>, requires_grad: impl Fn(ParamId, &ParamEntry<T>) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| g.leaf(e.value.clone(), requires_grad(ParamId(i), e)))
            .collect();
        Bound { vars }
    }

    /// Binds trainable entries as slices of one flat vector `flat` (laid out
    /// in [`ParamStore::trainable_ids`] order) and frozen ones as constants.
    pub fn bind_flat(&self, g: &mut Graph<T>, flat: Var) -> Result<Bound> {
        let expected = self.trainable_count();
        if g.shape(flat) != [expected] {
            return Err(Error::shape("bind_flat", format!("{:?} vs [{expected}]", g.shape(flat))));
        }
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut offset = 0;
        for e in &self.entries {
            if e.trainable {
                let n = e.value.numel();
                let piece = g.slice_rows(flat, offset, n)?;
                vars.push(g.reshape(piece, e.value.shape())?);
                offset += n;
            } else {
                vars.push(g.constant(e.value.clone()));
            }
        }
        Ok(Bound { vars })
    }

    /// Trainable entries concatenated in [`ParamStore::trainable_ids`] order.
    pub fn flatten_trainable(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.value.data().iter().copied())
            .collect();
        let n = data.len().max(1);
        Tensor::new([n], if data.is_empty() { vec![T::zero()] } else { data }).expect("flat shape")
    }

    pub fn load_flat_trainable(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.trainable_count() {
            return Err(Error::shape("load_flat", format!("{} vs {}", flat.len(), self.trainable_count())));
        }
        let mut offset = 0;
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let n = e.value.numel();
            e.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Converts every entry to another element type.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
        }
    }

    /// FNV-1a digest over names and bit patterns of the frozen entries.
    pub fn frozen_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for e in self.entries.iter().filter(|e| !e.trainable) {
            feed(e.name.as_bytes());
            for &v in e.value.data() {
                feed(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Tape handles for every entry of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Parameter initializers. Values are drawn in `f64` and then converted, so
/// the same seed yields the same model in either precision.
pub mod init {
    use super::*;

    pub fn normal<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.sample(dist))).collect();
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }

    pub fn zeros<T: Element>(shape: &[usize]) -> Tensor<T> {
        Tensor::zeros(shape.to_vec())
    }

    pub fn ones<T: Element>(shape: &[usize]) -> Tensor<T> {
        Tensor::full(shape.to_vec(), T::one())
    }
}

/// Linear layer `y = x W^T + b` with `W` stored `(out, in)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        trainable: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init::fan_in_uniform(rng, &[output, input], input), trainable);
        let bias = bias.then(|| store.add(format!("{name}.bias"), init::fan_in_uniform(rng, &[output], input), trainable));
        Linear { weight, bias }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul_nt(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis followed by an affine map.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, width: usize, trainable: bool) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), init::ones(&[width]), trainable),
            beta: store.add(format!("{name}.beta"), init::zeros(&[width]), trainable),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let s = g.mul(n, p.var(self.gamma))?;
        g.add(s, p.var(self.beta))
    }
}
