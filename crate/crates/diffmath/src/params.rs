use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{DiffError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_id() -> u64 {
    NEXT_SET_ID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors with gradient buffers.
///
/// Values are shared with tapes by reference count; updating a value while
/// a tape still holds it copies the buffer first.
#[derive(Debug)]
pub struct ParamSet<T> {
    id: u64,
    names: Vec<String>,
    index: HashMap<String, ParamId>,
    values: Vec<Arc<Tensor<T>>>,
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Clone for ParamSet<T> {
    /// The clone is an independent set with its own identity.
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            names: self.names.clone(),
            index: self.index.clone(),
            values: self
                .values
                .iter()
                .map(|v| Arc::new((**v).clone()))
                .collect(),
            grads: self.grads.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(DiffError::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(Arc::new(value));
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.values[id.0])
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    pub fn grad_sq_norm(&self) -> T {
        self.grads.iter().map(|g| g.sq_norm()).sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Bit-level fingerprint of every value (FNV-1a over the raw bytes).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut buf = Vec::new();
        for v in &self.values {
            buf.clear();
            for &x in v.data() {
                x.write_le(&mut buf);
            }
            for &b in &buf {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    /// A copy that keeps this set's identity, so tape gradients recorded
    /// through it are accumulated by `backward` into whichever of the two is
    /// passed. Used to rebuild a model around the values under test.
    pub fn alias(&self) -> Self {
        Self {
            id: self.id,
            names: self.names.clone(),
            index: self.index.clone(),
            values: self.values.clone(),
            grads: self.grads.clone(),
        }
    }

    /// Element-type conversion; the copy gets a fresh identity and zero
    /// gradients.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            out.add(name.clone(), v.cast()).expect("unique names");
        }
        out
    }

    /// Replaces all values with those of `other` (same names and shapes).
    pub fn copy_values_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if other.names != self.names {
            return Err(DiffError::InvalidArgument(
                "parameter sets have different layouts".into(),
            ));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "copy_values_from",
                    lhs: dst.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            *dst = Arc::new((**src).clone());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f32>::new();
        p.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(p.add("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut p = ParamSet::<f32>::new();
        let w = p.add("w", Tensor::zeros(&[3])).unwrap();
        let before = p.fingerprint();
        p.value_mut(w).data_mut()[1] = 1.0;
        assert_ne!(before, p.fingerprint());
        let q = p.clone();
        assert_eq!(q.fingerprint(), p.fingerprint());
        assert_ne!(q.id(), p.id());
    }
}
