use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Named parameter tensors in a fixed lexicographic order.
///
/// The flat order (names sorted, each tensor row-major) is the alignment
/// contract shared by checkpoints and [`GradVector`]s.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    offsets: Vec<usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(map: BTreeMap<String, Tensor<T>>) -> Self {
        let mut names = Vec::with_capacity(map.len());
        let mut tensors = Vec::with_capacity(map.len());
        let mut offsets = Vec::with_capacity(map.len() + 1);
        let mut off = 0;
        for (name, t) in map {
            offsets.push(off);
            off += t.len();
            names.push(name);
            tensors.push(t);
        }
        offsets.push(off);
        ParamStore { names, tensors, offsets }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.tensors[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// Flat offset of tensor `idx`.
    pub fn offset(&self, idx: usize) -> usize {
        self.offsets[idx]
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            out.extend_from_slice(t.values());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) using this store's layout.
    pub fn unflatten(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::LengthMismatch { left: flat.len(), right: self.numel() });
        }
        let tensors = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let vals = flat[self.offsets[i]..self.offsets[i + 1]].to_vec();
                Tensor::new(t.shape().to_vec(), vals)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamStore { names: self.names.clone(), tensors, offsets: self.offsets.clone() })
    }

    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::LengthMismatch { left: flat.len(), right: self.numel() });
        }
        for (i, t) in self.tensors.iter_mut().enumerate() {
            t.values_mut().copy_from_slice(&flat[self.offsets[i]..self.offsets[i + 1]]);
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            offsets: self.offsets.clone(),
        }
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.values() {
                h.update(v.f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Per-tensor selection of trainable parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamMask {
    selected: Vec<bool>,
}

impl ParamMask {
    pub fn all(n: usize) -> Self {
        ParamMask { selected: vec![true; n] }
    }

    pub fn from_fn<T: Real>(store: &ParamStore<T>, f: impl Fn(&str) -> bool) -> Self {
        ParamMask { selected: store.names().iter().map(|n| f(n)).collect() }
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.selected.get(idx).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.selected.iter().all(|s| *s)
    }

    /// Number of scalar parameters covered by the mask.
    pub fn count<T: Real>(&self, store: &ParamStore<T>) -> usize {
        (0..store.num_tensors()).filter(|i| self.contains(*i)).map(|i| store.tensor(i).len()).sum()
    }
}

/// Flat gradient aligned with a [`ParamStore`]'s order.
///
/// With a mask, only the selected tensors are present, still in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradVector<T = f32> {
    values: Vec<T>,
    mask: Option<ParamMask>,
}

impl<T: Real> GradVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        GradVector { values, mask: None }
    }

    pub fn zeros(n: usize) -> Self {
        GradVector { values: vec![T::zero(); n], mask: None }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mask(&self) -> Option<&ParamMask> {
        self.mask.as_ref()
    }

    /// Restricts a full-length gradient to the tensors selected by `mask`.
    pub fn masked(&self, store: &ParamStore<T>, mask: &ParamMask) -> Result<Self> {
        if self.mask.is_some() || self.values.len() != store.numel() {
            return Err(Error::LengthMismatch { left: self.values.len(), right: store.numel() });
        }
        let mut out = Vec::with_capacity(mask.count(store));
        for i in 0..store.num_tensors() {
            if mask.contains(i) {
                let a = store.offset(i);
                out.extend_from_slice(&self.values[a..a + store.tensor(i).len()]);
            }
        }
        Ok(GradVector { values: out, mask: Some(mask.clone()) })
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// `Σ g1[i]·g2[i]` accumulated in 64-bit.
pub fn flat_dot<T: Real>(g1: &GradVector<T>, g2: &GradVector<T>) -> Result<f64> {
    if g1.len() != g2.len() {
        return Err(Error::LengthMismatch { left: g1.len(), right: g2.len() });
    }
    if g1.mask != g2.mask {
        return Err(Error::InvalidArgument("gradient vectors use different parameter masks".into()));
    }
    Ok(g1.values.iter().zip(&g2.values).map(|(a, b)| a.f64() * b.f64()).sum())
}

/// Running 64-bit sum of gradients in a fixed order.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    sum: Vec<f64>,
}

impl GradAccumulator {
    pub fn new(n: usize) -> Self {
        GradAccumulator { sum: vec![0.0; n] }
    }

    pub fn add<T: Real>(&mut self, g: &GradVector<T>, weight: f64) {
        assert_eq!(g.len(), self.sum.len());
        for (s, v) in self.sum.iter_mut().zip(g.values()) {
            *s += weight * v.f64();
        }
    }

    pub fn finish<T: Real>(self) -> GradVector<T> {
        GradVector::new(self.sum.into_iter().map(T::of).collect())
    }
}
