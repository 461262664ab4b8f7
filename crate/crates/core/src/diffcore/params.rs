use std::collections::BTreeMap;

use super::Tensor;
use crate::scalar::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Segment<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named parameter segments, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T> {
    segments: BTreeMap<String, Segment<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        Self { segments: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.segments.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter segment `{name}`")));
        }
        self.segments.insert(name, Segment { tensor, trainable });
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Segment<T>> {
        self.segments.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.segments.contains_key(name)
    }

    pub fn segment(&self, name: &str) -> Result<&Segment<T>> {
        self.segments.get(name).ok_or_else(|| Error::UnknownSegment(name.into()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.segment(name)?.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.segments
            .get_mut(name)
            .map(|s| &mut s.tensor)
            .ok_or_else(|| Error::UnknownSegment(name.into()))
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        Ok(self.segment(name)?.trainable)
    }

    /// Sets the trainable flag on every segment whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, seg) in self.segments.iter_mut() {
            if name.starts_with(prefix) {
                seg.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for seg in self.segments.values_mut() {
            seg.trainable = trainable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Segment<T>)> {
        self.segments.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Segment<T>)> {
        self.segments.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.segments.keys()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Total scalar count over all segments.
    pub fn n_values(&self) -> usize {
        self.segments.values().map(|s| s.tensor.numel()).sum()
    }

    /// Scalar count over segments whose names start with `prefix`.
    pub fn n_values_prefix(&self, prefix: &str) -> usize {
        self.segments
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, s)| s.tensor.numel())
            .sum()
    }

    /// Copies of the segments under `prefix`, with the prefix replaced by `new_prefix`.
    pub fn extract_prefix(&self, prefix: &str, new_prefix: &str) -> Self {
        let segments = self
            .segments
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, s)| (format!("{new_prefix}{}", &n[prefix.len()..]), s.clone()))
            .collect();
        Self { segments }
    }

    /// Merges all segments of `other`; names must not collide.
    pub fn merge(&mut self, other: Self) -> Result<()> {
        for (name, seg) in other.segments {
            self.insert(name, seg.tensor, seg.trainable)?;
        }
        Ok(())
    }

    /// Polyak averaging `self <- tau * online + (1 - tau) * self` over shared names.
    pub fn polyak_from(&mut self, online: &Self, tau: T) -> Result<()> {
        for (name, seg) in self.segments.iter_mut() {
            let src = online.get(name)?;
            if src.shape() != seg.tensor.shape() {
                return Err(Error::Shape(format!("polyak: `{name}` shapes differ")));
            }
            for (t, &o) in seg.tensor.data_mut().iter_mut().zip(src.data()) {
                *t = tau * o + (T::one() - tau) * *t;
            }
        }
        Ok(())
    }

    /// Largest absolute elementwise difference over shared segments.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        let mut m = T::zero();
        for (name, seg) in &self.segments {
            if let Ok(o) = other.get(name) {
                for (&a, &b) in seg.tensor.data().iter().zip(o.data()) {
                    m = m.max((a - b).abs());
                }
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.segments.values().all(|s| s.tensor.is_finite())
    }
}
