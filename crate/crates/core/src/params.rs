//! Named parameter storage shared by the backbone, heads and optimizer.
//!
//! Parameters live outside any graph as plain buffers. Each training step
//! binds them as leaf tensors, runs forward/backward, and reads the leaf
//! gradients back out by name.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension {
                op: "param",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Parameters keyed by hierarchical dotted names, iterated in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param<T>) {
        self.entries.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Param::len).sum()
    }

    /// Moves every entry of `other` into `self`. Names must not collide.
    pub fn absorb(&mut self, other: ParamStore<T>) -> Result<()> {
        for (name, p) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::Contract(format!("duplicate parameter {name}")));
            }
            self.entries.insert(name, p);
        }
        Ok(())
    }

    /// Removes and returns every entry whose name starts with `prefix`.
    pub fn split_prefix(&mut self, prefix: &str) -> ParamStore<T> {
        let names: Vec<String> = self
            .entries
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        let mut out = ParamStore::new();
        for n in names {
            let p = self.entries.remove(&n).unwrap();
            out.entries.insert(n, p);
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Param {
                            shape: p.shape.clone(),
                            data: p.data.iter().map(|v| U::of(v.as_f64())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Leaf tensors for one forward pass.
    pub fn bind(&self, trainable: bool) -> Bound<T> {
        Bound {
            tensors: self
                .entries
                .iter()
                .map(|(n, p)| {
                    let t = Tensor::new(&p.shape, p.data.clone(), trainable)
                        .expect("param shape validated on insert");
                    (n.clone(), t)
                })
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and exact value bits, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in &p.shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in &p.data {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Parameters bound as graph leaves for a single forward/backward pass.
#[derive(Debug, Clone)]
pub struct Bound<T: Scalar> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Bound<T> {
    pub fn from_tensors(pairs: impl IntoIterator<Item = (String, Tensor<T>)>) -> Self {
        Self {
            tensors: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    /// Merges two bindings (e.g. backbone and head).
    pub fn merged(mut self, other: Bound<T>) -> Self {
        self.tensors.extend(other.tensors);
        self
    }

    /// Gradients of every trainable leaf that received one.
    pub fn grads(&self) -> BTreeMap<String, Vec<T>> {
        self.tensors
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .filter_map(|(n, t)| t.grad_vec().map(|g| (n.clone(), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("b.w", Param::new(vec![2], vec![1.0, 2.0]).unwrap());
        s.insert("a.w", Param::new(vec![1], vec![3.0]).unwrap());
        s.insert("head.w", Param::new(vec![1], vec![4.0]).unwrap());
        s
    }

    #[test]
    fn iterates_in_name_order() {
        let s = store();
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["a.w", "b.w", "head.w"]);
        assert_eq!(s.num_elements(), 4);
    }

    #[test]
    fn split_and_absorb_round_trip() {
        let mut s = store();
        let before = s.checksum();
        let head = s.split_prefix("head.");
        assert_eq!(head.len(), 1);
        assert_eq!(s.len(), 2);
        s.absorb(head.clone()).unwrap();
        assert_eq!(s.checksum(), before);
        assert!(s.absorb(head).is_err());
    }

    #[test]
    fn checksum_sees_single_bit_changes() {
        let mut s = store();
        let before = s.checksum();
        let p = s.get_mut("a.w").unwrap();
        p.data[0] = f32::from_bits(p.data[0].to_bits() + 1);
        assert_ne!(s.checksum(), before);
    }

    #[test]
    fn bound_grads_only_for_trainable() {
        let s = store();
        let frozen = s.bind(false);
        let x = frozen.get("a.w").unwrap().scale(2.0).sum();
        x.backward().unwrap();
        assert!(frozen.grads().is_empty());
        let live = s.bind(true);
        live.get("a.w").unwrap().scale(2.0).sum().backward().unwrap();
        assert_eq!(live.grads()["a.w"], vec![2.0]);
    }
}
