use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{contract, Result};
use crate::scalar::Scalar;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors of one model.
///
/// Every store carries a process-unique id so that gradients collected from a
/// graph touching several stores can be routed back to the right one. Cloning
/// a store assigns a fresh id; the [`ParamId`]s stay valid for the clone.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    tensors: Vec<Tensor<T>>,
    names: Vec<String>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: fresh_uid(),
            tensors: self.tensors.clone(),
            names: self.names.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: fresh_uid(),
            tensors: Vec::new(),
            names: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn add(&mut self, name: &str, mut tensor: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        tensor.requires_grad = trainable;
        let idx = self.tensors.len();
        self.tensors.push(tensor);
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), idx);
        ParamId(idx)
    }

    /// Adds a parameter with entries drawn from `N(0, std²)`.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let vals = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        self.add(name, Tensor::new(shape, vals).expect("normal init shape"), true)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(
            name,
            Tensor::new(shape, vec![T::lit(value); n]).expect("const init shape"),
            true,
        )
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.tensors[id.0].requires_grad
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.tensors[id.0].requires_grad = trainable;
    }

    pub fn freeze_all(&mut self) {
        for t in &mut self.tensors {
            t.requires_grad = false;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Copies values of every same-named, same-shaped parameter from `other`.
    /// Returns the number of tensors copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(&j) = other.by_name.get(name) {
                let src = &other.tensors[j];
                let dst = &mut self.tensors[i];
                if src.shape() == dst.shape() {
                    dst.values_mut().copy_from_slice(src.values());
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Replaces the values of parameter `name`.
    pub fn set_values(&mut self, name: &str, shape: &[usize], values: Vec<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| contract("set_values", format!("unknown parameter {name}")))?;
        let t = &mut self.tensors[id.0];
        if t.shape() != shape || t.len() != values.len() {
            return Err(contract(
                "set_values",
                format!("{name}: shape {:?} vs stored {:?}", shape, t.shape()),
            ));
        }
        t.values_mut().copy_from_slice(&values);
        Ok(())
    }

    /// SHA-256 over names, shapes and bit patterns of the selected parameters.
    pub fn checksum_of<'a>(&self, ids: impl IntoIterator<Item = &'a ParamId>) -> String {
        let mut h = Sha256::new();
        for id in ids {
            let t = &self.tensors[id.0];
            h.update(self.names[id.0].as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.values() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn checksum(&self) -> String {
        let ids: Vec<ParamId> = self.ids().collect();
        self.checksum_of(&ids)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(move |(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }
}
