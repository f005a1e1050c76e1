//! Named, shaped parameter tensors in one flat buffer.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub frozen: bool,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parameter tensors keyed by `component/layer/kind` paths.
///
/// Values live in `f64` but are kept representable in `f32` (see
/// [`ParameterStore::round_to_f32`]) so checkpoints round-trip exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    tensors: Vec<TensorInfo>,
    by_name: BTreeMap<String, ParamId>,
    data: Vec<f64>,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self { tensors: Vec::new(), by_name: BTreeMap::new(), data: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 || numel == 0 {
            return Err(Error::ShapeMismatch(format!("parameter {name}: unsupported shape {shape:?}")));
        }
        if values.len() != numel {
            return Err(Error::ShapeMismatch(format!("parameter {name}: {} values for shape {shape:?}", values.len())));
        }
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidSpec(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.tensors.push(TensorInfo {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.data.len(),
            frozen: false,
        });
        self.data.extend(values);
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn insert_fan_in<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel = shape.iter().product();
        let values = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, shape, values)
    }

    pub fn insert_filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let numel = shape.iter().product();
        self.insert(name, shape, vec![value; numel])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn info(&self, id: ParamId) -> &TensorInfo {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.tensors[id.0].name
    }

    /// Shape as a matrix; vectors are `1 × n` rows.
    pub fn matrix_shape(&self, id: ParamId) -> (usize, usize) {
        match self.tensors[id.0].shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("shape validated on insert"),
        }
    }

    pub fn range(&self, id: ParamId) -> Range<usize> {
        let t = &self.tensors[id.0];
        t.offset..t.offset + t.numel()
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.data[self.range(id)]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        let r = self.range(id);
        &mut self.data[r]
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn num_values(&self) -> usize {
        self.data.len()
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.tensors[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.tensors[id.0].frozen = frozen;
    }

    /// Freezes every tensor whose name starts with `prefix/`.
    pub fn freeze_component(&mut self, component: &str) -> usize {
        let prefix = format!("{component}/");
        let mut n = 0;
        for t in self.tensors.iter_mut().filter(|t| t.name.starts_with(&prefix)) {
            t.frozen = true;
            n += 1;
        }
        n
    }

    /// Per-value mask, `true` where the owning tensor is frozen.
    pub fn frozen_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.data.len()];
        for t in &self.tensors {
            if t.frozen {
                mask[t.offset..t.offset + t.numel()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    /// Number of trainable values among tensors under `component/`.
    pub fn count_component(&self, component: &str) -> usize {
        let prefix = format!("{component}/");
        self.tensors.iter().filter(|t| t.name.starts_with(&prefix)).map(TensorInfo::numel).sum()
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Rebuilds a store from a tensor index and its flat values.
    pub fn from_parts(tensors: Vec<TensorInfo>, data: Vec<f64>) -> Result<Self> {
        let mut by_name = BTreeMap::new();
        let mut expected = 0;
        for (i, t) in tensors.iter().enumerate() {
            if t.offset != expected {
                return Err(Error::Format(format!("tensor {} has offset {} (expected {expected})", t.name, t.offset)));
            }
            expected += t.numel();
            if by_name.insert(t.name.clone(), ParamId(i)).is_some() {
                return Err(Error::Format(format!("duplicate tensor {}", t.name)));
            }
        }
        if expected != data.len() {
            return Err(Error::Format(format!("tensor index covers {expected} values but data holds {}", data.len())));
        }
        Ok(Self { tensors, by_name, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_must_be_unique() {
        let mut s = ParameterStore::new();
        s.insert_filled("a/l0/W", &[2, 3], 0.0).unwrap();
        assert!(matches!(s.insert_filled("a/l0/W", &[2, 3], 0.0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn layout_and_freezing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParameterStore::new();
        let w = s.insert_fan_in("enc/l0/W", &[4, 3], 4, &mut rng).unwrap();
        let b = s.insert_filled("enc/l0/b", &[3], 0.5).unwrap();
        let o = s.insert_filled("dec/l0/b", &[2], 1.0).unwrap();
        assert_eq!(s.range(w), 0..12);
        assert_eq!(s.range(b), 12..15);
        assert_eq!(s.matrix_shape(b), (1, 3));
        assert!(s.values(w).iter().all(|v| v.abs() <= 0.5));
        assert_eq!(s.freeze_component("enc"), 2);
        assert!(s.is_frozen(w) && s.is_frozen(b) && !s.is_frozen(o));
        let mask = s.frozen_mask();
        assert_eq!(mask.iter().filter(|m| **m).count(), 15);
    }

    #[test]
    fn from_parts_rejects_bad_index() {
        let mut s = ParameterStore::new();
        s.insert_filled("x/l/W", &[2, 2], 1.0).unwrap();
        let mut infos = s.tensors().to_vec();
        assert!(ParameterStore::from_parts(infos.clone(), vec![0.0; 3]).is_err());
        infos[0].offset = 1;
        assert!(ParameterStore::from_parts(infos, vec![0.0; 4]).is_err());
    }
}
