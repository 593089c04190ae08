use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{GradientMap, Matrix, ParamId};

/// Named tensors in deterministic (lexicographic) order. Used both for files and
/// for the trainable set of a tuning run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TensorMap(BTreeMap<String, Matrix>);

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Option<Matrix> {
        self.0.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing tensor {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.0.keys().map(|k| ParamId::new(k.clone())).collect()
    }

    /// Sum of entry counts.
    pub fn scalar_count(&self) -> usize {
        self.0.values().map(Matrix::len).sum()
    }

    pub fn extend(&mut self, other: TensorMap) {
        self.0.extend(other.0);
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> TensorMap {
        TensorMap(
            self.0
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        )
    }

    /// Plain gradient step `p -= lr * g` on every tensor with a gradient.
    pub fn sgd_step(&mut self, grads: &GradientMap, lr: f64) -> Result<()> {
        if lr == 0.0 {
            return Ok(());
        }
        for (id, g) in grads.iter() {
            let p = self
                .0
                .get_mut(id.as_str())
                .ok_or_else(|| Error::Config(format!("gradient for unknown tensor {id}")))?;
            p.axpy(-lr, g)?;
        }
        Ok(())
    }

    /// Names whose tensors differ bitwise between `self` and `other`, including
    /// names present on one side only.
    pub fn changed_names(&self, other: &TensorMap) -> Vec<String> {
        let mut out: Vec<String> = self
            .0
            .iter()
            .filter(|(k, v)| other.get(k).is_none_or(|o| !o.bit_eq(v)))
            .map(|(k, _)| k.clone())
            .collect();
        out.extend(other.0.keys().filter(|k| !self.0.contains_key(*k)).cloned());
        out
    }
}

impl FromIterator<(String, Matrix)> for TensorMap {
    fn from_iter<I: IntoIterator<Item = (String, Matrix)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl IntoIterator for TensorMap {
    type Item = (String, Matrix);
    type IntoIter = std::collections::btree_map::IntoIter<String, Matrix>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}
