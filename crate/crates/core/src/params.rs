//! Named trainable tensors and the store that owns them.

use sha2::{Digest, Sha256};

use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of a model a parameter belongs to. Census and checksums filter on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    Backbone,
    Adapter,
    Critic,
    Other,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
    pub group: ParamGroup,
    /// Set once a backward pass has written into `grad` since the last zeroing.
    pub(crate) grad_touched: bool,
    /// Retired parameters stay addressable but are skipped by census and checkpoints.
    pub(crate) retired: bool,
}

impl Parameter {
    pub fn has_gradient(&self) -> bool {
        self.grad_touched
    }

    pub fn is_retired(&self) -> bool {
        self.retired
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, group: ParamGroup) -> ParamId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            trainable: true,
            group,
            grad_touched: false,
            retired: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    /// Live (non-retired) parameters with their ids.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.retired)
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.iter().find(|(_, p)| p.name == name).map(|(id, _)| id)
    }

    pub fn set_trainable_group(&mut self, group: ParamGroup, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group && !p.retired) {
            p.trainable = trainable;
        }
    }

    pub(crate) fn retire(&mut self, id: ParamId) {
        let p = &mut self.params[id.0];
        p.retired = true;
        p.trainable = false;
    }

    pub fn zero_gradients(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
            p.grad_touched = false;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Matrix) {
        let p = &mut self.params[id.0];
        p.grad.add_assign(grad);
        p.grad_touched = true;
    }

    /// Number of trainable scalar entries in `group` (all groups when `None`).
    pub fn trainable_count(&self, group: Option<ParamGroup>) -> usize {
        self.iter()
            .filter(|(_, p)| p.trainable && group.is_none_or(|g| p.group == g))
            .map(|(_, p)| p.numel())
            .sum()
    }

    /// SHA-256 over names and little-endian value bytes of every live parameter in `group`.
    pub fn checksum(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        for (_, p) in self.iter().filter(|(_, p)| p.group == group) {
            hasher.update(p.name.as_bytes());
            for v in p.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Copies out the values of the given parameters.
    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<Matrix> {
        ids.iter().map(|&id| self.value(id).clone()).collect()
    }

    pub fn restore(&mut self, ids: &[ParamId], values: &[Matrix]) {
        for (&id, v) in ids.iter().zip(values) {
            self.params[id.0].value = v.clone();
        }
    }

    /// Ids of live trainable parameters.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Live `(name, value)` pairs in insertion order, for checkpointing.
    pub fn named_values(&self) -> Vec<(String, Matrix)> {
        self.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn census_respects_groups_and_trainability() {
        let mut store = ParamStore::new();
        store.add("a", Matrix::zeros(2, 3), ParamGroup::Backbone);
        let b = store.add("b", Matrix::zeros(4, 1), ParamGroup::Adapter);
        store.add("c", Matrix::zeros(1, 1), ParamGroup::Critic);
        assert_eq!(store.trainable_count(None), 11);
        store.set_trainable_group(ParamGroup::Backbone, false);
        assert_eq!(store.trainable_count(None), 5);
        assert_eq!(store.trainable_count(Some(ParamGroup::Adapter)), 4);
        store.retire(b);
        assert_eq!(store.trainable_count(Some(ParamGroup::Adapter)), 0);
        assert!(store.find("b").is_none());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::zeros(2, 2), ParamGroup::Backbone);
        let before = store.checksum(ParamGroup::Backbone);
        store.get_mut(a).value.set(0, 0, 1e-300);
        assert_ne!(before, store.checksum(ParamGroup::Backbone));
    }
}
