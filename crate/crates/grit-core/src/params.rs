//! Named parameter storage. Parameters live outside the tape; a forward pass
//! binds them as leaves and `Tape::accumulate_param_grads` flows adjoints back
//! here, where the optimizer reads them.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Handle into a [`ParamStore`]. Stable for the lifetime of the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct Param {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    trainable: bool,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a parameter. Names must be unique; they key the checkpoint
    /// format and the optimizer's warning messages.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|p| p.name != name),
            "param store: duplicate name {name:?}"
        );
        let grad = vec![0.0; value.numel()];
        self.entries.push(Param { name, value, grad, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn add_grad(&mut self, id: ParamId, contribution: &[f64]) {
        let grad = &mut self.entries[id.0].grad;
        assert_eq!(grad.len(), contribution.len(), "param grad size mismatch");
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Applies `f(name, value, grad, trainable)` to every entry in id order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor, &mut [f64], bool)) {
        for p in &mut self.entries {
            f(&p.name, &mut p.value, &mut p.grad, p.trainable);
        }
    }

    /// Snapshot of all values, in id order. Used for best-epoch bookkeeping.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.entries.len(), "snapshot size mismatch");
        for (p, s) in self.entries.iter_mut().zip(snapshot) {
            assert_eq!(p.value.shape(), s.shape(), "snapshot shape mismatch for {}", p.name);
            p.value = s.clone();
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// Binds parameters onto one tape, caching handles so a parameter used in
/// several places (e.g. a tied embedding table) is one shared leaf node.
pub struct Binder<'a> {
    tape: Rc<Tape>,
    store: &'a ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: Rc<Tape>, store: &'a ParamStore) -> Self {
        let bound = RefCell::new(vec![None; store.len()]);
        Binder { tape, store, bound }
    }

    pub fn tape(&self) -> &Rc<Tape> {
        &self.tape
    }

    pub fn var(&self, id: ParamId) -> Var {
        if let Some(v) = &self.bound.borrow()[id.0] {
            return v.clone();
        }
        let v = self.tape.param(self.store, id);
        self.bound.borrow_mut()[id.0] = Some(v.clone());
        v
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.tape.constant(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grads_accumulate_and_clear() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]), true);
        store.add_grad(id, &[0.5, 0.5]);
        store.add_grad(id, &[0.25, 0.0]);
        assert_eq!(store.grad(id), &[0.75, 0.5]);
        store.zero_grads();
        assert_eq!(store.grad(id), &[0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate name")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(0.0), true);
        store.add("w", Tensor::scalar(0.0), true);
    }
}
