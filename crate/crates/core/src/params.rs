//! Named parameter storage with gradient accumulators.

use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tape::{Grads, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Same shape as `value` when present.
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

/// Flat, insertion-ordered registry of every parameter of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            grad: None,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Marks every parameter whose name starts with one of `prefixes` as trainable
    /// and freezes the rest.
    pub fn set_trainable_prefixes(&mut self, prefixes: &[&str]) {
        for p in &mut self.params {
            p.trainable = prefixes.iter().any(|pre| p.name.starts_with(pre));
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients of every parameter bound on `tape` into the accumulators.
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Grads<T>) {
        let mut bound: Vec<_> = tape.bound_params().collect();
        bound.sort_by_key(|(p, _)| *p);
        for (id, var) in bound {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(var) else { continue };
            match &mut p.grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values of parameters with `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for &e in p.value.shape() {
                h.update((e as u64).to_le_bytes());
            }
            buf.clear();
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulates_only_trainable() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("enc.w", Tensor::full([2], 1.0));
        let b = store.add("head.w", Tensor::full([2], 2.0));
        store.set_trainable_prefixes(&["head."]);
        let mut tape = Tape::new();
        let va = tape.param(&store, a);
        let vb = tape.param(&store, b);
        let s = tape.add(va, vb).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&tape, &grads);
        assert!(store.get(a).grad.is_none());
        assert_eq!(store.get(b).grad.as_ref().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn hash_changes_with_values() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("x", Tensor::full([3], 1.0));
        let h0 = store.hash_prefix("");
        store.value_mut(a).data_mut()[1] = 1.5;
        assert_ne!(h0, store.hash_prefix(""));
    }
}
