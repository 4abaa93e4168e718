//! Named parameters with a frozen/trainable split.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ops::Index;

use sha2::{Digest, Sha256};

use crate::error::{NumericsError, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    /// Hierarchical dotted name, e.g. `encoder.gnn_r.layer3.update`.
    pub name: String,
    pub tensor: Tensor<f64>,
    pub trainable: bool,
}

/// Insertion-ordered parameter collection. The master copy is always 64-bit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<f64>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter> {
        Ok(self.get(self.id(name)?))
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<f64> {
        &self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records every parameter on `tape`: trainable ones as differentiable
    /// leaves, frozen ones as constants.
    pub fn bind<T: Real>(&self, tape: &Tape<T>) -> Binding {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let value = p.tensor.cast::<T>();
                if p.trainable {
                    tape.param(ParamId(i), value)
                } else {
                    tape.constant(value)
                }
            })
            .collect();
        Binding { vars }
    }

    /// SHA-256 over name, shape and little-endian payload of the selected
    /// parameters, in insertion order.
    pub fn checksum_where(&self, mut keep: impl FnMut(&Parameter) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update((p.tensor.rows() as u64).to_le_bytes());
            h.update((p.tensor.cols() as u64).to_le_bytes());
            for x in p.tensor.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn frozen_checksum(&self) -> String {
        self.checksum_where(|p| !p.trainable)
    }

    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }
}

/// Lazily binds parameters of a store onto a tape, each at most once.
///
/// Call [`Scope::bind_trainable`] before `backward` so that every trainable
/// parameter is reported, including ones the forward pass never touched.
pub struct Scope<'a, T: Real> {
    tape: &'a Tape<T>,
    store: &'a ParamStore,
    vars: RefCell<Vec<Option<Var>>>,
}

impl<'a, T: Real> Scope<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore) -> Self {
        Self {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'a Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let value = p.tensor.cast::<T>();
        let v = if p.trainable {
            self.tape.param(id, value)
        } else {
            self.tape.constant(value)
        };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn bind_trainable(&self) {
        for (id, p) in self.store.iter() {
            if p.trainable {
                self.var(id);
            }
        }
    }
}

/// Tape handles for every parameter of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.add("a.b", Tensor::zeros(1, 1), true).unwrap();
        assert!(matches!(
            s.add("a.b", Tensor::zeros(1, 1), false),
            Err(NumericsError::DuplicateParameter(_))
        ));
        assert!(s.id("missing").is_err());
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::filled(1, 2, 2.0), true).unwrap();
        let f = s.add("f", Tensor::filled(1, 2, 3.0), false).unwrap();
        let tape = Tape::<f64>::new();
        let b = s.bind(&tape);
        let y = tape.mul(b[w], b[f]).unwrap();
        let loss = tape.sum_all(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.params()[&w], Tensor::filled(1, 2, 3.0));
        assert!(!g.params().contains_key(&f));
    }

    #[test]
    fn checksum_tracks_frozen_payload_only() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::filled(1, 2, 2.0), true).unwrap();
        let f = s.add("f", Tensor::filled(1, 2, 3.0), false).unwrap();
        let before = s.frozen_checksum();
        s.get_mut(w).tensor.set(0, 0, 9.0);
        assert_eq!(before, s.frozen_checksum());
        s.get_mut(f).tensor.set(0, 0, 9.0);
        assert_ne!(before, s.frozen_checksum());
    }
}
