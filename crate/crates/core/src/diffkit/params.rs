use std::collections::HashMap;

use super::{Gradients, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter '{name}'");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Entries in store order, as written to checkpoints.
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    /// Binds every parameter lazily: a parameter is placed on `tape` the first
    /// time the forward pass asks for it.
    pub fn bind<'s, 't>(&'s self, tape: &'t Tape) -> Bound<'s, 't> {
        Bound {
            store: self,
            tape,
            vars: std::cell::RefCell::new(vec![None; self.tensors.len()]),
        }
    }
}

/// Parameters of a store as seen from one tape.
pub struct Bound<'s, 't> {
    store: &'s ParamStore,
    tape: &'t Tape,
    vars: std::cell::RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t> Bound<'_, 't> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| self.tape.leaf(self.store.tensors[id.0].clone()))
    }

    /// Parameters the forward pass actually touched.
    pub fn touched(&self) -> Vec<ParamId> {
        self.vars.borrow().iter().enumerate().filter_map(|(i, v)| v.map(|_| ParamId(i))).collect()
    }

    /// Gradient per parameter in store order; untouched parameters get zeros.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        let vars = self.vars.borrow();
        self.store
            .tensors
            .iter()
            .zip(vars.iter())
            .map(|(t, v)| match v {
                Some(v) => grads.tensor(*v),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }
}
