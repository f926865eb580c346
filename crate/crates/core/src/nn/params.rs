//! Named parameter storage and per-pass binding onto a tape.

use crate::tensor::{Gradients, Tape, Tensor, TensorError};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

/// Learning-rate group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Transformer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Initial values are rounded to f32 so a freshly built model survives a
/// checkpoint round trip unchanged.
fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>, group: ParamGroup) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: Arc::new(data),
            group,
        });
    }

    /// Replaces the values of an existing parameter.
    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<(), TensorError> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter {name}")))?;
        if self.params[i].data.len() != data.len() {
            return Err(TensorError::Contract(format!(
                "parameter {name} expects {} values, got {}",
                self.params[i].data.len(),
                data.len()
            )));
        }
        self.params[i].data = Arc::new(data);
        Ok(())
    }

    pub fn values_mut(&mut self) -> Vec<&mut [f64]> {
        self.params
            .iter_mut()
            .map(|p| Arc::make_mut(&mut p.data).as_mut_slice())
            .collect()
    }

    pub fn round_to_f32(&mut self) {
        for p in self.values_mut() {
            p.iter_mut().for_each(|v| *v = f32_round(*v));
        }
    }

    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, group: ParamGroup, rng: &mut impl Rng) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| f32_round(rng.gen_range(-bound..bound))).collect();
        self.insert(name, shape, data, group);
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, group: ParamGroup, rng: &mut impl Rng) {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| f32_round(dist.sample(rng))).collect();
        self.insert(name, shape, data, group);
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, group: ParamGroup) {
        let n = shape.iter().product();
        self.insert(name, shape, vec![value; n], group);
    }
}

/// Binds store parameters to one forward pass.
///
/// With a tape, each parameter becomes a tracked leaf on first use; without
/// one, parameters are plain constants and nothing is recorded.
pub struct Ctx<'a> {
    store: &'a ParamStore,
    tape: Option<Tape>,
    bound: RefCell<Vec<Option<Tensor>>>,
}

impl<'a> Ctx<'a> {
    pub fn inference(store: &'a ParamStore) -> Ctx<'a> {
        Ctx {
            store,
            tape: None,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn training(store: &'a ParamStore) -> Ctx<'a> {
        Ctx {
            store,
            tape: Some(Tape::new()),
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.tape.as_ref()
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&self, name: &str) -> Result<Tensor, TensorError> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter {name}")))?;
        if let Some(t) = &self.bound.borrow()[i] {
            return Ok(t.clone());
        }
        let param = &self.store.params[i];
        let t = match &self.tape {
            Some(tape) => tape.leaf(&param.shape, param.data.clone())?,
            None => Tensor::from_arc(&param.shape, param.data.clone())?,
        };
        self.bound.borrow_mut()[i] = Some(t.clone());
        Ok(t)
    }

    /// Gradients in store order; parameters never bound in this pass get `None`.
    pub fn collect(&self, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        self.bound
            .borrow()
            .iter()
            .map(|b| b.as_ref().map(|t| grads.get_or_zeros(t)))
            .collect()
    }
}
