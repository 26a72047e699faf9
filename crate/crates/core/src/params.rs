//! Ordered, named parameter storage shared by every layer of a model.

use std::collections::HashMap;

use crate::autodiff::{Graph, ParamId, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    /// Non-trainable entries are buffers such as batch-norm running moments.
    pub trainable: bool,
    /// Column-wise L2 bound enforced after each optimizer step.
    pub max_norm: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable,
            max_norm: None,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<F>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Inserts the parameter into the graph as a differentiable leaf.
    pub fn var(&self, g: &mut Graph<F>, id: ParamId) -> Var {
        g.param(id, self.params[id.0].value.clone())
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set-param", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Copies every value from a store with the identical layout.
    pub fn load_values(&mut self, other: &ParamStore<F>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Inconsistent(format!(
                "parameter count {} vs {}",
                other.params.len(),
                self.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Inconsistent(format!(
                    "parameter {} {:?} vs {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
