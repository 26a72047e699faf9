//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value, its input handles and (when recording) a boxed
//! [`Function`] carrying the backward rule plus whatever activations it saved.
//! Nodes are appended in evaluation order, so the tape is topologically sorted
//! by construction and backward is a single reverse sweep.
//!
//! Contributions to a node used by several consumers are summed in recording
//! order of the consumers, which keeps gradients bit-reproducible.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a parameter inside a model's parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Backward rule of a recorded operation.
pub trait Function<F: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order. `None` means the
    /// input receives no contribution.
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Constant,
    Input,
    Param(ParamId),
    Op,
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Function<F>>>,
    origin: Origin,
    requires_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    recording: bool,
    consumed: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    /// A graph in gradient mode.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A graph that evaluates values only; backward is unavailable.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
            consumed: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<F>, origin: Origin) -> Var {
        let requires_grad = self.recording && origin != Origin::Constant;
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            origin,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, Origin::Constant)
    }

    /// A leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, Origin::Input)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<F>) -> Var {
        self.push_leaf(value, Origin::Param(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends the result of an operation. The backward rule is kept only when
    /// recording and at least one input needs a gradient.
    pub fn record(
        &mut self,
        value: Tensor<F>,
        inputs: &[Var],
        op: Box<dyn Function<F>>,
    ) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let node = if requires_grad {
            Node {
                value,
                inputs: inputs.to_vec(),
                op: Some(op),
                origin: Origin::Op,
                requires_grad,
            }
        } else {
            Node {
                value,
                inputs: Vec::new(),
                op: None,
                origin: Origin::Op,
                requires_grad,
            }
        };
        self.nodes.push(node);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar root. May be called once per recording.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<F>> {
        if !self.recording {
            return Err(Error::Backward(
                "graph was built without gradient recording".into(),
            ));
        }
        if self.consumed {
            return Err(Error::Backward(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        let root_len = self.nodes[root.0].value.len();
        if root_len != 1 {
            return Err(Error::Backward(format!(
                "root must be scalar, has shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.consumed = true;

        let mut pending: Vec<Vec<Tensor<F>>> = (0..=root.0).map(|_| Vec::new()).collect();
        pending[root.0].push(Tensor::ones(self.nodes[root.0].value.shape()));
        let mut out = Gradients {
            params: BTreeMap::new(),
            inputs: HashMap::new(),
        };

        for idx in (0..=root.0).rev() {
            if pending[idx].is_empty() {
                continue;
            }
            let contributions = std::mem::take(&mut pending[idx]);
            // consumers were visited last-first; sum in recording order
            let mut iter = contributions.into_iter().rev();
            let mut grad = iter.next().expect("non-empty");
            for g in iter {
                grad.add_assign(&g);
            }
            let node = &self.nodes[idx];
            match node.origin {
                Origin::Param(id) => {
                    match out.params.get_mut(&id) {
                        Some(acc) => acc.add_assign(&grad),
                        None => {
                            out.params.insert(id, grad);
                        }
                    }
                    continue;
                }
                Origin::Input => {
                    out.inputs.insert(Var(idx), grad);
                    continue;
                }
                Origin::Constant => continue,
                Origin::Op => {}
            }
            let Some(op) = node.op.as_ref() else { continue };
            let inputs: Vec<&Tensor<F>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Backward(format!(
                    "{} returned {} gradients for {} inputs",
                    op.name(),
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[input.0].value.shape() {
                    return Err(Error::Backward(format!(
                        "{} produced gradient of shape {:?} for input of shape {:?}",
                        op.name(),
                        g.shape(),
                        self.nodes[input.0].value.shape()
                    )));
                }
                pending[input.0].push(g);
            }
        }
        Ok(out)
    }
}

/// Result of [`Graph::backward`]. Parameters not reachable from the root are
/// absent rather than zero.
#[derive(Debug)]
pub struct Gradients<F: Scalar> {
    params: BTreeMap<ParamId, Tensor<F>>,
    inputs: HashMap<Var, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor<F>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<F>> {
        self.params
    }

    pub fn input(&self, v: Var) -> Option<&Tensor<F>> {
        self.inputs.get(&v)
    }
}
