//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation executed through it, in order. Calling
//! [`Graph::backward`] walks that record in reverse, pushing adjoints from the
//! scalar loss back to every leaf and [`Parameter`] that took part.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a [`Parameter`] inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint rule: `(grad_out, inputs, output) -> grad per input`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Trainable tensor with its gradient and momentum buffer.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
    /// Whether weight decay applies (false for biases).
    pub decay: bool,
}

impl Parameter {
    fn new(name: String, value: Tensor, decay: bool) -> Self {
        Parameter {
            name,
            grad: Tensor::zeros_like(&value),
            momentum: Tensor::zeros_like(&value),
            value,
            decay,
        }
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value, decay));
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }
}

/// Adjoints of the leaves created with `requires_grad`.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }
}

/// Binary elementwise operations; the right operand may also be a one-element tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

/// Operation record for one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records adjoint rules.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A graph that only evaluates; nothing is differentiable.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: false,
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

    /// Constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Leaf whose adjoint is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        let rg = self.recording;
        self.push_leaf(value, rg, None)
    }

    /// Leaf bound to a parameter; backward accumulates into its `grad`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let rg = self.recording;
        self.push_leaf(store.get(id).value.clone(), rg, Some(id))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Append an operation result. The adjoint rule is kept only when some input needs it.
    pub(crate) fn record(&mut self, value: Tensor, inputs: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: if requires_grad {
                inputs.to_vec()
            } else {
                Vec::new()
            },
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let scalar_rhs = av.shape() != bv.shape();
        if scalar_rhs && !bv.is_scalar() {
            return Err(Error::shape(format!(
                "elementwise {op:?}: extents {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let f = match op {
            Elementwise::Add => |x: f32, y: f32| x + y,
            Elementwise::Sub => |x: f32, y: f32| x - y,
            Elementwise::Mul => |x: f32, y: f32| x * y,
        };
        let out = if scalar_rhs {
            let s = bv.item();
            av.map(|x| f(x, s))
        } else {
            av.zip_map(bv, f)?
        };
        let backward: BackwardFn = Box::new(move |g, inputs, _| {
            let (a, b) = (inputs[0], inputs[1]);
            let (ga, gb) = match op {
                Elementwise::Add => (g.clone(), g.clone()),
                Elementwise::Sub => (g.clone(), g.map(|v| -v)),
                Elementwise::Mul => {
                    let ga = if scalar_rhs {
                        let s = b.item();
                        g.map(|v| v * s)
                    } else {
                        g.zip_map(b, |gv, bv| gv * bv).expect("extents checked")
                    };
                    let gb = if scalar_rhs {
                        g.zip_map(a, |gv, av| gv * av).expect("extents checked")
                    } else {
                        g.zip_map(a, |gv, av| gv * av).expect("extents checked")
                    };
                    (ga, gb)
                }
            };
            let gb = if scalar_rhs {
                Tensor::from_parts(b.shape().to_vec(), vec![gb.sum() as f32])
            } else {
                gb
            };
            vec![Some(ga), Some(gb)]
        });
        Ok(self.record(out, &[a, b], backward))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    /// `max(a, floor)` elementwise; `floor = 0` is ReLU. Ties pass no gradient.
    pub fn max_scalar(&mut self, a: Var, floor: f32) -> Var {
        let out = self.value(a).map(|x| x.max(floor));
        self.record(
            out,
            &[a],
            Box::new(move |g, inputs, _| {
                let ga = g
                    .zip_map(inputs[0], |gv, x| if x > floor { gv } else { 0.0 })
                    .expect("extents checked");
                vec![Some(ga)]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.max_scalar(a, 0.0)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.record(
            out,
            &[a],
            Box::new(move |g, _, _| vec![Some(g.map(|v| v * factor))]),
        )
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum() as f32);
        self.record(
            out,
            &[a],
            Box::new(|g, inputs, _| {
                let s = g.item();
                vec![Some(inputs[0].map(|_| s))]
            }),
        )
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Parameter adjoints are added to `params`' gradients (so repeated calls
    /// accumulate); adjoints of `input` leaves are returned.
    pub fn backward(&self, loss: Var, params: &mut ParamStore) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got extents {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(grads);
        }
        let mut adjoints: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adjoints[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(adj) = adjoints[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(backward) = &node.backward {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| self.value(*v)).collect();
                let input_grads = backward(&adj, &inputs, &node.value);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (v, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    match &mut adjoints[v.0] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot @ None => *slot = Some(g),
                    }
                }
            } else if let Some(pid) = node.param {
                params.get_mut(pid).grad.add_assign(&adj)?;
            } else if node.requires_grad {
                grads.leaves.insert(Var(idx), adj);
            }
        }
        Ok(grads)
    }
}
