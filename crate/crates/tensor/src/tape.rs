//! Recorded operation graph with reverse-mode gradient propagation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! holding its output value, its parents and a closure computing the
//! vector-Jacobian product for each parent.

use crate::error::{dim_err, Result, TensorError};
use crate::tensor::{numel, DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a backward closure.
pub struct BackwardArgs<'a> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a [f64],
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Which parents need a gradient; closures may return `None` for others.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
    op: &'static str,
}

pub struct Tape {
    dtype: DType,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            nodes: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let value = if t.dtype() == self.dtype {
            let mut t = t;
            t.grad = None;
            t
        } else {
            t.to_dtype(self.dtype)
        };
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: requires_grad,
            op: "leaf",
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Append a node computed outside this crate. `backward` receives the
    /// upstream gradient and must return one entry per parent.
    pub fn custom(
        &mut self,
        op: &'static str,
        parents: &[Var],
        shape: Vec<usize>,
        data: Vec<f64>,
        backward: BackwardFn,
    ) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(dim_err(op, &shape, &[data.len()]));
        }
        let idx = self.nodes.len();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op, node: idx });
        }
        let value = Tensor::from_parts(shape, data, self.dtype);
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: if needs_grad { Some(backward) } else { None },
            needs_grad,
            op,
        });
        Ok(Var(idx))
    }

    /// Propagate gradients from a single-element `loss` back to every node
    /// that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        let loss_len = self.nodes[loss.0].value.len();
        if loss_len != 1 {
            return Err(dim_err("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            let Some(bw) = node.backward.as_ref() else {
                grads[i] = Some(g);
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].needs_grad).collect();
            let args = BackwardArgs {
                grad: &g,
                inputs,
                output: &node.value,
                needs,
            };
            let parent_grads = bw(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                if pg.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: node.op, node: i });
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
            // interior gradients are not retained
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            leaves: self.nodes.iter().map(|n| n.backward.is_none()).collect(),
        })
    }
}

/// Gradients of leaf nodes after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    leaves: Vec<bool>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if !self.leaves[v.0] {
            return None;
        }
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, or zeros when nothing reached it.
    pub fn get_or_zeros(&self, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel(&self.shapes[v.0])])
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.to_vec(), DType::F64))
    }
}
