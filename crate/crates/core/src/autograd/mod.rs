//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Var::backward`] on a scalar sweeps the tape in reverse and returns the
//! accumulated gradient of every leaf. A tape is built per forward pass and
//! is not shared across threads.

mod backward;
mod ops;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{contract_err, Error, Result};
use crate::kernels::ConvGeom;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub use backward::Gradients;

thread_local! {
    static BACKWARD_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Corrupt the GELU backward rule on the current thread.
///
/// Used by the verification suite to prove that the gradient checks can fail.
#[doc(hidden)]
pub fn set_backward_fault(enabled: bool) {
    BACKWARD_FAULT.with(|f| f.set(enabled));
}

pub(crate) fn backward_fault() -> bool {
    BACKWARD_FAULT.with(|f| f.get())
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    Scale(usize, T),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    TransposeLast2 {
        x: usize,
        batch: usize,
        m: usize,
        n: usize,
    },
    Reshape(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: T,
    },
    Gelu(usize),
    LeakyRelu(usize, T),
    Softplus(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Upsample {
        x: usize,
        c: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
    ConcatLast {
        parts: Vec<(usize, usize)>,
        rows: usize,
    },
    NarrowLast {
        x: usize,
        start: usize,
        width: usize,
    },
    Sum(usize),
    Mean(usize),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            AddBias { x, bias } => vec![*x, *bias],
            MatMul { a, b, .. } => vec![*a, *b],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            ConcatLast { parts, .. } => parts.iter().map(|p| p.0).collect(),
            Scale(x, _)
            | AddScalar(x)
            | TransposeLast2 { x, .. }
            | Reshape(x)
            | Softmax(x)
            | LogSoftmax(x)
            | Gelu(x)
            | LeakyRelu(x, _)
            | Softplus(x)
            | Upsample { x, .. }
            | NarrowLast { x, .. }
            | Sum(x)
            | Mean(x) => vec![*x],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            AddBias { .. } => "add_bias",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            MatMul { .. } => "matmul",
            TransposeLast2 { .. } => "transpose",
            Reshape(..) => "reshape",
            Softmax(..) => "softmax",
            LogSoftmax(..) => "log_softmax",
            LayerNorm { .. } => "layer_norm",
            Gelu(..) => "gelu",
            LeakyRelu(..) => "leaky_relu",
            Softplus(..) => "softplus",
            Conv2d { .. } => "conv2d",
            Upsample { .. } => "upsample_bilinear",
            ConcatLast { .. } => "concat",
            NarrowLast { .. } => "narrow",
            Sum(..) => "sum",
            Mean(..) => "mean",
        }
    }
}

pub(crate) struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of the operations of one forward pass.
pub struct Tape<T: Real = f64> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Constant: no gradient flows into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_raw(value, op, requires_grad))
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f64> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(Tensor::clone(&self.value()))
    }

    fn check_same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(contract_err!("operands recorded on different tapes"))
        }
    }
}

#[cfg(test)]
mod tests;
