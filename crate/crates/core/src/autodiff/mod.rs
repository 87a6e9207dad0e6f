//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is the tape: every operation appends one node whose inputs were
//! created earlier, so node order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.

mod backward;
mod layers;
mod ops;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use layers::{positional_encoding, AttentionParams, LstmOutput, LstmParams};
pub use ops::Activation;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode enables dropout and batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        /// Row vector added to every output row.
        bias: Option<Var>,
    },
    AddSuffix {
        x: Var,
        y: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        kind: NormKind,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        padding: usize,
    },
    Softmax {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Mse {
        pred: Var,
        target: Var,
    },
}

/// Which normalization a [`Op::Norm`] node performed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NormKind {
    /// Per channel over batch and length using batch statistics.
    BatchTrain { channels: usize, inner: usize },
    /// Per channel with frozen running statistics.
    BatchEval { channels: usize, inner: usize },
    /// Over the last axis.
    Layer { dim: usize },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Dropout stream configuration for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DropoutStream {
    seed: u64,
    step: u64,
    next_layer: u64,
}

/// The tape.
pub struct Graph<T: Scalar = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    mode: Mode,
    dropout: DropoutStream,
    kink_trace: Option<Vec<i8>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            dropout: DropoutStream {
                seed: 0,
                step: 0,
                next_layer: 0,
            },
            kink_trace: None,
        }
    }

    /// Dropout masks of this pass derive from `(seed, layer, step)`, where
    /// `layer` counts dropout applications in call order.
    pub fn with_dropout_stream(mut self, seed: u64, step: u64) -> Self {
        self.dropout = DropoutStream {
            seed,
            step,
            next_layer: 0,
        };
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Start recording the sign of every relu input (for gradient checking).
    pub(crate) fn trace_kinks(&mut self) {
        self.kink_trace = Some(Vec::new());
    }

    pub(crate) fn kink_signature(&self) -> Option<&[i8]> {
        self.kink_trace.as_deref()
    }

    pub(crate) fn record_kinks(&mut self, input: &[T]) {
        if let Some(trace) = self.kink_trace.as_mut() {
            trace.extend(input.iter().map(|&v| {
                if v > T::zero() {
                    1
                } else if v < T::zero() {
                    -1
                } else {
                    0
                }
            }));
        }
    }

    pub(crate) fn next_dropout_rng(&mut self) -> rand_chacha::ChaCha8Rng {
        let layer = self.dropout.next_layer;
        self.dropout.next_layer += 1;
        // Layer ids occupy the low 16 bits, the optimizer step the rest.
        rng::stream(
            self.dropout.seed,
            Domain::Dropout,
            (self.dropout.step << 16) | (layer & 0xffff),
        )
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        // Rearrangements only copy values that were already checked.
        if !matches!(
            op,
            Op::Reshape { .. } | Op::Permute { .. } | Op::Narrow { .. } | Op::Concat { .. }
        ) {
            value.ensure_finite(op_name(&op))?;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Non-differentiable chains do not need their backward buffers.
        let op = if requires_grad { op } else { strip(op) };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[loss.0].value;
        if out.len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            backward::propagate(self, i, gy, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Graph::backward`]; leaves keep theirs.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient buffer of `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor shaped like its value; zeros when disconnected.
    pub fn tensor(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        let shape = graph.shape(v);
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape.to_vec(), g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }
}

fn strip<T>(op: Op<T>) -> Op<T> {
    match op {
        Op::Dropout { x, .. } => Op::Dropout {
            x,
            mask: Vec::new(),
        },
        Op::Norm {
            x,
            gamma,
            beta,
            kind,
            ..
        } => Op::Norm {
            x,
            gamma,
            beta,
            kind,
            xhat: Vec::new(),
            inv_std: Vec::new(),
        },
        other => other,
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::AddSuffix { .. } => "bias add",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Relu { .. } => "relu",
        Op::Tanh { .. } => "tanh",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Dropout { .. } => "dropout",
        Op::Norm { .. } => "normalization",
        Op::Conv1d { .. } => "conv1d",
        Op::Softmax { .. } => "softmax",
        Op::Reshape { .. } => "reshape",
        Op::Permute { .. } => "permute",
        Op::Narrow { .. } => "narrow",
        Op::Concat { .. } => "concat",
        Op::Mse { .. } => "mse loss",
    }
}
