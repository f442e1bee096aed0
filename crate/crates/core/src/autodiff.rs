//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node in an arena. Node ids are
//! handed out in creation order, so the arena is always topologically
//! sorted and `backward` is a single reverse sweep.
//!
//! After `backward`, adjoints are kept for leaves created with
//! `requires_grad = true` and for interior nodes marked with
//! [`Tape::retain_grad`]. All other adjoints are dropped.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{ensure_finite, Tensor};

/// Handle to a node on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        geom: ConvGeometry,
    },
    AddChannelBias {
        x: NodeId,
        bias: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    Relu {
        a: NodeId,
    },
    AvgPool {
        a: NodeId,
        plane: usize,
    },
    Reshape {
        a: NodeId,
    },
    Sum {
        a: NodeId,
    },
    Index {
        a: NodeId,
        index: usize,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    retain: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    // Node count at the last backward pass; a second backward with no new
    // nodes recorded since is rejected.
    backward_at: Option<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Leaves with `requires_grad` receive adjoints.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Keeps this interior node's adjoint after `backward`.
    pub fn retain_grad(&mut self, id: NodeId) {
        self.nodes[id.0].retain = true;
    }

    /// Adjoint of `id` from the last backward pass, if it was kept.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor> {
        self.grad(id)
            .map(|g| Tensor::from_parts(self.value(id).shape().to_vec(), g.to_vec()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn checked(&self, op: &'static str, ids: &[NodeId]) -> Result<()> {
        for id in ids {
            ensure_finite(op, self.nodes[id.0].value.data())?;
        }
        Ok(())
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.checked("matmul", &[a, b])?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// Cross-correlation of a `C_in×H×W` input with `C_out×C_in×kh×kw` kernels.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        self.checked("conv2d", &[input, kernel])?;
        let (si, sk) = (self.value(input).shape(), self.value(kernel).shape());
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {si:?}, kernel {sk:?}"),
            ));
        }
        let geom = ConvGeometry::new(si[0], si[1], si[2], sk[0], sk[2], sk[3], stride, padding)
            .ok_or_else(|| {
                Error::shape(
                    "conv2d",
                    format!("degenerate output for input {si:?}, kernel {sk:?}, stride {stride}, padding {padding}"),
                )
            })?;
        let out = kernels::conv2d(self.value(input).data(), self.value(kernel).data(), &geom);
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            Tensor::from_parts(vec![geom.c_out, geom.h_out, geom.w_out], out),
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            rg,
        ))
    }

    /// Adds a per-channel bias `[C]` to a `C×H×W` map.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.checked("add_channel_bias", &[x, bias])?;
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 3 || sb != [sx[0]] {
            return Err(Error::shape("add_channel_bias", format!("{sx:?} + {sb:?}")));
        }
        let out = kernels::add_channel_bias(self.value(x).data(), self.value(bias).data());
        let shape = sx.to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::AddChannelBias { x, bias },
            rg,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    fn zip(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.checked(op, &[a, b])?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.checked("scale", &[a])?;
        if !factor.is_finite() {
            return Err(Error::NonFiniteInput { op: "scale" });
        }
        let va = self.value(a);
        let out = Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|v| v * factor).collect(),
        );
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale { a, factor }, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.checked("relu", &[a])?;
        let va = self.value(a);
        let out = Tensor::from_parts(va.shape().to_vec(), kernels::relu(va.data()));
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Relu { a }, rg))
    }

    /// Per-channel spatial mean: `C×H×W -> C`.
    pub fn adaptive_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        self.checked("adaptive_avg_pool", &[a])?;
        let s = self.value(a).shape();
        if s.len() != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::shape(
                "adaptive_avg_pool",
                format!("needs a non-empty C×H×W map, got {s:?}"),
            ));
        }
        let (c, plane) = (s[0], s[1] * s[2]);
        let out = kernels::avg_pool(self.value(a).data(), c, plane);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![c], out),
            Op::AvgPool { a, plane },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.checked("sum", &[a])?;
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(total), Op::Sum { a }, rg))
    }

    /// Selects one element (by flat index) as a scalar.
    pub fn index(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        self.checked("index", &[a])?;
        let va = self.value(a);
        let v = *va.data().get(index).ok_or_else(|| {
            Error::shape(
                "index",
                format!("index {index} out of {} elements", va.numel()),
            )
        })?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(v), Op::Index { a, index }, rg))
    }

    /// `-log softmax(logits)[label]` for a length-K logit vector (any shape
    /// with K elements).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        self.checked("softmax_cross_entropy", &[logits])?;
        let v = self.value(logits).data();
        if label >= v.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: v.len(),
            });
        }
        let loss = kernels::cross_entropy(v, label);
        let probs = kernels::softmax(v);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    /// Propagates adjoints from a scalar `loss` back to every node that
    /// requires a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_at == Some(self.nodes.len()) {
            return Err(Error::BackwardWithoutForward);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            let keep = node.retain || (matches!(node.op, Op::Leaf) && node.requires_grad);
            if !keep {
                *g = None;
            }
        }
        self.grads = grads;
        self.backward_at = Some(self.nodes.len());
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.requires_grad(*a) {
                    let da = kernels::matmul_grad_a(g, self.value(*b).data(), *m, *k, *n);
                    accumulate(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let db = kernels::matmul_grad_b(self.value(*a).data(), g, *m, *k, *n);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                if self.requires_grad(*input) {
                    let di = kernels::conv2d_grad_input(g, self.value(*kernel).data(), geom);
                    accumulate(grads, *input, &di);
                }
                if self.requires_grad(*kernel) {
                    let dk = kernels::conv2d_grad_kernel(g, self.value(*input).data(), geom);
                    accumulate(grads, *kernel, &dk);
                }
            }
            Op::AddChannelBias { x, bias } => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, g);
                }
                if self.requires_grad(*bias) {
                    let c = self.value(*bias).numel();
                    let plane = g.len() / c;
                    let db: Vec<f64> = g.chunks(plane).map(|ch| ch.iter().sum()).collect();
                    accumulate(grads, *bias, &db);
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if self.requires_grad(*id) {
                        accumulate(grads, *id, g);
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    let vb = self.value(*b).data();
                    let da: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let va = self.value(*a).data();
                    let db: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, &db);
                }
            }
            Op::Scale { a, factor } => {
                let da: Vec<f64> = g.iter().map(|x| x * factor).collect();
                accumulate(grads, *a, &da);
            }
            Op::Relu { a } => {
                let va = self.value(*a).data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(va)
                    .map(|(&x, &v)| if v > 0.0 { x } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &da);
            }
            Op::AvgPool { a, plane } => {
                let inv = 1.0 / *plane as f64;
                let da: Vec<f64> = g
                    .iter()
                    .flat_map(|&x| std::iter::repeat_n(x * inv, *plane))
                    .collect();
                accumulate(grads, *a, &da);
            }
            Op::Reshape { a } => accumulate(grads, *a, g),
            Op::Sum { a } => {
                let da = vec![g[0]; self.value(*a).numel()];
                accumulate(grads, *a, &da);
            }
            Op::Index { a, index } => {
                let mut da = vec![0.0; self.value(*a).numel()];
                da[*index] = g[0];
                accumulate(grads, *a, &da);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                let da: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| g[0] * (p - if i == *label { 1.0 } else { 0.0 }))
                    .collect();
                accumulate(grads, *logits, &da);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
    match &mut grads[id.0] {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}
