//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in execution order, so the tape is already a
//! topological order; `backward` walks it in reverse. Only nodes that
//! (transitively) depend on a trainable leaf carry gradients.

use super::tensor::{matmul_impl, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise primitives accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Silu,
    Square,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Silu(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    RowSum(NodeId),
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    StopGrad,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `id`; `None` when no trainable path reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `id`, materialized as zeros when the node was unreachable.
    pub fn get_or_zeros(&self, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf: participates in the forward pass, never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_general(a, false, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_general(a, false, b, true)
    }

    fn matmul_general(
        &mut self,
        a: NodeId,
        trans_a: bool,
        b: NodeId,
        trans_b: bool,
    ) -> Result<NodeId> {
        let value = matmul_impl(self.value(a), trans_a, self.value(b), trans_b, "matmul")?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            rg,
        ))
    }

    pub fn elementwise(&mut self, op: ElemOp, a: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        match (op, b) {
            (ElemOp::Add, Some(b)) => self.add(a, b),
            (ElemOp::Sub, Some(b)) => self.sub(a, b),
            (ElemOp::Mul, Some(b)) => self.mul(a, b),
            (ElemOp::Silu, None) => self.silu(a),
            (ElemOp::Square, None) => self.square(a),
            (op, _) => Err(Error::invalid(format!("wrong operand count for {op:?}"))),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.shape() == vb.shape() {
            va.zip_map(vb, f)?
        } else if vb.is_scalar() && vb.shape().len() == 1 {
            let s = vb.item();
            va.map(|x| f(x, s))
        } else if va.is_scalar() && va.shape().len() == 1 {
            let s = va.item();
            vb.map(|x| f(s, x))
        } else {
            return Err(Error::Broadcast {
                op: name,
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        };
        out.check_finite(name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).scale(s).check_finite("scale")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Scale(a, s), rg))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + s).check_finite("add_scalar")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::AddScalar(a), rg))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * sigmoid(x)).check_finite("silu")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Silu(a), rg))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x).check_finite("square")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Square(a), rg))
    }

    /// Elementwise square root; inputs must be strictly positive.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite("sqrt"));
        }
        let v = self.value(a).map(f64::sqrt);
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Sqrt(a), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum()).check_finite("sum")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Sum(a), rg))
    }

    /// Sums each row of a matrix, giving a `rows × 1` column.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let rows = va.rows();
        let data: Vec<f64> = (0..rows).map(|r| va.row(r).iter().sum()).collect();
        let v = Tensor::from_parts(vec![rows, 1], data).check_finite("row_sum")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::RowSum(a), rg))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of zero tensors"))?;
        let rows = self.value(*first).rows();
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows || v.shape().len() != 2 {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.value(*first).shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let v = Tensor::from_parts(vec![rows, total], data);
        let rg = self.any_grad(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Passes the value through and blocks every gradient path behind it.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad, false)
    }

    /// Reverse sweep from a scalar loss. A tape can be differentiated once.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));
        }

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    // C = op(A)·op(B): dop(A) = G·op(B)ᵀ
                    let ga = if *trans_a {
                        matmul_impl(vb, *trans_b, g, true, "matmul backward")?
                    } else {
                        matmul_impl(g, false, vb, !*trans_b, "matmul backward")?
                    };
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = if *trans_b {
                        matmul_impl(g, true, va, *trans_a, "matmul backward")?
                    } else {
                        matmul_impl(va, !*trans_a, g, false, "matmul backward")?
                    };
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate_broadcast(grads, *a, g.clone())?;
                self.accumulate_broadcast(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(grads, *a, g.clone())?;
                self.accumulate_broadcast(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = mul_broadcast(g, vb);
                    self.accumulate_broadcast(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = mul_broadcast(g, va);
                    self.accumulate_broadcast(grads, *b, gb)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone())?,
            Op::Silu(a) => {
                let ga = self.value(*a).zip_map(g, |x, gy| {
                    let s = sigmoid(x);
                    gy * s * (1.0 + x * (1.0 - s))
                })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Square(a) => {
                let ga = self.value(*a).zip_map(g, |x, gy| 2.0 * x * gy)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sqrt(a) => {
                let ga = out.zip_map(g, |y, gy| 0.5 * gy / y)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()))?;
            }
            Op::RowSum(a) => {
                let va = self.value(*a);
                let cols = va.cols();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gr| std::iter::repeat_n(gr, cols))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), data))?;
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        let mut data = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            let start = r * total + offset;
                            data.extend_from_slice(&g.data()[start..start + cols]);
                        }
                        self.accumulate(grads, *p, Tensor::from_parts(vec![rows, cols], data))?;
                    }
                    offset += cols;
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.reshape(&shape)?)?;
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
        if !self.requires_grad(id) {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(acc) => {
                acc.same_shape("gradient accumulation", &g)?;
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    /// Accumulates, reducing to a scalar when the operand was a broadcast scalar.
    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Tensor>],
        id: NodeId,
        g: Tensor,
    ) -> Result<()> {
        if self.value(id).shape() != g.shape() {
            return self.accumulate(grads, id, Tensor::scalar(g.sum()));
        }
        self.accumulate(grads, id, g)
    }
}

fn mul_broadcast(g: &Tensor, other: &Tensor) -> Tensor {
    if other.shape() == g.shape() {
        Tensor::from_parts(
            g.shape().to_vec(),
            g.data().iter().zip(other.data()).map(|(a, b)| a * b).collect(),
        )
    } else {
        g.scale(other.item())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
