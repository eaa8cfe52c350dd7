use std::sync::Arc;

use super::array::Array;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
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
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    MatMul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize),
    Gather(NodeId, Arc<[usize]>),
    ScatterAdd(NodeId, Arc<[usize]>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y - 1), rearranged to stay accurate for large y.
    y + (-(-y).exp_m1()).ln()
}

/// Reverse-mode recording tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` is a single reverse sweep. Gradients
/// accumulate across `backward` calls until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array>>,
}

fn same_shape(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &aval) in row.iter().enumerate() {
            if aval == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (d, &bval) in dst.iter_mut().zip(brow) {
                *d += aval * bval;
            }
        }
    }
    out
}

/// (m, k, n) for a matmul of `a` by `b`, treating a vector `b` as `[k, 1]`.
fn matmul_dims(a: &Array, b: &Array) -> Result<(usize, usize, usize)> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.shape().len() != 2 {
        return Err(err());
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    match *b.shape() {
        [kb] if kb == k => Ok((m, k, 1)),
        [kb, n] if kb == k => Ok((m, k, n)),
        _ => Err(err()),
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

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A trainable leaf; its gradient is retained after `backward`.
    pub fn param(&mut self, value: Array) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of the last `backward` calls, if any reached `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Array> {
        self.grads[id.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, va, vb)?;
        let value = va.zip_map(vb, f);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let value = self.nodes[a.0].value.map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Matrix product `[m, k] x [k, n]`, or matrix-vector `[m, k] x [k]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, n) = matmul_dims(va, vb)?;
        let data = matmul_raw(va.data(), vb.data(), m, k, n);
        let shape = if vb.shape().len() == 1 { vec![m] } else { vec![m, n] };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::from_parts(shape, data), Op::MatMul(a, b), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Array::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if v.is_empty() {
            return Err(Error::invalid("mean of an empty array"));
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Array::scalar(m), Op::Mean(a), rg))
    }

    /// Concatenation of scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape().len() > 1 {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: v.shape().to_vec(),
                    rhs: vec![],
                });
            }
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Array::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    /// Contiguous sub-vector `a[start..start + len]`.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if v.shape().len() != 1 || start + len > v.len() {
            return Err(Error::Shape {
                op: "slice",
                lhs: v.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = v.data()[start..start + len].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Array::vector(data), Op::Slice(a, start), rg))
    }

    /// `out[e] = a[index[e]]`.
    pub fn gather(&mut self, a: NodeId, index: Arc<[usize]>) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if v.shape().len() != 1 {
            return Err(Error::Shape {
                op: "gather",
                lhs: v.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        let src = v.data();
        let mut data = Vec::with_capacity(index.len());
        for &i in index.iter() {
            data.push(*src.get(i).ok_or_else(|| {
                Error::invalid(format!("gather index {i} out of bounds for length {}", src.len()))
            })?);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Array::vector(data), Op::Gather(a, index), rg))
    }

    /// Segment sum: `out[target[e]] += a[e]`, output of length `out_len`.
    pub fn scatter_add(&mut self, a: NodeId, target: Arc<[usize]>, out_len: usize) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if v.shape().len() != 1 || v.len() != target.len() {
            return Err(Error::Shape {
                op: "scatter_add",
                lhs: v.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let mut data = vec![0.0; out_len];
        for (&t, &x) in target.iter().zip(v.data()) {
            *data.get_mut(t).ok_or_else(|| {
                Error::invalid(format!("scatter target {t} out of bounds for length {out_len}"))
            })? += x;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Array::vector(data), Op::ScatterAdd(a, target), rg))
    }

    /// Propagates d`loss`/d`node` to every reachable node that requires a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Array>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(Array::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            self.propagate(i, &g, &mut pending);
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Array, pending: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut send = |id: NodeId, contrib: Array| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut pending[id.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), |gi, bi| gi * bi));
                send(*b, g.zip_map(val(*a), |gi, ai| gi * ai));
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                send(*a, g.zip_map(vb, |gi, bi| gi / bi));
                // d(a/b)/db = -out / b
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(vb.data())
                    .map(|((gi, oi), bi)| -gi * oi / bi)
                    .collect();
                send(*b, Array::from_parts(vb.shape().to_vec(), gb));
            }
            Op::Scale(a, c) => send(*a, g.map(|x| c * x)),
            Op::Offset(a) => send(*a, g.clone()),
            Op::Sigmoid(a) => send(*a, g.zip_map(&node.value, |gi, s| gi * s * (1.0 - s))),
            Op::Tanh(a) => send(*a, g.zip_map(&node.value, |gi, t| gi * (1.0 - t * t))),
            Op::Relu(a) => send(*a, g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })),
            Op::Softplus(a) => send(*a, g.zip_map(val(*a), |gi, x| gi * sigmoid(x))),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = matmul_dims(va, vb).expect("validated at record time");
                let gd = g.data();
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for c in 0..n {
                                s += gd[r * n + c] * vb.data()[p * n + c];
                            }
                            da[r * k + p] = s;
                        }
                    }
                    send(*a, Array::from_parts(va.shape().to_vec(), da));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let av = va.data()[r * k + p];
                            for c in 0..n {
                                db[p * n + c] += av * gd[r * n + c];
                            }
                        }
                    }
                    send(*b, Array::from_parts(vb.shape().to_vec(), db));
                }
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                send(*a, Array::full(val(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let va = val(*a);
                let gv = g.data()[0] / va.len() as f64;
                send(*a, Array::full(va.shape(), gv));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let vp = val(p);
                    let chunk = g.data()[offset..offset + vp.len()].to_vec();
                    offset += vp.len();
                    send(p, Array::from_parts(vp.shape().to_vec(), chunk));
                }
            }
            Op::Slice(a, start) => {
                let va = val(*a);
                let mut d = vec![0.0; va.len()];
                d[*start..*start + g.len()].copy_from_slice(g.data());
                send(*a, Array::from_parts(va.shape().to_vec(), d));
            }
            Op::Gather(a, index) => {
                let va = val(*a);
                let mut d = vec![0.0; va.len()];
                for (&i, &gi) in index.iter().zip(g.data()) {
                    d[i] += gi;
                }
                send(*a, Array::from_parts(va.shape().to_vec(), d));
            }
            Op::ScatterAdd(a, target) => {
                let d: Vec<f64> = target.iter().map(|&t| g.data()[t]).collect();
                send(*a, Array::vector(d));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_reference_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) - 0.8807970779778823).abs() < 1e-15);
        assert!(sigmoid(-1e6) == 0.0 && sigmoid(1e6) == 1.0);
    }

    #[test]
    fn softplus_round_trip() {
        for &y in &[1e-6, 0.01, 0.5, 1.0, 2.0, 30.0, 200.0] {
            let x = softplus_inverse(y);
            assert!((softplus(x) - y).abs() <= 1e-12 * y.max(1.0), "y={y}");
        }
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(Array::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut t = Tape::new();
        let y = t.param(Array::vector(vec![1.0, -2.0, 4.0, 0.5]));
        let m = t.mean(y).unwrap();
        t.backward(m).unwrap();
        assert!(t.grad(y).unwrap().data().iter().all(|&g| g == 0.25));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut t = Tape::new();
        let x = t.param(Array::vector(vec![1.0, 2.0]));
        let s = t.sigmoid(x);
        let l = t.sum(s);
        t.backward(l).unwrap();
        let once = t.grad(x).unwrap().clone();
        t.backward(l).unwrap();
        let twice = t.grad(x).unwrap().clone();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        t.zero_grad();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &once);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(Array::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.param(Array::vector(vec![1.0, 2.0]));
        let b = t.param(Array::vector(vec![1.0, 2.0, 3.0]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
        let m = t.param(Array::zeros(&[2, 3]));
        let err = t.matmul(m, a).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(Array::identity(3));
        let x = t.constant(Array::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Array::scalar(2.0));
        let x = t.param(Array::scalar(5.0));
        let y = t.mul(c, x).unwrap();
        t.backward(y).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().item(), Some(2.0));
    }
}
