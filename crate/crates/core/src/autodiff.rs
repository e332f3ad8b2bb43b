//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation as a node in creation order, so node ids
//! are already a topological order and the reverse sweep is a single backwards
//! pass over the node list. Tapes are meant to be built per evaluation and
//! dropped afterwards.

use std::collections::{HashMap, HashSet};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid array: shape {shape:?} needs {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
}

/// Row-major dense array.
#[derive(Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for DenseArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseArray{:?}{:?}", self.shape, self.data)
    }
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::BadLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutodiffError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Self::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a single-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    fn add_assign(&mut self, other: &DenseArray) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub type NodeId = usize;

/// Operation tag of a tape node. Operand ids live in the node's parent list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Leaf,
    MatMul,
    Add,
    Mul,
    Softplus,
    Elu,
    ReluClamp,
    Exp,
    LogSumExp,
    Sum,
    Scale(f64),
    Dot,
    SquareNorm,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Softplus => "softplus",
            Op::Elu => "elu",
            Op::ReluClamp => "relu",
            Op::Exp => "exp",
            Op::LogSumExp => "logsumexp",
            Op::Sum => "sum",
            Op::Scale(_) => "scale",
            Op::Dot => "dot",
            Op::SquareNorm => "square_norm",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub value: DenseArray,
    pub parents: Vec<NodeId>,
    pub op: Op,
}

/// Append-only record of a computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    watched: HashSet<NodeId>,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Max-shifted log-sum-exp. Returns `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
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

    pub fn node(&self, id: NodeId) -> Result<&Node, AutodiffError> {
        self.nodes.get(id).ok_or(AutodiffError::UnknownNode(id))
    }

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id].value
    }

    /// Adds an input whose adjoint will be reported by [`Tape::backward`].
    pub fn variable(&mut self, value: DenseArray) -> NodeId {
        let id = self.push(value, vec![], Op::Leaf);
        self.watched.insert(id);
        id
    }

    /// Adds an input that is not differentiated.
    pub fn constant(&mut self, value: DenseArray) -> NodeId {
        self.push(value, vec![], Op::Leaf)
    }

    pub fn watch(&mut self, id: NodeId) {
        self.watched.insert(id);
    }

    fn push(&mut self, value: DenseArray, parents: Vec<NodeId>, op: Op) -> NodeId {
        self.nodes.push(Node { value, parents, op });
        self.nodes.len() - 1
    }

    fn check(&self, ids: &[NodeId]) -> Result<(), AutodiffError> {
        for &id in ids {
            if id >= self.nodes.len() {
                return Err(AutodiffError::UnknownNode(id));
            }
        }
        Ok(())
    }

    /// Generic entry point: applies `op` to `inputs` and records the result.
    pub fn forward_op(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        self.check(inputs)?;
        let arity = match op {
            Op::Leaf => 0,
            Op::MatMul | Op::Add | Op::Mul | Op::Dot => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(AutodiffError::ShapeMismatch {
                op: op.name(),
                lhs: vec![arity],
                rhs: vec![inputs.len()],
            });
        }
        let value = match op {
            Op::Leaf => unreachable!("leaf nodes are created with variable/constant"),
            Op::MatMul => self.eval_matmul(inputs[0], inputs[1])?,
            Op::Add => self.eval_add(inputs[0], inputs[1])?,
            Op::Mul => self.eval_mul(inputs[0], inputs[1])?,
            Op::Dot => {
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if a.len() != b.len() {
                    return Err(mismatch("dot", a, b));
                }
                DenseArray::scalar(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
            }
            Op::Softplus => self.map(inputs[0], softplus),
            Op::Elu => self.map(inputs[0], elu),
            Op::ReluClamp => self.map(inputs[0], |x| x.max(0.0)),
            Op::Exp => self.map(inputs[0], f64::exp),
            Op::Scale(c) => self.map(inputs[0], |x| c * x),
            Op::LogSumExp => DenseArray::scalar(logsumexp(&self.value(inputs[0]).data)),
            Op::Sum => DenseArray::scalar(self.value(inputs[0]).data.iter().sum()),
            Op::SquareNorm => {
                DenseArray::scalar(self.value(inputs[0]).data.iter().map(|x| x * x).sum())
            }
        };
        Ok(self.push(value, inputs.to_vec(), op))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(Op::Add, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(Op::Mul, &[a, b])
    }
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(Op::Dot, &[a, b])
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(Op::Softplus, &[a])
    }
    pub fn elu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(Op::Elu, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(Op::ReluClamp, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(Op::Exp, &[a])
    }
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(Op::LogSumExp, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(Op::Sum, &[a])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.forward_op(Op::Scale(c), &[a])
    }
    pub fn square_norm(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(Op::SquareNorm, &[a])
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> DenseArray {
        let v = self.value(a);
        DenseArray {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn eval_matmul(&self, a: NodeId, b: NodeId) -> Result<DenseArray, AutodiffError> {
        let (a, b) = (self.value(a), self.value(b));
        if a.shape.len() != 2 || b.shape.is_empty() || b.shape.len() > 2 || a.shape[1] != b.shape[0]
        {
            return Err(mismatch("matmul", a, b));
        }
        let (m, k) = (a.shape[0], a.shape[1]);
        let n = if b.shape.len() == 2 { b.shape[1] } else { 1 };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += aip * b.data[p * n + j];
                }
            }
        }
        let shape = if b.shape.len() == 2 { vec![m, n] } else { vec![m] };
        Ok(DenseArray { shape, data: out })
    }

    fn eval_add(&self, a: NodeId, b: NodeId) -> Result<DenseArray, AutodiffError> {
        let (a, b) = (self.value(a), self.value(b));
        if a.shape != b.shape {
            return Err(mismatch("add", a, b));
        }
        Ok(DenseArray {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        })
    }

    fn eval_mul(&self, a: NodeId, b: NodeId) -> Result<DenseArray, AutodiffError> {
        let (a, b) = (self.value(a), self.value(b));
        if a.shape == b.shape {
            return Ok(DenseArray {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
            });
        }
        // scalar times array
        let (s, arr) = match (a.len(), b.len()) {
            (1, _) => (a.data[0], b),
            (_, 1) => (b.data[0], a),
            _ => return Err(mismatch("mul", a, b)),
        };
        Ok(DenseArray {
            shape: arr.shape.clone(),
            data: arr.data.iter().map(|x| s * x).collect(),
        })
    }

    /// Reverse sweep from a scalar `root`. Returns adjoints of every watched
    /// node; watched nodes that do not influence `root` get zero adjoints.
    pub fn backward(&self, root: NodeId) -> Result<HashMap<NodeId, DenseArray>, AutodiffError> {
        self.check(&[root])?;
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(rv.shape.clone()));
        }
        let mut adj: Vec<Option<DenseArray>> = vec![None; root + 1];
        adj[root] = Some(DenseArray {
            shape: rv.shape.clone(),
            data: vec![1.0],
        });
        for id in (0..=root).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            for (slot, contrib) in self.local_grads(node, &g) {
                match &mut adj[slot] {
                    Some(acc) => acc.add_assign(&contrib),
                    empty @ None => *empty = Some(contrib),
                }
            }
            adj[id] = Some(g);
        }
        let mut out = HashMap::new();
        for &w in &self.watched {
            let g = adj
                .get_mut(w)
                .and_then(Option::take)
                .unwrap_or_else(|| self.nodes[w].value.zeros_like());
            out.insert(w, g);
        }
        Ok(out)
    }

    fn local_grads(&self, node: &Node, g: &DenseArray) -> Vec<(NodeId, DenseArray)> {
        let p = &node.parents;
        let elementwise = |id: NodeId, d: &dyn Fn(f64) -> f64| {
            let x = self.value(id);
            DenseArray {
                shape: x.shape.clone(),
                data: x.data.iter().zip(&g.data).map(|(&xv, &gv)| gv * d(xv)).collect(),
            }
        };
        match node.op {
            Op::Leaf => vec![],
            Op::Add => vec![(p[0], g.clone()), (p[1], g.clone())],
            Op::Scale(c) => vec![(
                p[0],
                DenseArray {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|v| c * v).collect(),
                },
            )],
            Op::Softplus => vec![(p[0], elementwise(p[0], &sigmoid))],
            Op::Elu => vec![(p[0], elementwise(p[0], &elu_grad))],
            Op::ReluClamp => vec![(p[0], elementwise(p[0], &|x| if x > 0.0 { 1.0 } else { 0.0 }))],
            Op::Exp => vec![(p[0], elementwise(p[0], &f64::exp))],
            Op::Sum => {
                let x = self.value(p[0]);
                vec![(
                    p[0],
                    DenseArray {
                        shape: x.shape.clone(),
                        data: vec![g.data[0]; x.len()],
                    },
                )]
            }
            Op::SquareNorm => {
                let x = self.value(p[0]);
                vec![(
                    p[0],
                    DenseArray {
                        shape: x.shape.clone(),
                        data: x.data.iter().map(|v| 2.0 * v * g.data[0]).collect(),
                    },
                )]
            }
            Op::LogSumExp => {
                let x = self.value(p[0]);
                let lse = node.value.data[0];
                vec![(
                    p[0],
                    DenseArray {
                        shape: x.shape.clone(),
                        data: x.data.iter().map(|v| g.data[0] * (v - lse).exp()).collect(),
                    },
                )]
            }
            Op::Dot => {
                let (a, b) = (self.value(p[0]), self.value(p[1]));
                let s = g.data[0];
                vec![
                    (
                        p[0],
                        DenseArray {
                            shape: a.shape.clone(),
                            data: b.data.iter().map(|v| s * v).collect(),
                        },
                    ),
                    (
                        p[1],
                        DenseArray {
                            shape: b.shape.clone(),
                            data: a.data.iter().map(|v| s * v).collect(),
                        },
                    ),
                ]
            }
            Op::Mul => {
                let (a, b) = (self.value(p[0]), self.value(p[1]));
                if a.shape == b.shape {
                    let ga = b.data.iter().zip(&g.data).map(|(x, y)| x * y).collect();
                    let gb = a.data.iter().zip(&g.data).map(|(x, y)| x * y).collect();
                    vec![
                        (p[0], DenseArray { shape: a.shape.clone(), data: ga }),
                        (p[1], DenseArray { shape: b.shape.clone(), data: gb }),
                    ]
                } else {
                    // one side is a broadcast scalar
                    let (si, ai) = if a.len() == 1 { (p[0], p[1]) } else { (p[1], p[0]) };
                    let s = self.value(si).data[0];
                    let arr = self.value(ai);
                    let gs: f64 = arr.data.iter().zip(&g.data).map(|(x, y)| x * y).sum();
                    vec![
                        (
                            si,
                            DenseArray {
                                shape: self.value(si).shape.clone(),
                                data: vec![gs],
                            },
                        ),
                        (
                            ai,
                            DenseArray {
                                shape: arr.shape.clone(),
                                data: g.data.iter().map(|v| s * v).collect(),
                            },
                        ),
                    ]
                }
            }
            Op::MatMul => {
                let (a, b) = (self.value(p[0]), self.value(p[1]));
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = if b.shape.len() == 2 { b.shape[1] } else { 1 };
                // dA = G Bᵀ, dB = Aᵀ G
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.data[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for q in 0..k {
                            ga[i * k + q] += gij * b.data[q * n + j];
                            gb[q * n + j] += gij * a.data[i * k + q];
                        }
                    }
                }
                vec![
                    (p[0], DenseArray { shape: a.shape.clone(), data: ga }),
                    (p[1], DenseArray { shape: b.shape.clone(), data: gb }),
                ]
            }
        }
    }
}

fn mismatch(op: &'static str, a: &DenseArray, b: &DenseArray) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

/// Compares reverse-mode adjoints of `f` at `point` against central
/// differences and returns the largest relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as denominator.
///
/// `f` receives a fresh tape and the id of the input variable and must return
/// the id of a scalar node.
pub fn grad_check<F>(f: F, point: &DenseArray, step: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, AutodiffError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |p: &DenseArray| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let x = tape.variable(p.clone());
        let root = f(&mut tape, x)?;
        Ok(tape.value(root).item())
    };
    let mut tape = Tape::new();
    let x = tape.variable(point.clone());
    let root = f(&mut tape, x)?;
    let grads = tape.backward(root)?;
    let analytic = &grads[&x];

    let mut worst = 0.0_f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut t = Tape::new();
        let x = t.constant(DenseArray::scalar(0.0));
        let y = t.softplus(x).unwrap();
        assert!((t.value(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(0.0) - 0.693_147_180_559_945_3).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_of_two_zeros() {
        let mut t = Tape::new();
        let x = t.constant(DenseArray::vector(vec![0.0, 0.0]));
        let y = t.logsumexp(x).unwrap();
        assert!((t.value(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i3 = t.constant(DenseArray::identity(3));
        let v = t.constant(DenseArray::vector(vec![1.5, -2.0, 7.0]));
        let y = t.matmul(i3, v).unwrap();
        assert_eq!(t.value(y).data(), &[1.5, -2.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::new();
        let a = t.constant(DenseArray::zeros(&[2, 3]));
        let v = t.constant(DenseArray::vector(vec![1.0, 2.0]));
        let err = t.matmul(a, v).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        let err = t.add(a, v).unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn square_norm_adjoint() {
        let mut t = Tape::new();
        let v = t.variable(DenseArray::vector(vec![1.0, 2.0, 3.0]));
        let r = t.square_norm(v).unwrap();
        let g = t.backward(r).unwrap();
        assert_eq!(g[&v].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn dot_adjoint_is_other_operand() {
        let mut t = Tape::new();
        let a = t.variable(DenseArray::vector(vec![1.0, -1.0, 0.5]));
        let b = t.variable(DenseArray::vector(vec![4.0, 2.0, -3.0]));
        let r = t.dot(a, b).unwrap();
        let g = t.backward(r).unwrap();
        assert_eq!(g[&a].data(), &[4.0, 2.0, -3.0]);
        assert_eq!(g[&b].data(), &[1.0, -1.0, 0.5]);
    }

    #[test]
    fn softplus_of_product_matches_finite_difference() {
        let build = |t: &mut Tape, w: f64| {
            let wn = t.variable(DenseArray::scalar(w));
            let x = t.constant(DenseArray::scalar(2.0));
            let p = t.mul(wn, x).unwrap();
            let r = t.softplus(p).unwrap();
            (wn, r)
        };
        let mut t = Tape::new();
        let (w, r) = build(&mut t, 0.5);
        let g = t.backward(r).unwrap()[&w].item();
        assert!((g - sigmoid(1.0) * 2.0).abs() < 1e-14);
        let h = 1e-5;
        let f = |w: f64| softplus(w * 2.0);
        let fd = (f(0.5 + h) - f(0.5 - h)) / (2.0 * h);
        assert!((g - fd).abs() / g.abs() < 1e-9);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let v = t.variable(DenseArray::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(v), Err(AutodiffError::NonScalarRoot(_))));
    }

    #[test]
    fn untouched_watched_nodes_get_zero() {
        let mut t = Tape::new();
        let a = t.variable(DenseArray::vector(vec![1.0, 2.0]));
        let b = t.variable(DenseArray::vector(vec![3.0]));
        let r = t.sum(a).unwrap();
        let g = t.backward(r).unwrap();
        assert_eq!(g[&b].data(), &[0.0]);
    }

    #[test]
    fn backward_is_repeatable() {
        let mut t = Tape::new();
        let a = t.variable(DenseArray::vector(vec![0.3, -1.2, 2.0]));
        let e = t.elu(a).unwrap();
        let l = t.logsumexp(e).unwrap();
        let g1 = t.backward(l).unwrap();
        let g2 = t.backward(l).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn grad_check_constant_function() {
        let p = DenseArray::vector(vec![1.0, 2.0]);
        let err = grad_check(
            |t, _x| Ok(t.constant(DenseArray::scalar(3.0))),
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for &y in &[1e-6, 0.05, 1.0, 10.0, 40.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() <= 1e-12 * y.max(1.0));
        }
    }
}
