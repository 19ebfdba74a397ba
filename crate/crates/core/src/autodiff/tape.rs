use std::cell::{Ref, RefCell};
use std::fmt;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Softplus,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            // ln(1 + e^x) without overflow for large |x|
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative evaluated at the pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softplus" => Ok(Activation::Softplus),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    AddBias(usize, usize),
    ConcatCols(usize, usize),
    Act(usize, Activation),
    Sum(usize),
    NormSq(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    trainable: bool,
}

/// Records operations for one loss evaluation and replays them backwards.
///
/// Nodes are appended in creation order, so reverse index order is a valid
/// topological order and each node is visited once during [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to the trainable leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of a trainable leaf, zeros if the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool, trainable: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
            trainable,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn derived(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        self.push(value, op, needs_grad, false)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, node.op, &node.value, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| match g {
                Some(g) if node.trainable => Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn backprop(nodes: &[Node], op: Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let wants = |id: usize| nodes[id].needs_grad;
    match op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            for (id, s) in [(a, 1.0), (b, sign)] {
                if !wants(id) {
                    continue;
                }
                let n = nodes[id].value.len();
                if nodes[id].value.is_scalar() && out.len() > 1 {
                    let total: f64 = g.iter().sum();
                    accumulate(grads, id, 1, |acc| acc[0] += s * total);
                } else {
                    accumulate(grads, id, n, |acc| {
                        acc.iter_mut().zip(g).for_each(|(a, &gi)| *a += s * gi)
                    });
                }
            }
        }
        Op::Mul(a, b) => {
            for (id, other) in [(a, b), (b, a)] {
                if !wants(id) {
                    continue;
                }
                let this = &nodes[id].value;
                let ov = nodes[other].value.data();
                if this.is_scalar() && out.len() > 1 {
                    let total: f64 = g.iter().zip(ov).map(|(gi, o)| gi * o).sum();
                    accumulate(grads, id, 1, |acc| acc[0] += total);
                } else if ov.len() == 1 {
                    let o = ov[0];
                    accumulate(grads, id, this.len(), |acc| {
                        acc.iter_mut().zip(g).for_each(|(a, &gi)| *a += gi * o)
                    });
                } else {
                    accumulate(grads, id, this.len(), |acc| {
                        for ((a, &gi), &o) in acc.iter_mut().zip(g).zip(ov) {
                            *a += gi * o;
                        }
                    });
                }
            }
        }
        Op::Scale(a, c) => {
            if wants(a) {
                accumulate(grads, a, g.len(), |acc| {
                    acc.iter_mut().zip(g).for_each(|(a, &gi)| *a += c * gi)
                });
            }
        }
        Op::MatMul(a, b) => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if wants(a) {
                // dA = G B^T
                accumulate(grads, a, m * k, |acc| gemm(m, n, k, g, (n, 1), bv.data(), (1, n), acc));
            }
            if wants(b) {
                // dB = A^T G
                accumulate(grads, b, k * n, |acc| gemm(k, m, n, av.data(), (1, k), g, (n, 1), acc));
            }
        }
        Op::AddBias(a, b) => {
            if wants(a) {
                accumulate(grads, a, g.len(), |acc| {
                    acc.iter_mut().zip(g).for_each(|(a, &gi)| *a += gi)
                });
            }
            if wants(b) {
                let n = nodes[b].value.len();
                accumulate(grads, b, n, |acc| {
                    for row in g.chunks_exact(n) {
                        acc.iter_mut().zip(row).for_each(|(a, &gi)| *a += gi);
                    }
                });
            }
        }
        Op::ConcatCols(a, b) => {
            let p = nodes[a].value.cols();
            let q = nodes[b].value.cols();
            let rows = out.rows();
            for (id, offset, width) in [(a, 0, p), (b, p, q)] {
                if !wants(id) {
                    continue;
                }
                accumulate(grads, id, rows * width, |acc| {
                    for r in 0..rows {
                        let src = &g[r * (p + q) + offset..r * (p + q) + offset + width];
                        acc[r * width..(r + 1) * width]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &gi)| *a += gi);
                    }
                });
            }
        }
        Op::Act(a, kind) => {
            if wants(a) {
                let x = nodes[a].value.data();
                accumulate(grads, a, x.len(), |acc| {
                    for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(x) {
                        *a += gi * kind.derivative(xi);
                    }
                });
            }
        }
        Op::Sum(a) => {
            if wants(a) {
                let n = nodes[a].value.len();
                accumulate(grads, a, n, |acc| acc.iter_mut().for_each(|v| *v += g[0]));
            }
        }
        Op::NormSq(a) => {
            if wants(a) {
                let x = nodes[a].value.data();
                accumulate(grads, a, x.len(), |acc| {
                    for (a, &xi) in acc.iter_mut().zip(x) {
                        *a += 2.0 * g[0] * xi;
                    }
                });
            }
        }
    }
}

/// `c += A B` where `A` is `m x k` and `B` is `k x n`, both given by row and
/// column strides; `c` is row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a` and `b` (checked
    // above for the dense layouts used in this module) and `c` is a distinct
    // row-major `m x n` buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn scalar_or_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.len(), b.len()) {
        (_, 1) if b.is_scalar() => {
            let y = b.data()[0];
            a.data().iter().map(|&x| f(x, y)).collect()
        }
        (1, _) if a.is_scalar() => {
            let x = a.data()[0];
            b.data().iter().map(|&y| f(x, y)).collect()
        }
        _ => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    }
}

// fallible, so these are methods rather than operator impls
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn node(&self) -> Ref<'t, Node> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn value(&self) -> Tensor {
        self.node().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().value.shape().to_vec()
    }

    /// Value of a scalar node.
    pub fn item(&self) -> f64 {
        self.node().value.item()
    }

    fn binary(self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let shape = scalar_or_same(name, a, b)?;
            Tensor::new(shape, zip_broadcast(a, b, f))?
        };
        Ok(self.tape.derived(value, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    /// Multiply by a constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.node().value.map(|v| c * v);
        self.tape.derived(value, Op::Scale(self.id, c), &[self.id])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out);
            Tensor::new(vec![m, n], out)?
        };
        Ok(self
            .tape
            .derived(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Add a length-`n` bias vector to every row of an `m x n` matrix.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            if a.shape().len() != 2 || b.shape() != [a.shape()[1]] {
                return Err(Error::ShapeMismatch {
                    op: "add_bias",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let mut out = a.data().to_vec();
            for row in out.chunks_exact_mut(b.len()) {
                row.iter_mut().zip(b.data()).for_each(|(o, &bi)| *o += bi);
            }
            Tensor::new(a.shape().to_vec(), out)?
        };
        Ok(self
            .tape
            .derived(value, Op::AddBias(self.id, bias.id), &[self.id, bias.id]))
    }

    /// Join two matrices with equal row counts side by side.
    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let rows = a.rows();
            let mut out = Vec::with_capacity(a.len() + b.len());
            for r in 0..rows {
                out.extend_from_slice(a.row(r));
                out.extend_from_slice(b.row(r));
            }
            Tensor::new(vec![rows, a.cols() + b.cols()], out)?
        };
        Ok(self
            .tape
            .derived(value, Op::ConcatCols(self.id, other.id), &[self.id, other.id]))
    }

    pub fn activation(self, kind: Activation) -> Var<'t> {
        let value = self.node().value.map(|v| kind.apply(v));
        self.tape.derived(value, Op::Act(self.id, kind), &[self.id])
    }

    pub fn sum(self) -> Var<'t> {
        let total: f64 = self.node().value.data().iter().sum();
        self.tape.derived(Tensor::scalar(total), Op::Sum(self.id), &[self.id])
    }

    pub fn norm_sq(self) -> Var<'t> {
        let total = self.node().value.norm_sq();
        self.tape
            .derived(Tensor::scalar(total), Op::NormSq(self.id), &[self.id])
    }

    /// Constant copy of this node; gradients do not flow through it.
    pub fn detach(self) -> Var<'t> {
        let value = self.value();
        self.tape.constant(value)
    }
}
