//! Minimal reverse-mode gradient engine over dense `f64` arrays.
//!
//! A [`Tape`] is a static computation graph: nodes are primitive operations
//! recorded in insertion order (which is also a valid topological order).
//! [`Tape::forward`] binds named inputs and evaluates every node, retaining
//! all intermediate values; [`Tape::backward`] then accumulates adjoints in
//! reverse order and returns the gradient of `seed · output` with respect to
//! every named input.
//!
//! Design notes:
//! - `max(x, c)` uses the subgradient 0 at the kink `x == c`, so inactive
//!   basis units contribute nothing.
//! - 1-d convolution zero-pads so the output length equals the input length
//!   (`pad_left = (k - 1) / 2`).
//! - A tape is single-use-single-thread during forward/backward; distinct
//!   tapes may run on distinct threads.

mod kernels;
mod op;

use std::collections::HashMap;

pub use op::Op;

/// Node index into a [`Tape`].
pub type NodeId = usize;

/// Dense row-major array of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffError> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || n != data.len() {
            return Err(DiffError::BadArray {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Rank-1 array from a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 array from rows×cols row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DiffError> {
        Self::new(vec![rows, cols], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a `[1]`-shaped array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, DiffError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(DiffError::BadArray {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Errors raised by tape construction and execution.
#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("array shape {shape:?} does not match data length {len}")]
    BadArray { shape: Vec<usize>, len: usize },
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    ShapeMismatch {
        node: NodeId,
        op: &'static str,
        detail: String,
    },
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("input `{name}` bound with shape {got:?}, declared {want:?}")]
    InputShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("tape has no output node")]
    NoOutput,
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("seed shape {got:?} does not match output shape {want:?}")]
    SeedShape { got: Vec<usize>, want: Vec<usize> },
    #[error("grad_check requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("grad_check requires eps > 0, got {0}")]
    BadEps(f64),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Ordered record of primitive operations with retained values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<(String, NodeId)>,
    output: Option<NodeId>,
    values: Vec<Array>,
    forward_done: bool,
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

    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Value of a node after `forward` (e.g. to read individual loss terms).
    pub fn value(&self, id: NodeId) -> Option<&Array> {
        if self.forward_done {
            self.values.get(id)
        } else {
            None
        }
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.forward_done = false;
        self.nodes.len() - 1
    }

    /// Declares a named input placeholder.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let id = self.push(Op::Input(name.to_string()), shape.to_vec());
        self.inputs.push((name.to_string(), id));
        id
    }

    /// Embeds a fixed array (data, masks, precomputed constants).
    pub fn constant(&mut self, value: Array) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        make: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> Result<NodeId, DiffError> {
        let shape = kernels::broadcast_shape(&self.nodes[a].shape, &self.nodes[b].shape).ok_or(
            DiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: name,
                detail: format!(
                    "cannot broadcast {:?} with {:?}",
                    self.nodes[a].shape, self.nodes[b].shape
                ),
            },
        )?;
        Ok(self.push(make(a, b), shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary("add", a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary("sub", a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary("mul", a, b, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary("div", a, b, Op::Div)
    }

    /// Matrix product `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "matmul",
                detail: format!("{sa:?} @ {sb:?}"),
            });
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    /// Elementwise `max(x, c)`; subgradient 0 at `x == c`.
    pub fn max_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(Op::MaxConst(x, c), shape)
    }

    /// Elementwise `min(x, c)`; subgradient 0 at `x == c`.
    pub fn min_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(Op::MinConst(x, c), shape)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(Op::AddScalar(x, c), shape)
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(Op::MulScalar(x, c), shape)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Exp(x), shape)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Ln(x), shape)
    }

    pub fn logistic(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Logistic(x), shape)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Softplus(x), shape)
    }

    pub fn ln_gamma(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(Op::LnGamma(x), shape)
    }

    /// Softmax-style normalizer: `log Σ exp` over `axis`, keeping the axis
    /// with extent 1.
    pub fn log_sum_exp(&mut self, x: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        let s = &self.nodes[x].shape;
        if axis >= s.len() {
            return Err(DiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "log_sum_exp",
                detail: format!("axis {axis} out of range for {s:?}"),
            });
        }
        let mut shape = s.clone();
        shape[axis] = 1;
        Ok(self.push(Op::LogSumExp(x, axis), shape))
    }

    /// Sum of all entries, producing a `[1]` scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), vec![1])
    }

    /// Mean of all entries, producing a `[1]` scalar.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x), vec![1])
    }

    /// Sum over one axis, dropping it.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        let s = &self.nodes[x].shape;
        if axis >= s.len() || s.len() == 1 {
            return Err(DiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "sum_axis",
                detail: format!("axis {axis} out of range for {s:?}"),
            });
        }
        let mut shape = s.clone();
        shape.remove(axis);
        Ok(self.push(Op::SumAxis(x, axis), shape))
    }

    /// Contiguous slice `[start, stop)` along `axis`.
    pub fn slice(
        &mut self,
        x: NodeId,
        axis: usize,
        start: usize,
        stop: usize,
    ) -> Result<NodeId, DiffError> {
        let s = &self.nodes[x].shape;
        if axis >= s.len() || start >= stop || stop > s[axis] {
            return Err(DiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "slice",
                detail: format!("range {start}..{stop} on axis {axis} of {s:?}"),
            });
        }
        let mut shape = s.clone();
        shape[axis] = stop - start;
        Ok(self.push(
            Op::Slice {
                src: x,
                axis,
                start,
                stop,
            },
            shape,
        ))
    }

    /// Concatenation along `axis`.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "concat",
                detail: "no parts".into(),
            });
        }
        let first = self.nodes[parts[0]].shape.clone();
        if axis >= first.len() {
            return Err(DiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "concat",
                detail: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = &self.nodes[p].shape;
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    node: self.nodes.len(),
                    op: "concat",
                    detail: format!("{s:?} incompatible with {first:?} along axis {axis}"),
                });
            }
            total += s[axis];
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x].shape.iter().product::<usize>() {
            return Err(DiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.nodes[x].shape, shape),
            });
        }
        Ok(self.push(Op::Reshape(x, shape.to_vec()), shape.to_vec()))
    }

    /// Axis permutation, e.g. `[2,0,1]`.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId, DiffError> {
        let s = &self.nodes[x].shape;
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len()
            && perm.iter().all(|&p| {
                if p < s.len() && !seen[p] {
                    seen[p] = true;
                    true
                } else {
                    false
                }
            });
        if !valid {
            return Err(DiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "permute",
                detail: format!("perm {perm:?} invalid for {s:?}"),
            });
        }
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push(Op::Permute(x, perm.to_vec()), shape))
    }

    /// 1-d convolution over the trailing (time) axis with zero padding sized
    /// to preserve sequence length. `x: [batch, c_in, t]`, `w: [c_out, c_in, k]`,
    /// `bias: [c_out]` → `[batch, c_out, t]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId, DiffError> {
        let (sx, sw, sb) = (
            &self.nodes[x].shape,
            &self.nodes[w].shape,
            &self.nodes[bias].shape,
        );
        let ok = sx.len() == 3
            && sw.len() == 3
            && sb.len() == 1
            && sx[1] == sw[1]
            && sb[0] == sw[0]
            && sw[2] >= 1;
        if !ok {
            return Err(DiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "conv1d",
                detail: format!("x {sx:?}, w {sw:?}, bias {sb:?}"),
            });
        }
        let shape = vec![sx[0], sw[0], sx[2]];
        Ok(self.push(Op::Conv1d { x, w, bias }, shape))
    }

    /// Evaluates every node in insertion order and returns the output value.
    /// All intermediate values are retained for the backward pass.
    pub fn forward(&mut self, bindings: &HashMap<String, Array>) -> Result<Array, DiffError> {
        let out = self.output.ok_or(DiffError::NoOutput)?;
        for (name, id) in &self.inputs {
            let v = bindings
                .get(name)
                .ok_or_else(|| DiffError::UnboundInput(name.clone()))?;
            if v.shape() != self.nodes[*id].shape {
                return Err(DiffError::InputShape {
                    name: name.clone(),
                    got: v.shape().to_vec(),
                    want: self.nodes[*id].shape.clone(),
                });
            }
        }
        self.values.clear();
        self.values.reserve(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = op::eval(&node.op, id, &node.shape, &self.values, bindings)?;
            debug_assert_eq!(v.shape(), &node.shape[..]);
            self.values.push(v);
        }
        self.forward_done = true;
        Ok(self.values[out].clone())
    }

    /// Reverse pass: gradients of `seed · output` with respect to every
    /// named input, accumulated by reverse traversal.
    pub fn backward(&mut self, seed: &Array) -> Result<HashMap<String, Array>, DiffError> {
        let out = self.output.ok_or(DiffError::NoOutput)?;
        if !self.forward_done {
            return Err(DiffError::BackwardBeforeForward);
        }
        if seed.shape() != self.nodes[out].shape {
            return Err(DiffError::SeedShape {
                got: seed.shape().to_vec(),
                want: self.nodes[out].shape.clone(),
            });
        }
        let mut adj: Vec<Option<Array>> = vec![None; self.nodes.len()];
        adj[out] = Some(seed.clone());
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = adj[id].take() else { continue };
            op::accumulate(&self.nodes[id].op, &g, &self.values, |src, contrib| {
                match &mut adj[src] {
                    Some(a) => {
                        for (x, y) in a.data.iter_mut().zip(contrib.data.iter()) {
                            *x += y;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            });
            if self.nodes[id].op.is_input() {
                adj[id] = Some(g);
            }
        }
        let mut grads = HashMap::with_capacity(self.inputs.len());
        for (name, id) in &self.inputs {
            let g = adj[*id]
                .take()
                .unwrap_or_else(|| Array::zeros(&self.nodes[*id].shape));
            grads.insert(name.clone(), g);
        }
        Ok(grads)
    }

    /// Compares backward gradients against central finite differences with
    /// step `eps` and returns the worst relative error over all input
    /// entries. The relative error uses a unit floor in the denominator,
    /// `|ad − fd| / max(|ad|, |fd|, 1)`, so near-zero gradients are compared
    /// absolutely.
    pub fn grad_check(
        &mut self,
        bindings: &HashMap<String, Array>,
        eps: f64,
    ) -> Result<f64, DiffError> {
        if eps <= 0.0 {
            return Err(DiffError::BadEps(eps));
        }
        let out = self.output.ok_or(DiffError::NoOutput)?;
        if self.nodes[out].shape != [1] {
            return Err(DiffError::NonScalarOutput(self.nodes[out].shape.clone()));
        }
        self.forward(bindings)?;
        let grads = self.backward(&Array::scalar(1.0))?;
        let mut worst = 0.0f64;
        let mut perturbed = bindings.clone();
        for (name, _) in self.inputs.clone() {
            let base = bindings[&name].clone();
            for i in 0..base.numel() {
                let x0 = base.data[i];
                perturbed.get_mut(&name).unwrap().data[i] = x0 + eps;
                let up = self.forward(&perturbed)?.item();
                perturbed.get_mut(&name).unwrap().data[i] = x0 - eps;
                let dn = self.forward(&perturbed)?.item();
                perturbed.get_mut(&name).unwrap().data[i] = x0;
                let fd = (up - dn) / (2.0 * eps);
                let ad = grads[&name].data[i];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
                worst = worst.max(rel);
            }
        }
        // restore retained values for the unperturbed point
        self.forward(bindings)?;
        Ok(worst)
    }
}

#[cfg(test)]
mod tests;
