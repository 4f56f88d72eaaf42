//! Primitive operations: shape-checked evaluation and adjoint rules.

use std::collections::HashMap;

use statrs::function::gamma::{digamma, ln_gamma};

use super::kernels;
use super::{Array, DiffError, NodeId};

/// A primitive tape operation. Edges are the embedded input indices.
pub enum Op {
    Input(String),
    Constant(Array),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MaxConst(NodeId, f64),
    MinConst(NodeId, f64),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    Exp(NodeId),
    Ln(NodeId),
    Logistic(NodeId),
    Softplus(NodeId),
    LnGamma(NodeId),
    LogSumExp(NodeId, usize),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    Slice {
        src: NodeId,
        axis: usize,
        start: usize,
        stop: usize,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Reshape(NodeId, Vec<usize>),
    Permute(NodeId, Vec<usize>),
    Conv1d {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
    },
}

impl Op {
    pub(super) fn is_input(&self) -> bool {
        matches!(self, Op::Input(_))
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn map(x: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

/// Evaluates one node given the values of all earlier nodes.
pub(super) fn eval(
    op: &Op,
    id: NodeId,
    shape: &[usize],
    vals: &[Array],
    bindings: &HashMap<String, Array>,
) -> Result<Array, DiffError> {
    let v = match op {
        Op::Input(name) => bindings[name].clone(),
        Op::Constant(c) => c.clone(),
        Op::Add(a, b) => kernels::binary(&vals[*a], &vals[*b], |x, y| x + y),
        Op::Sub(a, b) => kernels::binary(&vals[*a], &vals[*b], |x, y| x - y),
        Op::Mul(a, b) => kernels::binary(&vals[*a], &vals[*b], |x, y| x * y),
        Op::Div(a, b) => kernels::binary(&vals[*a], &vals[*b], |x, y| x / y),
        Op::MatMul(a, b) => kernels::matmul(&vals[*a], &vals[*b]),
        Op::MaxConst(x, c) => map(&vals[*x], |v| v.max(*c)),
        Op::MinConst(x, c) => map(&vals[*x], |v| v.min(*c)),
        Op::AddScalar(x, c) => map(&vals[*x], |v| v + c),
        Op::MulScalar(x, c) => map(&vals[*x], |v| v * c),
        Op::Exp(x) => map(&vals[*x], f64::exp),
        Op::Ln(x) => map(&vals[*x], f64::ln),
        Op::Logistic(x) => map(&vals[*x], logistic),
        Op::Softplus(x) => map(&vals[*x], softplus),
        Op::LnGamma(x) => map(&vals[*x], ln_gamma),
        Op::LogSumExp(x, axis) => kernels::log_sum_exp(&vals[*x], *axis),
        Op::Sum(x) => Array::scalar(vals[*x].data.iter().sum()),
        Op::Mean(x) => {
            Array::scalar(vals[*x].data.iter().sum::<f64>() / vals[*x].numel() as f64)
        }
        Op::SumAxis(x, axis) => kernels::sum_axis(&vals[*x], *axis),
        Op::Slice {
            src,
            axis,
            start,
            stop,
        } => kernels::slice(&vals[*src], *axis, *start, *stop),
        Op::Concat { parts, axis } => {
            let arrs: Vec<&Array> = parts.iter().map(|&p| &vals[p]).collect();
            kernels::concat(&arrs, *axis)
        }
        Op::Reshape(x, s) => Array {
            shape: s.clone(),
            data: vals[*x].data.clone(),
        },
        Op::Permute(x, perm) => kernels::permute(&vals[*x], perm),
        Op::Conv1d { x, w, bias } => kernels::conv1d(&vals[*x], &vals[*w], &vals[*bias]),
    };
    if v.shape() != shape {
        return Err(DiffError::ShapeMismatch {
            node: id,
            op: op_name(op),
            detail: format!("evaluated {:?}, expected {:?}", v.shape(), shape),
        });
    }
    Ok(v)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input(_) => "input",
        Op::Constant(_) => "constant",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::MatMul(..) => "matmul",
        Op::MaxConst(..) => "max_const",
        Op::MinConst(..) => "min_const",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::Exp(_) => "exp",
        Op::Ln(_) => "ln",
        Op::Logistic(_) => "logistic",
        Op::Softplus(_) => "softplus",
        Op::LnGamma(_) => "ln_gamma",
        Op::LogSumExp(..) => "log_sum_exp",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::SumAxis(..) => "sum_axis",
        Op::Slice { .. } => "slice",
        Op::Concat { .. } => "concat",
        Op::Reshape(..) => "reshape",
        Op::Permute(..) => "permute",
        Op::Conv1d { .. } => "conv1d",
    }
}

/// Propagates the adjoint `g` of one node to its inputs via `sink(input, contribution)`.
pub(super) fn accumulate(op: &Op, g: &Array, vals: &[Array], mut sink: impl FnMut(NodeId, Array)) {
    match op {
        Op::Input(_) | Op::Constant(_) => {}
        Op::Add(a, b) => {
            sink(*a, kernels::reduce_to_shape(g, &vals[*a].shape));
            sink(*b, kernels::reduce_to_shape(g, &vals[*b].shape));
        }
        Op::Sub(a, b) => {
            sink(*a, kernels::reduce_to_shape(g, &vals[*a].shape));
            let mut gb = kernels::reduce_to_shape(g, &vals[*b].shape);
            gb.data.iter_mut().for_each(|v| *v = -*v);
            sink(*b, gb);
        }
        Op::Mul(a, b) => {
            let ga = kernels::binary(g, &vals[*b], |x, y| x * y);
            let gb = kernels::binary(g, &vals[*a], |x, y| x * y);
            sink(*a, kernels::reduce_to_shape(&ga, &vals[*a].shape));
            sink(*b, kernels::reduce_to_shape(&gb, &vals[*b].shape));
        }
        Op::Div(a, b) => {
            let ga = kernels::binary(g, &vals[*b], |x, y| x / y);
            sink(*a, kernels::reduce_to_shape(&ga, &vals[*a].shape));
            let num = kernels::binary(g, &vals[*a], |x, y| x * y);
            let gb = kernels::binary(&num, &vals[*b], |x, y| -x / (y * y));
            sink(*b, kernels::reduce_to_shape(&gb, &vals[*b].shape));
        }
        Op::MatMul(a, b) => {
            sink(*a, kernels::matmul_nt(g, &vals[*b]));
            sink(*b, kernels::matmul_tn(&vals[*a], g));
        }
        Op::MaxConst(x, c) => {
            sink(*x, kernels::gated(g, &vals[*x], |v| v > *c));
        }
        Op::MinConst(x, c) => {
            sink(*x, kernels::gated(g, &vals[*x], |v| v < *c));
        }
        Op::AddScalar(x, _) => sink(*x, g.clone()),
        Op::MulScalar(x, c) => sink(*x, map(g, |v| v * c)),
        Op::Exp(x) => sink(*x, kernels::binary(g, &vals[*x], |gv, xv| gv * xv.exp())),
        Op::Ln(x) => sink(*x, kernels::binary(g, &vals[*x], |gv, xv| gv / xv)),
        Op::Logistic(x) => {
            sink(
                *x,
                kernels::binary(g, &vals[*x], |gv, xv| {
                    let s = logistic(xv);
                    gv * s * (1.0 - s)
                }),
            );
        }
        Op::Softplus(x) => {
            sink(*x, kernels::binary(g, &vals[*x], |gv, xv| gv * logistic(xv)));
        }
        Op::LnGamma(x) => {
            sink(*x, kernels::binary(g, &vals[*x], |gv, xv| gv * digamma(xv)));
        }
        Op::LogSumExp(x, axis) => {
            sink(*x, kernels::log_sum_exp_backward(g, &vals[*x], *axis));
        }
        Op::Sum(x) => sink(*x, Array::full(&vals[*x].shape, g.data[0])),
        Op::Mean(x) => {
            let n = vals[*x].numel() as f64;
            sink(*x, Array::full(&vals[*x].shape, g.data[0] / n));
        }
        Op::SumAxis(x, axis) => {
            sink(*x, kernels::broadcast_axis(g, &vals[*x].shape, *axis));
        }
        Op::Slice {
            src,
            axis,
            start,
            stop,
        } => {
            sink(*src, kernels::slice_backward(g, &vals[*src].shape, *axis, *start, *stop));
        }
        Op::Concat { parts, axis } => {
            let mut offset = 0;
            for &p in parts {
                let extent = vals[p].shape[*axis];
                sink(p, kernels::slice(g, *axis, offset, offset + extent));
                offset += extent;
            }
        }
        Op::Reshape(x, _) => {
            sink(
                *x,
                Array {
                    shape: vals[*x].shape.clone(),
                    data: g.data.clone(),
                },
            );
        }
        Op::Permute(x, perm) => {
            let mut inv = vec![0usize; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            sink(*x, kernels::permute(g, &inv));
        }
        Op::Conv1d { x, w, bias } => {
            let (gx, gw, gb) = kernels::conv1d_backward(g, &vals[*x], &vals[*w]);
            sink(*x, gx);
            sink(*w, gw);
            sink(*bias, gb);
        }
    }
}
