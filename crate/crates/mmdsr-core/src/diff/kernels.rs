//! Dense numeric kernels shared by the forward and backward passes.

use super::Array;

/// NumPy-style broadcast result shape, or `None` if incompatible. Shapes are
/// right-aligned; each dimension pair must match or contain a 1.
pub(super) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Row-major strides, with stride 0 on broadcast (extent-1) dimensions so the
/// same walker covers real and virtual axes.
fn padded_strides(shape: &[usize], out_rank: usize, out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; out_rank];
    let offset = out_rank - shape.len();
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    for i in 0..offset {
        strides[i] = 0;
    }
    debug_assert_eq!(out_shape.len(), out_rank);
    strides
}

/// Elementwise binary op with broadcasting.
pub(super) fn binary(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64 + Copy) -> Array {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Array {
            shape: a.shape.clone(),
            data,
        };
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape).expect("checked at build time");
    let rank = out_shape.len();
    let sa = padded_strides(&a.shape, rank, &out_shape);
    let sb = padded_strides(&b.shape, rank, &out_shape);
    let mut out = Array::zeros(&out_shape);
    fn walk(
        dim: usize,
        rank: usize,
        shape: &[usize],
        a: &[f64],
        b: &[f64],
        sa: &[usize],
        sb: &[usize],
        oa: usize,
        ob: usize,
        out: &mut [f64],
        oo: &mut usize,
        f: impl Fn(f64, f64) -> f64 + Copy,
    ) {
        if dim == rank - 1 {
            let n = shape[dim];
            let (da, db) = (sa[dim], sb[dim]);
            for i in 0..n {
                out[*oo + i] = f(a[oa + i * da], b[ob + i * db]);
            }
            *oo += n;
        } else {
            for i in 0..shape[dim] {
                walk(
                    dim + 1,
                    rank,
                    shape,
                    a,
                    b,
                    sa,
                    sb,
                    oa + i * sa[dim],
                    ob + i * sb[dim],
                    out,
                    oo,
                    f,
                );
            }
        }
    }
    let mut oo = 0usize;
    walk(
        0, rank, &out_shape, &a.data, &b.data, &sa, &sb, 0, 0, &mut out.data, &mut oo, f,
    );
    out
}

/// Sums `g` over the axes that were broadcast relative to `target`, producing
/// an array of the target shape (adjoint of broadcasting).
pub(super) fn reduce_to_shape(g: &Array, target: &[usize]) -> Array {
    if g.shape == target {
        return g.clone();
    }
    let rank = g.shape.len();
    let offset = rank - target.len();
    let mut out = Array::zeros(target);
    let st = padded_strides(target, rank, &g.shape);
    // walk g linearly, accumulate into the (possibly stride-0) target index
    let gshape = &g.shape;
    let mut idx = vec![0usize; rank];
    let mut t_off = 0usize;
    for &v in &g.data {
        out.data[t_off] += v;
        // increment multi-index
        for d in (0..rank).rev() {
            idx[d] += 1;
            t_off += st[d];
            if idx[d] < gshape[d] {
                break;
            }
            t_off -= idx[d] * st[d];
            idx[d] = 0;
        }
    }
    let _ = offset;
    out
}

/// Adjoint gate: passes `g` where `pred(x)` holds, else 0.
pub(super) fn gated(g: &Array, x: &Array, pred: impl Fn(f64) -> bool) -> Array {
    let data = g
        .data
        .iter()
        .zip(&x.data)
        .map(|(&gv, &xv)| if pred(xv) { gv } else { 0.0 })
        .collect();
    Array {
        shape: g.shape.clone(),
        data,
    }
}

/// `[m,k] @ [k,n]`.
pub(super) fn matmul(a: &Array, b: &Array) -> Array {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = Array::zeros(&[m, n]);
    for i in 0..m {
        let row = &mut out.data[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a.data[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[l * n..(l + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g @ bᵀ` without materializing the transpose: `[m,n] x [k,n] -> [m,k]`.
pub(super) fn matmul_nt(g: &Array, b: &Array) -> Array {
    let (m, n) = (g.shape[0], g.shape[1]);
    let k = b.shape[0];
    let mut out = Array::zeros(&[m, k]);
    for i in 0..m {
        let grow = &g.data[i * n..(i + 1) * n];
        for l in 0..k {
            let brow = &b.data[l * n..(l + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out.data[i * k + l] = acc;
        }
    }
    out
}

/// `aᵀ @ g`: `[m,k] x [m,n] -> [k,n]`.
pub(super) fn matmul_tn(a: &Array, g: &Array) -> Array {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = g.shape[1];
    let mut out = Array::zeros(&[k, n]);
    for i in 0..m {
        let grow = &g.data[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a.data[i * k + l];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[l * n..(l + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// Decomposes a shape around `axis` into (outer, axis extent, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `log Σ exp` over `axis` (kept with extent 1), computed stably.
pub(super) fn log_sum_exp(x: &Array, axis: usize) -> Array {
    let (outer, m, inner) = around(&x.shape, axis);
    let mut shape = x.shape.clone();
    shape[axis] = 1;
    let mut out = Array::zeros(&shape);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * m * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..m {
                mx = mx.max(x.data[base + j * inner]);
            }
            let mut s = 0.0;
            for j in 0..m {
                s += (x.data[base + j * inner] - mx).exp();
            }
            out.data[o * inner + i] = mx + s.ln();
        }
    }
    out
}

/// Adjoint of `log_sum_exp`: softmax-weighted broadcast of `g`.
pub(super) fn log_sum_exp_backward(g: &Array, x: &Array, axis: usize) -> Array {
    let lse = log_sum_exp(x, axis);
    let (outer, m, inner) = around(&x.shape, axis);
    let mut out = Array::zeros(&x.shape);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * m * inner + i;
            let l = lse.data[o * inner + i];
            let gv = g.data[o * inner + i];
            for j in 0..m {
                out.data[base + j * inner] = gv * (x.data[base + j * inner] - l).exp();
            }
        }
    }
    out
}

/// Sum over `axis`, dropping it.
pub(super) fn sum_axis(x: &Array, axis: usize) -> Array {
    let (outer, m, inner) = around(&x.shape, axis);
    let mut shape = x.shape.clone();
    shape.remove(axis);
    let mut out = Array::zeros(&shape);
    for o in 0..outer {
        for j in 0..m {
            let src = &x.data[(o * m + j) * inner..(o * m + j + 1) * inner];
            let dst = &mut out.data[o * inner..(o + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// Adjoint of `sum_axis`: replicates `g` along the dropped axis.
pub(super) fn broadcast_axis(g: &Array, target: &[usize], axis: usize) -> Array {
    let (outer, m, inner) = around(target, axis);
    let mut out = Array::zeros(target);
    for o in 0..outer {
        let src = &g.data[o * inner..(o + 1) * inner];
        for j in 0..m {
            let dst = &mut out.data[(o * m + j) * inner..(o * m + j + 1) * inner];
            dst.copy_from_slice(src);
        }
    }
    out
}

pub(super) fn slice(x: &Array, axis: usize, start: usize, stop: usize) -> Array {
    let (outer, m, inner) = around(&x.shape, axis);
    let w = stop - start;
    let mut shape = x.shape.clone();
    shape[axis] = w;
    let mut out = Array::zeros(&shape);
    for o in 0..outer {
        let src = &x.data[(o * m + start) * inner..(o * m + stop) * inner];
        let dst = &mut out.data[o * w * inner..(o + 1) * w * inner];
        dst.copy_from_slice(src);
    }
    out
}

pub(super) fn slice_backward(
    g: &Array,
    src_shape: &[usize],
    axis: usize,
    start: usize,
    stop: usize,
) -> Array {
    let (outer, m, inner) = around(src_shape, axis);
    let w = stop - start;
    let mut out = Array::zeros(src_shape);
    for o in 0..outer {
        let src = &g.data[o * w * inner..(o + 1) * w * inner];
        let dst = &mut out.data[(o * m + start) * inner..(o * m + stop) * inner];
        dst.copy_from_slice(src);
    }
    out
}

pub(super) fn concat(parts: &[&Array], axis: usize) -> Array {
    let mut shape = parts[0].shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    let (outer, m, inner) = around(&shape, axis);
    let mut out = Array::zeros(&shape);
    for o in 0..outer {
        let mut off = 0usize;
        for p in parts {
            let pm = p.shape[axis];
            let src = &p.data[o * pm * inner..(o + 1) * pm * inner];
            let dst = &mut out.data[(o * m + off) * inner..(o * m + off + pm) * inner];
            dst.copy_from_slice(src);
            off += pm;
        }
    }
    out
}

pub(super) fn permute(x: &Array, perm: &[usize]) -> Array {
    let rank = x.shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        src_strides[i] = src_strides[i + 1] * x.shape[i + 1];
    }
    let walk_strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = Array::zeros(&out_shape);
    let mut idx = vec![0usize; rank];
    let mut s_off = 0usize;
    for o in out.data.iter_mut() {
        *o = x.data[s_off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            s_off += walk_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            s_off -= idx[d] * walk_strides[d];
            idx[d] = 0;
        }
    }
    out
}

/// Same-length 1-d convolution over the trailing axis.
/// `x: [b, ci, t]`, `w: [co, ci, k]`, `bias: [co]` → `[b, co, t]`.
pub(super) fn conv1d(x: &Array, w: &Array, bias: &Array) -> Array {
    let (bn, ci, t) = (x.shape[0], x.shape[1], x.shape[2]);
    let (co, k) = (w.shape[0], w.shape[2]);
    let pad = (k - 1) / 2;
    let mut out = Array::zeros(&[bn, co, t]);
    for b in 0..bn {
        for o in 0..co {
            let orow = &mut out.data[(b * co + o) * t..(b * co + o + 1) * t];
            orow.fill(bias.data[o]);
            for c in 0..ci {
                let xrow = &x.data[(b * ci + c) * t..(b * ci + c + 1) * t];
                for j in 0..k {
                    let wv = w.data[(o * ci + c) * k + j];
                    if wv == 0.0 {
                        continue;
                    }
                    // out[t'] += wv * x[t' + j - pad] over the valid range
                    let (t_lo, s_lo) = if j >= pad { (0, j - pad) } else { (pad - j, 0) };
                    if s_lo >= t || t_lo >= t {
                        continue;
                    }
                    let span = (t - s_lo).min(t - t_lo);
                    let dst = &mut orow[t_lo..t_lo + span];
                    let src = &xrow[s_lo..s_lo + span];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
    out
}

/// Adjoints of `conv1d` for input, weights, and bias.
pub(super) fn conv1d_backward(g: &Array, x: &Array, w: &Array) -> (Array, Array, Array) {
    let (bn, ci, t) = (x.shape[0], x.shape[1], x.shape[2]);
    let (co, k) = (w.shape[0], w.shape[2]);
    let pad = (k - 1) / 2;
    let mut gx = Array::zeros(&x.shape);
    let mut gw = Array::zeros(&w.shape);
    let mut gb = Array::zeros(&[co]);
    for b in 0..bn {
        for o in 0..co {
            let grow = &g.data[(b * co + o) * t..(b * co + o + 1) * t];
            gb.data[o] += grow.iter().sum::<f64>();
            for c in 0..ci {
                let xrow = &x.data[(b * ci + c) * t..(b * ci + c + 1) * t];
                let gxrow = &mut gx.data[(b * ci + c) * t..(b * ci + c + 1) * t];
                for j in 0..k {
                    let (t_lo, s_lo) = if j >= pad { (0, j - pad) } else { (pad - j, 0) };
                    if s_lo >= t || t_lo >= t {
                        continue;
                    }
                    let span = (t - s_lo).min(t - t_lo);
                    let wv = w.data[(o * ci + c) * k + j];
                    let gsrc = &grow[t_lo..t_lo + span];
                    if wv != 0.0 {
                        let dst = &mut gxrow[s_lo..s_lo + span];
                        for (d, &gv) in dst.iter_mut().zip(gsrc) {
                            *d += wv * gv;
                        }
                    }
                    let xsrc = &xrow[s_lo..s_lo + span];
                    let mut acc = 0.0;
                    for (&gv, &xv) in gsrc.iter().zip(xsrc) {
                        acc += gv * xv;
                    }
                    gw.data[(o * ci + c) * k + j] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}
