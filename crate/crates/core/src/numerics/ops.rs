//! Differentiable operations on [`Var`] handles.
//!
//! Shape errors are programming/config errors by the time a graph is
//! built, so ops panic with messages naming the offending shapes; module
//! boundaries that face user input return `Result` instead.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{accumulate, Var};
use crate::numerics::tensor::{
    broadcast_shapes, matmul2d, pad_shape, ravel_broadcast, reduce_to_shape, transpose2d, unravel,
};

// ── Elementwise binary ops with trailing-dim broadcasting ───────────

fn binary_elementwise<'t>(
    a: Var<'t>,
    b: Var<'t>,
    name: &'static str,
    fwd: fn(f64, f64) -> f64,
    // local partials wrt a and b at one element
    dfa: fn(f64, f64) -> f64,
    dfb: fn(f64, f64) -> f64,
) -> Var<'t> {
    debug_assert!(std::ptr::eq(a.tape, b.tape), "operands from different tapes");
    let tape = a.tape;
    let (out, out_shape, needs_grad) = {
        let vals = tape.values();
        let (va, vb) = (&vals[a.id], &vals[b.id]);
        let out_shape = broadcast_shapes(&va.shape, &vb.shape).unwrap_or_else(|| {
            panic!(
                "{name} shape mismatch: {:?} vs {:?}",
                va.shape, vb.shape
            )
        });
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        if va.shape == vb.shape {
            for ((o, &x), &y) in out.iter_mut().zip(&va.data).zip(&vb.data) {
                *o = fwd(x, y);
            }
        } else {
            let rank = out_shape.len();
            let pa = pad_shape(&va.shape, rank);
            let pb = pad_shape(&vb.shape, rank);
            let mut coords = vec![0usize; rank];
            for (flat, o) in out.iter_mut().enumerate() {
                unravel(flat, &out_shape, &mut coords);
                *o = fwd(
                    va.data[ravel_broadcast(&coords, &pa)],
                    vb.data[ravel_broadcast(&coords, &pb)],
                );
            }
        }
        (out, out_shape, va.needs_grad || vb.needs_grad)
    };
    let (aid, bid) = (a.id, b.id);
    let shape_for_back = out_shape.clone();
    tape.push_node(
        out,
        out_shape,
        needs_grad,
        name,
        Some(Box::new(move |g, values, grads| {
            let (va, vb) = (&values[aid], &values[bid]);
            let rank = shape_for_back.len();
            let pa = pad_shape(&va.shape, rank);
            let pb = pad_shape(&vb.shape, rank);
            let same = va.shape == vb.shape;
            let mut coords = vec![0usize; rank];
            if va.needs_grad {
                let mut da = vec![0.0; g.len()];
                for (flat, d) in da.iter_mut().enumerate() {
                    let (x, y) = if same {
                        (va.data[flat], vb.data[flat])
                    } else {
                        unravel(flat, &shape_for_back, &mut coords);
                        (
                            va.data[ravel_broadcast(&coords, &pa)],
                            vb.data[ravel_broadcast(&coords, &pb)],
                        )
                    };
                    *d = g[flat] * dfa(x, y);
                }
                let da = reduce_to_shape(&da, &shape_for_back, &va.shape);
                accumulate(values, grads, aid, &da);
            }
            if vb.needs_grad {
                let mut db = vec![0.0; g.len()];
                for (flat, d) in db.iter_mut().enumerate() {
                    let (x, y) = if same {
                        (va.data[flat], vb.data[flat])
                    } else {
                        unravel(flat, &shape_for_back, &mut coords);
                        (
                            va.data[ravel_broadcast(&coords, &pa)],
                            vb.data[ravel_broadcast(&coords, &pb)],
                        )
                    };
                    *d = g[flat] * dfb(x, y);
                }
                let db = reduce_to_shape(&db, &shape_for_back, &vb.shape);
                accumulate(values, grads, bid, &db);
            }
        })),
    )
}

// ── Unary op helpers ────────────────────────────────────────────────

/// Unary op whose local derivative is a function of the *input*.
fn unary_by_input<'t>(
    x: Var<'t>,
    name: &'static str,
    fwd: fn(f64) -> f64,
    dfdx: fn(f64) -> f64,
) -> Var<'t> {
    let tape = x.tape;
    let (out, shape, needs_grad) = {
        let vals = tape.values();
        let v = &vals[x.id];
        (
            v.data.iter().map(|&e| fwd(e)).collect::<Vec<_>>(),
            v.shape.clone(),
            v.needs_grad,
        )
    };
    let xid = x.id;
    tape.push_node(
        out,
        shape,
        needs_grad,
        name,
        Some(Box::new(move |g, values, grads| {
            let xv = &values[xid];
            if !xv.needs_grad {
                return;
            }
            let contrib: Vec<f64> = g
                .iter()
                .zip(&xv.data)
                .map(|(&gi, &xi)| gi * dfdx(xi))
                .collect();
            accumulate(values, grads, xid, &contrib);
        })),
    )
}

/// Unary op whose local derivative is a function of the *output*.
fn unary_by_output<'t>(
    x: Var<'t>,
    name: &'static str,
    fwd: fn(f64) -> f64,
    dfdy: fn(f64) -> f64,
) -> Var<'t> {
    let tape = x.tape;
    let (out, shape, needs_grad) = {
        let vals = tape.values();
        let v = &vals[x.id];
        (
            v.data.iter().map(|&e| fwd(e)).collect::<Vec<_>>(),
            v.shape.clone(),
            v.needs_grad,
        )
    };
    let xid = x.id;
    let out_id = tape.len();
    tape.push_node(
        out,
        shape,
        needs_grad,
        name,
        Some(Box::new(move |g, values, grads| {
            if !values[xid].needs_grad {
                return;
            }
            let yv = &values[out_id];
            let contrib: Vec<f64> = g
                .iter()
                .zip(&yv.data)
                .map(|(&gi, &yi)| gi * dfdy(yi))
                .collect();
            accumulate(values, grads, xid, &contrib);
        })),
    )
}

// Arithmetic methods deliberately mirror the math names; `Var` is a
// tape handle, not a numeric value, so the operator traits stay off.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    // ── Arithmetic ──────────────────────────────────────────────────

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        binary_elementwise(self, other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        binary_elementwise(self, other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        binary_elementwise(self, other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        binary_elementwise(
            self,
            other,
            "div",
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    pub fn neg(self) -> Var<'t> {
        unary_by_input(self, "neg", |x| -x, |_| -1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let tape = self.tape;
        let (out, shape, needs_grad) = {
            let vals = tape.values();
            let v = &vals[self.id];
            (
                v.data.iter().map(|&e| e * c).collect::<Vec<_>>(),
                v.shape.clone(),
                v.needs_grad,
            )
        };
        let xid = self.id;
        tape.push_node(
            out,
            shape,
            needs_grad,
            "scale",
            Some(Box::new(move |g, values, grads| {
                if !values[xid].needs_grad {
                    return;
                }
                let contrib: Vec<f64> = g.iter().map(|&gi| gi * c).collect();
                accumulate(values, grads, xid, &contrib);
            })),
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let tape = self.tape;
        let (out, shape, needs_grad) = {
            let vals = tape.values();
            let v = &vals[self.id];
            (
                v.data.iter().map(|&e| e + c).collect::<Vec<_>>(),
                v.shape.clone(),
                v.needs_grad,
            )
        };
        let xid = self.id;
        tape.push_node(
            out,
            shape,
            needs_grad,
            "add_scalar",
            Some(Box::new(move |g, values, grads| {
                accumulate(values, grads, xid, g);
            })),
        )
    }

    // ── Activations and pointwise transcendentals ───────────────────

    pub fn relu(self) -> Var<'t> {
        unary_by_input(
            self,
            "relu",
            |x| if x > 0.0 { x } else { 0.0 },
            |x| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        unary_by_output(self, "sigmoid", |x| 1.0 / (1.0 + (-x).exp()), |y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        unary_by_output(self, "tanh", f64::tanh, |y| 1.0 - y * y)
    }

    pub fn exp(self) -> Var<'t> {
        unary_by_output(self, "exp", f64::exp, |y| y)
    }

    pub fn ln(self) -> Var<'t> {
        unary_by_input(self, "ln", f64::ln, |x| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        unary_by_output(self, "sqrt", f64::sqrt, |y| 0.5 / y)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// Batched matrix product `[..., n, k] x [..., k, p] -> [..., n, p]`
    /// with broadcastable leading dimensions.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape));
        let tape = self.tape;
        let (out, out_shape, a_shape, b_shape, needs_grad) = {
            let vals = tape.values();
            let (va, vb) = (&vals[self.id], &vals[other.id]);
            assert!(
                va.shape.len() >= 2 && vb.shape.len() >= 2,
                "matmul requires rank >= 2 operands, got {:?} x {:?}",
                va.shape,
                vb.shape
            );
            let (ra, rb) = (va.shape.len(), vb.shape.len());
            let (n, k) = (va.shape[ra - 2], va.shape[ra - 1]);
            let (k2, p) = (vb.shape[rb - 2], vb.shape[rb - 1]);
            assert!(
                k == k2,
                "matmul shape mismatch: {:?} x {:?}",
                va.shape,
                vb.shape
            );
            let lead = broadcast_shapes(&va.shape[..ra - 2], &vb.shape[..rb - 2])
                .unwrap_or_else(|| {
                    panic!(
                        "matmul batch dims incompatible: {:?} x {:?}",
                        va.shape, vb.shape
                    )
                });
            let mut out_shape = lead.clone();
            out_shape.push(n);
            out_shape.push(p);
            let batch: usize = lead.iter().product();
            let pa = pad_shape(&va.shape[..ra - 2], lead.len());
            let pb = pad_shape(&vb.shape[..rb - 2], lead.len());
            let mut out = vec![0.0; batch * n * p];
            let mut coords = vec![0usize; lead.len()];
            for bi in 0..batch {
                unravel(bi, &lead, &mut coords);
                let ao = ravel_broadcast(&coords, &pa) * n * k;
                let bo = ravel_broadcast(&coords, &pb) * k * p;
                let chunk = matmul2d(&va.data[ao..ao + n * k], &vb.data[bo..bo + k * p], n, k, p);
                out[bi * n * p..(bi + 1) * n * p].copy_from_slice(&chunk);
            }
            (
                out,
                out_shape,
                va.shape.clone(),
                vb.shape.clone(),
                va.needs_grad || vb.needs_grad,
            )
        };
        let (aid, bid) = (self.id, other.id);
        tape.push_node(
            out,
            out_shape.clone(),
            needs_grad,
            "matmul",
            Some(Box::new(move |g, values, grads| {
                let (ra, rb) = (a_shape.len(), b_shape.len());
                let (n, k) = (a_shape[ra - 2], a_shape[ra - 1]);
                let p = b_shape[rb - 1];
                let lead = &out_shape[..out_shape.len() - 2];
                let batch: usize = lead.iter().product();
                let pa = pad_shape(&a_shape[..ra - 2], lead.len());
                let pb = pad_shape(&b_shape[..rb - 2], lead.len());
                let (va, vb) = (&values[aid], &values[bid]);
                let mut coords = vec![0usize; lead.len()];
                if va.needs_grad {
                    // dA = g @ B^T, summed over broadcast batch dims
                    let mut full_shape = lead.to_vec();
                    full_shape.push(n);
                    full_shape.push(k);
                    let mut da = vec![0.0; batch * n * k];
                    for bi in 0..batch {
                        unravel(bi, lead, &mut coords);
                        let bo = ravel_broadcast(&coords, &pb) * k * p;
                        let bt = transpose2d(&vb.data[bo..bo + k * p], k, p);
                        let chunk = matmul2d(&g[bi * n * p..(bi + 1) * n * p], &bt, n, p, k);
                        da[bi * n * k..(bi + 1) * n * k].copy_from_slice(&chunk);
                    }
                    let da = reduce_to_shape(&da, &full_shape, &a_shape);
                    accumulate(values, grads, aid, &da);
                }
                if vb.needs_grad {
                    // dB = A^T @ g, summed over broadcast batch dims
                    let mut full_shape = lead.to_vec();
                    full_shape.push(k);
                    full_shape.push(p);
                    let mut db = vec![0.0; batch * k * p];
                    for bi in 0..batch {
                        unravel(bi, lead, &mut coords);
                        let ao = ravel_broadcast(&coords, &pa) * n * k;
                        let at = transpose2d(&va.data[ao..ao + n * k], n, k);
                        let chunk = matmul2d(&at, &g[bi * n * p..(bi + 1) * n * p], k, n, p);
                        db[bi * k * p..(bi + 1) * k * p].copy_from_slice(&chunk);
                    }
                    let db = reduce_to_shape(&db, &full_shape, &b_shape);
                    accumulate(values, grads, bid, &db);
                }
            })),
        )
    }

    /// Swap the last two axes.
    pub fn transpose_last2(self) -> Var<'t> {
        let tape = self.tape;
        let (out, out_shape, needs_grad, in_shape) = {
            let vals = tape.values();
            let v = &vals[self.id];
            assert!(
                v.shape.len() >= 2,
                "transpose_last2 requires rank >= 2, got {:?}",
                v.shape
            );
            let r = v.shape.len();
            let (n, k) = (v.shape[r - 2], v.shape[r - 1]);
            let batch: usize = v.shape[..r - 2].iter().product();
            let mut out = vec![0.0; v.numel()];
            for bi in 0..batch {
                let src = &v.data[bi * n * k..(bi + 1) * n * k];
                out[bi * n * k..(bi + 1) * n * k].copy_from_slice(&transpose2d(src, n, k));
            }
            let mut out_shape = v.shape.clone();
            out_shape.swap(r - 2, r - 1);
            (out, out_shape, v.needs_grad, v.shape.clone())
        };
        let xid = self.id;
        tape.push_node(
            out,
            out_shape,
            needs_grad,
            "transpose",
            Some(Box::new(move |g, values, grads| {
                if !values[xid].needs_grad {
                    return;
                }
                let r = in_shape.len();
                let (n, k) = (in_shape[r - 2], in_shape[r - 1]);
                let batch: usize = in_shape[..r - 2].iter().product();
                let mut dx = vec![0.0; g.len()];
                for bi in 0..batch {
                    let src = &g[bi * n * k..(bi + 1) * n * k];
                    // g has blocks of [k, n]; transpose back to [n, k]
                    dx[bi * n * k..(bi + 1) * n * k].copy_from_slice(&transpose2d(src, k, n));
                }
                accumulate(values, grads, xid, &dx);
            })),
        )
    }

    pub fn reshape(self, new_shape: &[usize]) -> Var<'t> {
        let tape = self.tape;
        let (out, needs_grad) = {
            let vals = tape.values();
            let v = &vals[self.id];
            let numel: usize = new_shape.iter().product();
            assert!(
                numel == v.numel(),
                "reshape numel mismatch: {:?} -> {:?}",
                v.shape,
                new_shape
            );
            (v.data.clone(), v.needs_grad)
        };
        let xid = self.id;
        tape.push_node(
            out,
            new_shape.to_vec(),
            needs_grad,
            "reshape",
            Some(Box::new(move |g, values, grads| {
                accumulate(values, grads, xid, g);
            })),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let tape = self.tape;
        let (out, out_shape, needs_grad, in_shape) = {
            let vals = tape.values();
            let v = &vals[self.id];
            assert!(
                axis < v.shape.len() && start + len <= v.shape[axis],
                "narrow out of bounds: axis {axis} [{start}..{}] of {:?}",
                start + len,
                v.shape
            );
            let outer: usize = v.shape[..axis].iter().product();
            let inner: usize = v.shape[axis + 1..].iter().product();
            let alen = v.shape[axis];
            let mut out = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    let src = (o * alen + start + j) * inner;
                    let dst = (o * len + j) * inner;
                    out[dst..dst + inner].copy_from_slice(&v.data[src..src + inner]);
                }
            }
            let mut out_shape = v.shape.clone();
            out_shape[axis] = len;
            (out, out_shape, v.needs_grad, v.shape.clone())
        };
        let xid = self.id;
        tape.push_node(
            out,
            out_shape,
            needs_grad,
            "narrow",
            Some(Box::new(move |g, values, grads| {
                if !values[xid].needs_grad {
                    return;
                }
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let alen = in_shape[axis];
                let mut dx = vec![0.0; values[xid].numel()];
                for o in 0..outer {
                    for j in 0..len {
                        let dst = (o * alen + start + j) * inner;
                        let src = (o * len + j) * inner;
                        dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                accumulate(values, grads, xid, &dx);
            })),
        )
    }

    // ── Reductions ──────────────────────────────────────────────────

    /// Sum of all elements as a `[1]` scalar.
    pub fn sum_all(self) -> Var<'t> {
        let tape = self.tape;
        let (s, needs_grad, numel) = {
            let vals = tape.values();
            let v = &vals[self.id];
            (v.data.iter().sum::<f64>(), v.needs_grad, v.numel())
        };
        let xid = self.id;
        tape.push_node(
            vec![s],
            vec![1],
            needs_grad,
            "sum",
            Some(Box::new(move |g, values, grads| {
                accumulate(values, grads, xid, &vec![g[0]; numel]);
            })),
        )
    }

    /// Sum over the given axes. With `keepdim` the reduced axes stay as
    /// size 1; otherwise they are removed (a full reduction yields `[1]`).
    pub fn sum_axes(self, axes: &[usize], keepdim: bool) -> Var<'t> {
        let tape = self.tape;
        let (out, keep_shape, final_shape, needs_grad, in_shape) = {
            let vals = tape.values();
            let v = &vals[self.id];
            for &ax in axes {
                assert!(ax < v.shape.len(), "sum axis {ax} out of range {:?}", v.shape);
            }
            let mut keep_shape = v.shape.clone();
            for &ax in axes {
                keep_shape[ax] = 1;
            }
            let out_numel: usize = keep_shape.iter().product();
            let mut out = vec![0.0; out_numel];
            let mut coords = vec![0usize; v.shape.len()];
            for (flat, &x) in v.data.iter().enumerate() {
                unravel(flat, &v.shape, &mut coords);
                out[ravel_broadcast(&coords, &keep_shape)] += x;
            }
            let final_shape = if keepdim {
                keep_shape.clone()
            } else {
                let s: Vec<usize> = v
                    .shape
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !axes.contains(i))
                    .map(|(_, &d)| d)
                    .collect();
                if s.is_empty() {
                    vec![1]
                } else {
                    s
                }
            };
            (out, keep_shape, final_shape, v.needs_grad, v.shape.clone())
        };
        let xid = self.id;
        tape.push_node(
            out,
            final_shape,
            needs_grad,
            "sum_axes",
            Some(Box::new(move |g, values, grads| {
                if !values[xid].needs_grad {
                    return;
                }
                let mut dx = vec![0.0; values[xid].numel()];
                let mut coords = vec![0usize; in_shape.len()];
                for (flat, d) in dx.iter_mut().enumerate() {
                    unravel(flat, &in_shape, &mut coords);
                    *d = g[ravel_broadcast(&coords, &keep_shape)];
                }
                accumulate(values, grads, xid, &dx);
            })),
        )
    }

    /// Mean over the given axes.
    pub fn mean_axes(self, axes: &[usize], keepdim: bool) -> Var<'t> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&ax| shape[ax]).product();
        self.sum_axes(axes, keepdim).scale(1.0 / n as f64)
    }

    /// Mean of all elements as a `[1]` scalar.
    pub fn mean_all(self) -> Var<'t> {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Max over one axis; ties resolve to the first index.
    pub fn max_axis(self, axis: usize, keepdim: bool) -> Var<'t> {
        let tape = self.tape;
        let (out, argmax, final_shape, needs_grad, in_numel) = {
            let vals = tape.values();
            let v = &vals[self.id];
            assert!(axis < v.shape.len(), "max axis {axis} out of range {:?}", v.shape);
            let outer: usize = v.shape[..axis].iter().product();
            let alen = v.shape[axis];
            let inner: usize = v.shape[axis + 1..].iter().product();
            let mut out = vec![0.0; outer * inner];
            let mut argmax = vec![0usize; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for a in 0..alen {
                        let idx = (o * alen + a) * inner + i;
                        if v.data[idx] > best {
                            best = v.data[idx];
                            best_at = idx;
                        }
                    }
                    out[o * inner + i] = best;
                    argmax[o * inner + i] = best_at;
                }
            }
            let mut final_shape = v.shape.clone();
            if keepdim {
                final_shape[axis] = 1;
            } else {
                final_shape.remove(axis);
                if final_shape.is_empty() {
                    final_shape.push(1);
                }
            }
            (out, argmax, final_shape, v.needs_grad, v.numel())
        };
        let xid = self.id;
        tape.push_node(
            out,
            final_shape,
            needs_grad,
            "max_axis",
            Some(Box::new(move |g, values, grads| {
                if !values[xid].needs_grad {
                    return;
                }
                let mut dx = vec![0.0; in_numel];
                for (j, &src) in argmax.iter().enumerate() {
                    dx[src] += g[j];
                }
                accumulate(values, grads, xid, &dx);
            })),
        )
    }

    /// Strided max pooling along `axis`: output length
    /// `(len - kernel) / stride + 1`. Requires `len >= kernel`.
    pub fn max_pool_axis(self, axis: usize, kernel: usize, stride: usize) -> Var<'t> {
        assert!(kernel >= 1 && stride >= 1);
        let tape = self.tape;
        let (out, argmax, out_shape, needs_grad, in_numel) = {
            let vals = tape.values();
            let v = &vals[self.id];
            assert!(axis < v.shape.len());
            let alen = v.shape[axis];
            assert!(
                alen >= kernel,
                "max_pool_axis: axis length {alen} < kernel {kernel}"
            );
            let outer: usize = v.shape[..axis].iter().product();
            let inner: usize = v.shape[axis + 1..].iter().product();
            let olen = (alen - kernel) / stride + 1;
            let mut out = vec![0.0; outer * olen * inner];
            let mut argmax = vec![0usize; outer * olen * inner];
            for o in 0..outer {
                for w in 0..olen {
                    for i in 0..inner {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0;
                        for j in 0..kernel {
                            let idx = (o * alen + w * stride + j) * inner + i;
                            if v.data[idx] > best {
                                best = v.data[idx];
                                best_at = idx;
                            }
                        }
                        let dst = (o * olen + w) * inner + i;
                        out[dst] = best;
                        argmax[dst] = best_at;
                    }
                }
            }
            let mut out_shape = v.shape.clone();
            out_shape[axis] = olen;
            (out, argmax, out_shape, v.needs_grad, v.numel())
        };
        let xid = self.id;
        tape.push_node(
            out,
            out_shape,
            needs_grad,
            "max_pool",
            Some(Box::new(move |g, values, grads| {
                if !values[xid].needs_grad {
                    return;
                }
                let mut dx = vec![0.0; in_numel];
                for (j, &src) in argmax.iter().enumerate() {
                    dx[src] += g[j];
                }
                accumulate(values, grads, xid, &dx);
            })),
        )
    }

    // ── Softmax ─────────────────────────────────────────────────────

    /// Numerically stabilized softmax along `axis` (max subtraction).
    pub fn softmax(self, axis: usize) -> Var<'t> {
        let tape = self.tape;
        let (out, shape, needs_grad) = {
            let vals = tape.values();
            let v = &vals[self.id];
            assert!(axis < v.shape.len(), "softmax axis {axis} out of range {:?}", v.shape);
            let outer: usize = v.shape[..axis].iter().product();
            let alen = v.shape[axis];
            let inner: usize = v.shape[axis + 1..].iter().product();
            let mut out = vec![0.0; v.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * alen + a) * inner + i;
                    let mut m = f64::NEG_INFINITY;
                    for a in 0..alen {
                        m = m.max(v.data[at(a)]);
                    }
                    let mut z = 0.0;
                    for a in 0..alen {
                        let e = (v.data[at(a)] - m).exp();
                        out[at(a)] = e;
                        z += e;
                    }
                    for a in 0..alen {
                        out[at(a)] /= z;
                    }
                }
            }
            (out, v.shape.clone(), v.needs_grad)
        };
        let xid = self.id;
        let out_id = tape.len();
        let back_shape = shape.clone();
        tape.push_node(
            out,
            shape,
            needs_grad,
            "softmax",
            Some(Box::new(move |g, values, grads| {
                if !values[xid].needs_grad {
                    return;
                }
                let s = &values[out_id].data;
                let outer: usize = back_shape[..axis].iter().product();
                let alen = back_shape[axis];
                let inner: usize = back_shape[axis + 1..].iter().product();
                let mut dx = vec![0.0; s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * alen + a) * inner + i;
                        let mut dot = 0.0;
                        for a in 0..alen {
                            dot += g[at(a)] * s[at(a)];
                        }
                        for a in 0..alen {
                            dx[at(a)] = s[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                accumulate(values, grads, xid, &dx);
            })),
        )
    }

    // ── Stochastic / regularization ops ─────────────────────────────

    /// Inverted dropout: in training each element is zeroed independently
    /// with probability `p` and survivors are scaled by `1/(1-p)`. In
    /// eval mode (or with `p == 0`) this is the identity, bit-exactly.
    pub fn dropout(self, p: f64, training: bool, rng: &mut Rng) -> Var<'t> {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} not in [0, 1)");
        if !training || p == 0.0 {
            return self;
        }
        let tape = self.tape;
        let (out, mask, shape, needs_grad) = {
            let vals = tape.values();
            let v = &vals[self.id];
            let keep_scale = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..v.numel())
                .map(|_| if rng.next_f64() < p { 0.0 } else { keep_scale })
                .collect();
            let out: Vec<f64> = v.data.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            (out, mask, v.shape.clone(), v.needs_grad)
        };
        let xid = self.id;
        tape.push_node(
            out,
            shape,
            needs_grad,
            "dropout",
            Some(Box::new(move |g, values, grads| {
                if !values[xid].needs_grad {
                    return;
                }
                let contrib: Vec<f64> = g.iter().zip(&mask).map(|(&gi, &m)| gi * m).collect();
                accumulate(values, grads, xid, &contrib);
            })),
        )
    }

    /// 2D convolution, stride 1, no padding:
    /// `[n, c_in, h, w] * [c_out, c_in, kh, kw] (+ bias [c_out]) -> [n, c_out, h', w']`.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let tape = self.tape;
        let (out, out_shape, xs, ws, needs_grad) = {
            let vals = tape.values();
            let (vx, vw, vb) = (&vals[self.id], &vals[weight.id], &vals[bias.id]);
            assert!(
                vx.shape.len() == 4 && vw.shape.len() == 4,
                "conv2d expects 4D input and weight, got {:?} and {:?}",
                vx.shape,
                vw.shape
            );
            let (n, c_in, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
            let (c_out, wc_in, kh, kw) = (vw.shape[0], vw.shape[1], vw.shape[2], vw.shape[3]);
            assert!(
                c_in == wc_in,
                "conv2d channel mismatch: input {:?} vs weight {:?}",
                vx.shape,
                vw.shape
            );
            assert!(
                h >= kh && w >= kw,
                "conv2d kernel {:?} larger than input {:?}",
                vw.shape,
                vx.shape
            );
            assert!(vb.shape == [c_out], "conv2d bias must be [{c_out}], got {:?}", vb.shape);
            let (oh, ow) = (h - kh + 1, w - kw + 1);
            let mut out = vec![0.0; n * c_out * oh * ow];
            for ni in 0..n {
                for oc in 0..c_out {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = vb.data[oc];
                            for ic in 0..c_in {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let xi = ((ni * c_in + ic) * h + y + ky) * w + x + kx;
                                        let wi = ((oc * c_in + ic) * kh + ky) * kw + kx;
                                        acc += vx.data[xi] * vw.data[wi];
                                    }
                                }
                            }
                            out[((ni * c_out + oc) * oh + y) * ow + x] = acc;
                        }
                    }
                }
            }
            (
                out,
                vec![n, c_out, oh, ow],
                vx.shape.clone(),
                vw.shape.clone(),
                vx.needs_grad || vw.needs_grad || vb.needs_grad,
            )
        };
        let (xid, wid, bid) = (self.id, weight.id, bias.id);
        tape.push_node(
            out,
            out_shape,
            needs_grad,
            "conv2d",
            Some(Box::new(move |g, values, grads| {
                let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (c_out, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let (vx, vw, vb) = (&values[xid], &values[wid], &values[bid]);
                let mut dx = if vx.needs_grad { vec![0.0; vx.numel()] } else { Vec::new() };
                let mut dw = if vw.needs_grad { vec![0.0; vw.numel()] } else { Vec::new() };
                let mut db = if vb.needs_grad { vec![0.0; vb.numel()] } else { Vec::new() };
                for ni in 0..n {
                    for oc in 0..c_out {
                        for y in 0..oh {
                            for x in 0..ow {
                                let go = g[((ni * c_out + oc) * oh + y) * ow + x];
                                if !db.is_empty() {
                                    db[oc] += go;
                                }
                                for ic in 0..c_in {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let xi = ((ni * c_in + ic) * h + y + ky) * w + x + kx;
                                            let wi = ((oc * c_in + ic) * kh + ky) * kw + kx;
                                            if !dx.is_empty() {
                                                dx[xi] += go * vw.data[wi];
                                            }
                                            if !dw.is_empty() {
                                                dw[wi] += go * vx.data[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if !dx.is_empty() {
                    accumulate(values, grads, xid, &dx);
                }
                if !dw.is_empty() {
                    accumulate(values, grads, wid, &dw);
                }
                if !db.is_empty() {
                    accumulate(values, grads, bid, &db);
                }
            })),
        )
    }
}

// ── Free functions ──────────────────────────────────────────────────

/// Concatenate along `axis`; all other dimensions must match.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Var<'t> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let tape = parts[0].tape;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let (out, out_shape, needs_grad, part_shapes) = {
        let vals = tape.values();
        let first = &vals[ids[0]];
        let rank = first.shape.len();
        assert!(axis < rank, "concat axis {axis} out of range {:?}", first.shape);
        let mut axis_total = 0;
        let mut needs_grad = false;
        let mut part_shapes = Vec::with_capacity(ids.len());
        for &id in &ids {
            let v = &vals[id];
            assert!(
                v.shape.len() == rank
                    && v.shape
                        .iter()
                        .enumerate()
                        .all(|(i, &d)| i == axis || d == first.shape[i]),
                "concat shape mismatch: {:?} vs {:?} along axis {axis}",
                first.shape,
                v.shape
            );
            axis_total += v.shape[axis];
            needs_grad |= v.needs_grad;
            part_shapes.push(v.shape.clone());
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        for o in 0..outer {
            let mut dst_a = 0;
            for &id in &ids {
                let v = &vals[id];
                let alen = v.shape[axis];
                let src = o * alen * inner;
                let dst = (o * axis_total + dst_a) * inner;
                out[dst..dst + alen * inner].copy_from_slice(&v.data[src..src + alen * inner]);
                dst_a += alen;
            }
        }
        (out, out_shape, needs_grad, part_shapes)
    };
    let axis_total = out_shape[axis];
    tape.push_node(
        out,
        out_shape.clone(),
        needs_grad,
        "concat",
        Some(Box::new(move |g, values, grads| {
            let outer: usize = out_shape[..axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let mut off_a = 0;
            for (pi, &id) in ids.iter().enumerate() {
                let alen = part_shapes[pi][axis];
                if values[id].needs_grad {
                    let mut dp = vec![0.0; values[id].numel()];
                    for o in 0..outer {
                        let src = (o * axis_total + off_a) * inner;
                        let dst = o * alen * inner;
                        dp[dst..dst + alen * inner].copy_from_slice(&g[src..src + alen * inner]);
                    }
                    accumulate(values, grads, id, &dp);
                }
                off_a += alen;
            }
        })),
    )
}

/// Mean over the batch of `-log softmax(logits)[label]`.
///
/// The backward rule is the closed form `(softmax(logits) - onehot) / B`,
/// which the finite-difference suite cross-checks.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let tape = logits.tape;
    let (loss, needs_grad, classes) = {
        let vals = tape.values();
        let v = &vals[logits.id];
        if v.shape.len() != 2 {
            return Err(Error::Contract(format!(
                "cross_entropy expects [batch, classes] logits, got {:?}",
                v.shape
            )));
        }
        let (b, c) = (v.shape[0], v.shape[1]);
        if labels.len() != b {
            return Err(Error::Contract(format!(
                "cross_entropy got {} labels for batch size {b}",
                labels.len()
            )));
        }
        for &l in labels {
            if l >= c {
                return Err(Error::LabelOutOfRange { label: l, classes: c });
            }
        }
        let mut total = 0.0;
        for (bi, &label) in labels.iter().enumerate() {
            let row = &v.data[bi * c..(bi + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            total -= row[label] - lse;
        }
        (total / b as f64, v.needs_grad, c)
    };
    let xid = logits.id;
    let labels = labels.to_vec();
    Ok(tape.push_node(
        vec![loss],
        vec![1],
        needs_grad,
        "cross_entropy",
        Some(Box::new(move |g, values, grads| {
            let v = &values[xid];
            if !v.needs_grad {
                return;
            }
            let b = labels.len();
            let mut dx = vec![0.0; v.numel()];
            for (bi, &label) in labels.iter().enumerate() {
                let row = &v.data[bi * classes..(bi + 1) * classes];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for ci in 0..classes {
                    let p = exps[ci] / z;
                    let y = if ci == label { 1.0 } else { 0.0 };
                    dx[bi * classes + ci] = g[0] * (p - y) / b as f64;
                }
            }
            accumulate(values, grads, xid, &dx);
        })),
    ))
}

/// Strided max pool along `axis` followed by an adaptive max that
/// collapses the axis to a single entry. Inputs shorter than the kernel
/// skip the strided stage and reduce by the adaptive max alone.
pub fn temporal_max_pool(x: Var<'_>, axis: usize, kernel: usize, stride: usize) -> Var<'_> {
    let len = x.shape()[axis];
    let pooled = if len >= kernel {
        x.max_pool_axis(axis, kernel, stride)
    } else {
        x
    };
    pooled.max_axis(axis, false)
}
