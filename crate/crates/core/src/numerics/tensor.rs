//! Dense row-major f64 tensor with optional gradient storage, plus the
//! shape/broadcast utilities shared by the tape operations.
//!
//! Broadcasting aligns trailing dimensions: shapes are compared from the
//! right, and a dimension of 1 stretches to match the other operand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Invariant: `product(shape) == data.len()` and every dimension > 0.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} implies {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(lo, hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn randn(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal(mean, std)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `contribution` into the stored gradient, allocating it on
    /// first use. Gradients accumulate until [`Tensor::zero_grad`].
    pub fn accumulate_grad(&mut self, contribution: &[f64]) {
        assert_eq!(
            contribution.len(),
            self.data.len(),
            "gradient length {} does not match tensor numel {}",
            contribution.len(),
            self.data.len()
        );
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Checked mode: reject NaN/Inf anywhere in the data.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&c, &d)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(c < d, "index {index:?} out of bounds at axis {i}");
            off = off * d + c;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }
}

// ── Shape and broadcast helpers ─────────────────────────────────────

/// Broadcast two shapes with trailing alignment; `None` if incompatible.
#[allow(clippy::needless_range_loop)]
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Dimension at right-aligned position `pos_from_left` of a shape padded
/// to some rank; axes missing on the left count as 1.
fn dim_from_right(shape: &[usize], offset_from_right: usize) -> usize {
    if offset_from_right < shape.len() {
        shape[shape.len() - 1 - offset_from_right]
    } else {
        1
    }
}

/// Left-pad a shape with ones to `rank`.
#[allow(clippy::needless_range_loop)]
pub fn pad_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1usize; rank];
    out[rank - shape.len()..].copy_from_slice(shape);
    out
}

/// Decode a flat index into coordinates for `shape`.
pub fn unravel(mut flat: usize, shape: &[usize], coords: &mut [usize]) {
    for d in (0..shape.len()).rev() {
        coords[d] = flat % shape[d];
        flat /= shape[d];
    }
}

/// Flat index of `coords` within an operand of (padded) shape
/// `operand_shape`, where size-1 axes absorb any coordinate.
pub fn ravel_broadcast(coords: &[usize], operand_shape: &[usize]) -> usize {
    let mut off = 0;
    for (&c, &d) in coords.iter().zip(operand_shape) {
        let c = if d == 1 { 0 } else { c };
        off = off * d + c;
    }
    off
}

/// Sum a gradient of shape `from` down to shape `to` by collapsing the
/// axes that were broadcast (the reverse of trailing-aligned expansion).
pub fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let rank = from.len();
    let padded = pad_shape(to, rank);
    let numel_to: usize = to.iter().product();
    let mut out = vec![0.0; numel_to];
    let mut coords = vec![0usize; rank];
    for (flat, &g) in grad.iter().enumerate() {
        unravel(flat, from, &mut coords);
        out[ravel_broadcast(&coords, &padded)] += g;
    }
    out
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// 2D matrix product of row-major slices: `[m,k] x [k,p] -> [m,p]`.
pub fn matmul2d(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * p..(i + 1) * p];
        for (x, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[x * p..(x + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Transpose of a row-major `[m,k]` slice.
pub fn transpose2d(a: &[f64], m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            out[j * m + i] = a[i * k + j];
        }
    }
    out
}
