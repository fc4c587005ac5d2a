//! Dense rank-k tensors of `f64` in row-major layout.
//!
//! This is the numeric carrier for the whole crate: MPS cores, environment
//! tensors, reduced density matrices and images all live in [`DenseTensor`].
//! Contraction is implemented as permute-then-reshape followed by a single
//! matrix multiply, which keeps the semantics easy to check against a naive
//! loop oracle.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dims {dims:?} require {expected} entries, got {actual}")]
    ShapeData {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("axis sizes must be positive, got {0:?}")]
    ZeroAxis(Vec<usize>),
    #[error("axis {axis} out of range for rank-{rank} tensor")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("contracted axes {axis_a} of a (size {len_a}) and {axis_b} of b (size {len_b}) differ")]
    AxisSizeMismatch {
        axis_a: usize,
        axis_b: usize,
        len_a: usize,
        len_b: usize,
    },
    #[error("axis list {0:?} contains duplicates")]
    DuplicateAxis(Vec<usize>),
    #[error("expected a rank-2 tensor, got rank {0}")]
    NotAMatrix(usize),
    #[error("{0:?} is not a permutation of 0..{1}")]
    BadPermutation(Vec<usize>, usize),
    #[error("cannot reshape {from:?} into {to:?}")]
    BadReshape { from: Vec<usize>, to: Vec<usize> },
    #[error("non-finite entry at flat index {0}")]
    NonFinite(usize),
    #[error("SVD did not converge after {sweeps} sweeps (residual {residual:.3e}, condition estimate {condition:.3e})")]
    SvdNoConvergence {
        sweeps: usize,
        residual: f64,
        condition: f64,
    },
    #[error("closest isometry of the zero matrix is undefined")]
    ZeroMatrix,
}

/// Rank-k real tensor. `dims` are the axis sizes; `data` is row-major
/// (last axis fastest). A rank-0 tensor has `dims == []` and one entry.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroAxis(dims));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeData {
                dims,
                expected,
                actual: data.len(),
            });
        }
        let t = Self { dims, data };
        t.check_finite()?;
        Ok(t)
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "axis sizes must be positive");
        let len = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            dims: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        let mut idx = vec![0usize; t.rank()];
        for flat in 0..t.data.len() {
            t.data[flat] = f(&idx);
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < t.dims[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 tensor.
    pub fn as_scalar(&self) -> f64 {
        debug_assert!(self.rank() == 0);
        self.data[0]
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.rank());
        let mut flat = 0;
        for (ax, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.dims[ax]);
            flat = flat * self.dims[ax] + i;
        }
        flat
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let flat = self.flat_index(idx);
        self.data[flat] = v;
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(TensorError::NonFinite(i)),
            None => Ok(()),
        }
    }

    /// Reorder axes so that output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self, TensorError> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p.min(rank - 1)], true)) {
            return Err(TensorError::BadPermutation(perm.to_vec(), rank));
        }
        if perm.iter().enumerate().all(|(k, &p)| k == p) {
            return Ok(self.clone());
        }
        let new_dims: Vec<usize> = perm.iter().map(|&p| self.dims[p]).collect();
        // stride of each input axis in the flat input
        let mut in_strides = vec![1usize; rank];
        for ax in (0..rank.saturating_sub(1)).rev() {
            in_strides[ax] = in_strides[ax + 1] * self.dims[ax + 1];
        }
        let mut out = Self::zeros(new_dims.clone());
        let mut idx = vec![0usize; rank]; // output multi-index
        for flat_out in 0..out.data.len() {
            let mut flat_in = 0;
            for (ax, &i) in idx.iter().enumerate() {
                flat_in += i * in_strides[perm[ax]];
            }
            out.data[flat_out] = self.data[flat_in];
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < new_dims[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(out)
    }

    /// Reinterpret the flat data under new axis sizes (same element count).
    pub fn reshape(&self, dims: Vec<usize>) -> Result<Self, TensorError> {
        self.clone().into_reshape(dims)
    }

    pub fn into_reshape(self, dims: Vec<usize>) -> Result<Self, TensorError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroAxis(dims));
        }
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::BadReshape {
                from: self.dims,
                to: dims,
            });
        }
        Ok(Self {
            dims,
            data: self.data,
        })
    }

    pub fn scale(&self, a: f64) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| a * v).collect(),
        }
    }

    /// `self += a * other`; shapes must agree.
    pub fn axpy(&mut self, a: f64, other: &Self) {
        assert_eq!(self.dims, other.dims, "axpy shape mismatch");
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest |difference| between two same-shaped tensors.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Contract `a` and `b` over the paired axis lists.
///
/// Result axes are a's free axes (in order) followed by b's free axes. A full
/// contraction yields a rank-0 tensor.
pub fn contract(
    a: &DenseTensor,
    b: &DenseTensor,
    axes_a: &[usize],
    axes_b: &[usize],
) -> Result<DenseTensor, TensorError> {
    if axes_a.len() != axes_b.len() {
        return Err(TensorError::AxisSizeMismatch {
            axis_a: axes_a.len(),
            axis_b: axes_b.len(),
            len_a: axes_a.len(),
            len_b: axes_b.len(),
        });
    }
    check_axes(axes_a, a.rank())?;
    check_axes(axes_b, b.rank())?;
    for (&ax_a, &ax_b) in axes_a.iter().zip(axes_b) {
        if a.dims[ax_a] != b.dims[ax_b] {
            return Err(TensorError::AxisSizeMismatch {
                axis_a: ax_a,
                axis_b: ax_b,
                len_a: a.dims[ax_a],
                len_b: b.dims[ax_b],
            });
        }
    }

    let free_a: Vec<usize> = (0..a.rank()).filter(|ax| !axes_a.contains(ax)).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|ax| !axes_b.contains(ax)).collect();

    let perm_a: Vec<usize> = free_a.iter().chain(axes_a).copied().collect();
    let perm_b: Vec<usize> = axes_b.iter().chain(&free_b).copied().collect();

    let m: usize = free_a.iter().map(|&ax| a.dims[ax]).product();
    let k: usize = axes_a.iter().map(|&ax| a.dims[ax]).product();
    let n: usize = free_b.iter().map(|&ax| b.dims[ax]).product();

    let pa = a.permute(&perm_a)?;
    let pb = b.permute(&perm_b)?;

    let mut out = vec![0.0; m * n];
    matmul(pa.data(), m, k, pb.data(), n, &mut out);

    let mut dims: Vec<usize> = free_a.iter().map(|&ax| a.dims[ax]).collect();
    dims.extend(free_b.iter().map(|&ax| b.dims[ax]));
    let t = DenseTensor {
        dims,
        data: out,
    };
    t.check_finite()?;
    Ok(t)
}

fn check_axes(axes: &[usize], rank: usize) -> Result<(), TensorError> {
    for (i, &ax) in axes.iter().enumerate() {
        if ax >= rank {
            return Err(TensorError::AxisOutOfRange { axis: ax, rank });
        }
        if axes[..i].contains(&ax) {
            return Err(TensorError::DuplicateAxis(axes.to_vec()));
        }
    }
    Ok(())
}

/// `out += a(m x k) * b(k x n)`, row-major.
pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
