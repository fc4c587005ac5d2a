//! Small-matrix factorizations on rank-2 [`DenseTensor`]s.
//!
//! Everything in the training loop works on matrices no larger than a few
//! hundred entries per side, so a one-sided Jacobi SVD and Householder QR are
//! both fast enough and very accurate. No BLAS/LAPACK dependency.

use crate::tensor::{DenseTensor, TensorError};

const JACOBI_MAX_SWEEPS: usize = 64;
const JACOBI_TOL: f64 = 1e-15;

/// Economy-size SVD `m = u * diag(s) * vt`.
///
/// `s` is non-ascending and non-negative; `u` has orthonormal columns and
/// `vt` orthonormal rows, including the null-space directions of
/// rank-deficient inputs (completed by Gram-Schmidt).
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseTensor,
    pub s: Vec<f64>,
    pub vt: DenseTensor,
}

/// SVD of a rank-2 tensor, economy size (`min(rows, cols)` inner dimension).
pub fn svd_matrix(m: &DenseTensor) -> Result<SvdResult, TensorError> {
    if m.rank() != 2 {
        return Err(TensorError::NotAMatrix(m.rank()));
    }
    m.check_finite()?;
    let rows = m.dims()[0];
    let cols = m.dims()[1];
    if rows >= cols {
        let (u_cols, s, v_cols) = jacobi_svd_tall(m.data(), rows, cols)?;
        Ok(SvdResult {
            u: cols_to_tensor(&u_cols, rows),
            s,
            vt: cols_to_tensor_transposed(&v_cols, cols),
        })
    } else {
        // svd(m) = (v, s, u) of svd(m^T) swapped
        let mt = m.permute(&[1, 0])?;
        let (u_cols, s, v_cols) = jacobi_svd_tall(mt.data(), cols, rows)?;
        Ok(SvdResult {
            u: cols_to_tensor(&v_cols, rows),
            s,
            vt: cols_to_tensor_transposed(&u_cols, cols),
        })
    }
}

/// Nearest matrix with orthonormal columns (tall input) or rows (wide input)
/// in Frobenius norm: the polar factor `u * vt` of the SVD. Maximizes
/// `trace(m^T w)` over all such isometries `w`.
pub fn closest_isometry(m: &DenseTensor) -> Result<DenseTensor, TensorError> {
    if m.rank() != 2 {
        return Err(TensorError::NotAMatrix(m.rank()));
    }
    if m.frobenius_norm() == 0.0 {
        return Err(TensorError::ZeroMatrix);
    }
    let svd = svd_matrix(m)?;
    crate::tensor::contract(&svd.u, &svd.vt, &[1], &[0])
}

/// Thin QR of a tall-or-square matrix (`rows >= cols`): `m = q * r` with
/// `q` of the same shape having orthonormal columns, `r` upper triangular
/// with non-negative diagonal (which makes the factorization unique for
/// full-rank input).
pub fn qr(m: &DenseTensor) -> Result<(DenseTensor, DenseTensor), TensorError> {
    if m.rank() != 2 {
        return Err(TensorError::NotAMatrix(m.rank()));
    }
    let rows = m.dims()[0];
    let cols = m.dims()[1];
    assert!(rows >= cols, "qr expects rows >= cols, got {rows}x{cols}");

    // work in column-major for cheap column ops
    let mut a = to_cols(m.data(), rows, cols);
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for k in 0..cols {
        // Householder vector for column k below the diagonal
        let mut v = vec![0.0; rows];
        v[k..].copy_from_slice(&a[k][k..]);
        let alpha = norm(&v[k..]);
        if alpha > 0.0 {
            let sign = if v[k] >= 0.0 { 1.0 } else { -1.0 };
            v[k] += sign * alpha;
            let vn = norm(&v[k..]);
            if vn > 0.0 {
                for x in v[k..].iter_mut() {
                    *x /= vn;
                }
                for col in a.iter_mut().skip(k) {
                    reflect(col, &v, k);
                }
            } else {
                v[k..].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        reflectors.push(v);
    }

    // r = top cols x cols block of the reduced matrix
    let mut r = DenseTensor::zeros(vec![cols, cols]);
    for j in 0..cols {
        for i in 0..=j {
            r.set(&[i, j], a[j][i]);
        }
    }
    // thin q = H_0 .. H_{cols-1} applied to the first cols identity columns
    let mut q_cols: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; rows];
            e[j] = 1.0;
            e
        })
        .collect();
    for k in (0..cols).rev() {
        for col in q_cols.iter_mut() {
            reflect(col, &reflectors[k], k);
        }
    }
    // fix signs so diag(r) >= 0
    for j in 0..cols {
        if r.get(&[j, j]) < 0.0 {
            for i in j..cols {
                let v = -r.get(&[j, i]);
                r.set(&[j, i], v);
            }
            for x in q_cols[j].iter_mut() {
                *x = -*x;
            }
        }
    }
    Ok((cols_to_tensor(&q_cols, rows), r))
}

/// LQ of a wide-or-square matrix (`rows <= cols`): `m = l * q` with `l`
/// lower triangular (non-negative diagonal) and `q` having orthonormal rows.
pub fn lq(m: &DenseTensor) -> Result<(DenseTensor, DenseTensor), TensorError> {
    let mt = m.permute(&[1, 0])?;
    let (qt, rt) = qr(&mt)?;
    Ok((rt.permute(&[1, 0])?, qt.permute(&[1, 0])?))
}

/// Eigenvalues of a small symmetric matrix, non-ascending, by cyclic Jacobi.
pub fn sym_eigenvalues(m: &DenseTensor) -> Result<Vec<f64>, TensorError> {
    if m.rank() != 2 || m.dims()[0] != m.dims()[1] {
        return Err(TensorError::NotAMatrix(m.rank()));
    }
    let n = m.dims()[0];
    let mut a = m.data().to_vec();
    let at = |a: &[f64], i: usize, j: usize| a[i * n + j];
    let scale = a.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(at(&a, p, q).abs());
            }
        }
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = at(&a, p, q);
                if apq.abs() <= JACOBI_TOL * scale {
                    continue;
                }
                let app = at(&a, p, p);
                let aqq = at(&a, q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = at(&a, k, p);
                    let akq = at(&a, k, q);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = at(&a, p, k);
                    let aqk = at(&a, q, k);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| at(&a, i, i)).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(eig)
}

/// One-sided Jacobi on a tall matrix given row-major (rows >= cols).
/// Returns (u columns, s, v columns), economy size with completed bases.
fn jacobi_svd_tall(
    data: &[f64],
    rows: usize,
    cols: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>), TensorError> {
    // work on a copy scaled to unit max-abs; gauge chains can produce
    // subnormal columns whose pair rotations would otherwise never settle
    let max_abs = data.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let scale = if max_abs > 0.0 { max_abs } else { 1.0 };
    let scaled: Vec<f64> = data.iter().map(|&x| x / scale).collect();
    // relative to a unit-scaled matrix, anything this small is exactly noise
    const DEAD_COLUMN: f64 = 1e-280;

    let mut w = to_cols(&scaled, rows, cols);
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = false;
    let mut last_off = 0.0;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off: f64 = 0.0;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if alpha <= DEAD_COLUMN || beta <= DEAD_COLUMN {
                    continue;
                }
                let denom = (alpha * beta).sqrt();
                if denom == 0.0 || gamma.abs() <= JACOBI_TOL * denom {
                    continue;
                }
                off = off.max(gamma.abs() / denom);
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        last_off = off;
        if off == 0.0 {
            converged = true;
            break;
        }
    }
    if !converged {
        let norms: Vec<f64> = w.iter().map(|c| norm(c)).collect();
        let smax = norms.iter().cloned().fold(0.0, f64::max);
        let smin = norms.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(TensorError::SvdNoConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
            residual: last_off,
            condition: if smin > 0.0 { smax / smin } else { f64::INFINITY },
        });
    }

    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = w.iter().map(|c| norm(c)).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
    let s: Vec<f64> = order.iter().map(|&i| norms[i] * scale).collect();
    let smax = norms[order[0]];

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for &i in &order {
        if norms[i] > smax * 1e-13 && norms[i] > 0.0 {
            u_cols.push(w[i].iter().map(|x| x / norms[i]).collect());
        } else {
            u_cols.push(vec![0.0; rows]); // completed below
        }
    }
    complete_basis(&mut u_cols, rows);
    let v_cols: Vec<Vec<f64>> = order.iter().map(|&i| v[i].clone()).collect();
    Ok((u_cols, s, v_cols))
}

/// Replace zero placeholder columns with unit vectors orthogonal to the rest.
fn complete_basis(cols: &mut [Vec<f64>], dim: usize) {
    let need: Vec<usize> = (0..cols.len())
        .filter(|&j| norm(&cols[j]) < 0.5)
        .collect();
    if need.is_empty() {
        return;
    }
    let mut cand = 0usize;
    for j in need {
        loop {
            assert!(cand < dim, "basis completion ran out of candidates");
            let mut e = vec![0.0; dim];
            e[cand] = 1.0;
            cand += 1;
            // two rounds of Gram-Schmidt for stability
            for _ in 0..2 {
                for (k, other) in cols.iter().enumerate() {
                    if k == j || norm(other) < 0.5 {
                        continue;
                    }
                    let proj = dot(&e, other);
                    for (x, y) in e.iter_mut().zip(other) {
                        *x -= proj * y;
                    }
                }
            }
            let n = norm(&e);
            if n > 0.5 {
                for x in e.iter_mut() {
                    *x /= n;
                }
                cols[j] = e;
                break;
            }
        }
    }
}

fn to_cols(data: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..cols)
        .map(|j| (0..rows).map(|i| data[i * cols + j]).collect())
        .collect()
}

fn cols_to_tensor(cols: &[Vec<f64>], rows: usize) -> DenseTensor {
    let n = cols.len();
    let mut data = vec![0.0; rows * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            data[i * n + j] = v;
        }
    }
    DenseTensor::new(vec![rows, n], data).expect("factor matrices are finite")
}

fn cols_to_tensor_transposed(cols: &[Vec<f64>], len: usize) -> DenseTensor {
    let n = cols.len();
    let mut data = vec![0.0; n * len];
    for (j, col) in cols.iter().enumerate() {
        data[j * len..(j + 1) * len].copy_from_slice(col);
    }
    DenseTensor::new(vec![n, len], data).expect("factor matrices are finite")
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = if p < q { (p, q) } else { (q, p) };
    let (a, b) = cols.split_at_mut(hi);
    let (cp, cq) = if p < q {
        (&mut a[lo], &mut b[0])
    } else {
        (&mut b[0], &mut a[lo])
    };
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = c * *x - s * *y;
        let yq = s * *x + c * *y;
        *x = xp;
        *y = yq;
    }
}

/// Apply the Householder reflector `I - 2 v v^T` (with `v` supported on
/// indices `k..`) to a column vector.
fn reflect(col: &mut [f64], v: &[f64], k: usize) {
    let proj: f64 = v[k..].iter().zip(&col[k..]).map(|(a, b)| a * b).sum();
    if proj == 0.0 {
        return;
    }
    for (x, y) in col[k..].iter_mut().zip(&v[k..]) {
        *x -= 2.0 * proj * y;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
