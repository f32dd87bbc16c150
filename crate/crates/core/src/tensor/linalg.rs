//! Small dense linear algebra: one-sided Jacobi SVD, QR, SPD solves.

use super::Tensor;
use crate::error::{Error, Result};

const MAX_JACOBI_SWEEPS: usize = 80;

/// Thin singular value decomposition `m = u * diag(s) * v^T`.
///
/// `u` is (rows x r), `v` is (cols x r) with `r = min(rows, cols)`. Singular
/// values are sorted descending; the largest-magnitude entry of every column
/// of `u` is positive.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Tensor {
        let (m, r) = (self.u.rows(), self.u.cols());
        let n = self.v.rows();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += self.u.get(&[i, k]) * self.s[k] * self.v.get(&[j, k]);
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::matrix(m, n, out).expect("consistent shapes")
    }
}

pub fn svd(m: &Tensor) -> Result<Svd> {
    if m.ndim() != 2 {
        return Err(Error::Shape(format!("svd expects a matrix, got {:?}", m.shape())));
    }
    if !m.is_finite() {
        return Err(Error::Numeric("svd input has non-finite entries".into()));
    }
    let (rows, cols) = (m.rows(), m.cols());
    let (mut u, s, mut v) = if rows >= cols {
        jacobi_tall(m.data(), rows, cols)
    } else {
        // Work on the transpose so the Gram side is the smaller one.
        let t = m.transpose()?;
        let (u2, s2, v2) = jacobi_tall(t.data(), cols, rows);
        (v2, s2, u2)
    };
    // sign convention on left vectors
    for k in 0..s.len() {
        let col = &u[k];
        let mut best = 0usize;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            u[k].iter_mut().for_each(|x| *x = -*x);
            v[k].iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(Svd {
        u: columns_to_matrix(&u, rows),
        s,
        v: columns_to_matrix(&v, cols),
    })
}

fn columns_to_matrix(cols: &[Vec<f64>], rows: usize) -> Tensor {
    let r = cols.len();
    let mut data = vec![0.0; rows * r];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..rows {
            data[i * r + j] = c[i];
        }
    }
    Tensor::matrix(rows, r, data).expect("consistent shapes")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hestenes one-sided Jacobi for `rows >= cols`. Returns column lists.
#[allow(clippy::type_complexity)]
fn jacobi_tall(data: &[f64], rows: usize, cols: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let mut a: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| data[i * cols + j]).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let eps = 1e-15;
    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]).then(x.cmp(&y)));
    let smax = order.first().map(|&i| sigma[i]).unwrap_or(0.0);
    let tol = smax * 1e-13 * rows.max(cols) as f64;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut v_cols = Vec::with_capacity(cols);
    let mut s_sorted = Vec::with_capacity(cols);
    let mut deficient = Vec::new();
    for &j in &order {
        let s = sigma[j];
        if s > tol && s > 0.0 {
            u_cols.push(a[j].iter().map(|x| x / s).collect());
        } else {
            deficient.push(u_cols.len());
            u_cols.push(vec![0.0; rows]);
        }
        v_cols.push(v[j].clone());
        s_sorted.push(s);
    }
    for k in deficient {
        let others: Vec<Vec<f64>> = u_cols
            .iter()
            .enumerate()
            .filter(|(i, c)| *i != k && c.iter().any(|&x| x != 0.0))
            .map(|(_, c)| c.clone())
            .collect();
        u_cols[k] = orthonormal_complement_vector(&others, rows);
    }
    (u_cols, s_sorted, v_cols)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let d = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
    }
}

/// A unit vector orthogonal to every vector in `basis` (assumed orthonormal).
fn orthonormal_complement_vector(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for i in 0..dim {
        let mut e = vec![0.0; dim];
        e[i] = 1.0;
        project_out(&mut e, basis);
        let n = dot(&e, &e).sqrt();
        if best.as_ref().map_or(true, |(bn, _)| n > *bn + 1e-12) {
            best = Some((n, e));
        }
    }
    let (n, mut e) = best.expect("dim > 0");
    e.iter_mut().for_each(|x| *x /= n);
    e
}

/// The `count` leading left singular vectors of `m` as a (rows x count)
/// matrix. When `count` exceeds `min(rows, cols)` the basis is completed with
/// orthonormal directions from the null space of `m^T`.
pub fn leading_left_vectors(m: &Tensor, count: usize) -> Result<Tensor> {
    let rows = m.rows();
    if count > rows {
        return Err(Error::Rank(format!("rank {count} exceeds dimension {rows}")));
    }
    let dec = svd(m)?;
    let have = dec.u.cols();
    let mut cols: Vec<Vec<f64>> = (0..have.min(count)).map(|j| dec.u.column(j)).collect();
    while cols.len() < count {
        let e = orthonormal_complement_vector(&cols, rows);
        cols.push(e);
    }
    Ok(columns_to_matrix(&cols, rows))
}

/// Orthonormal basis of the column space of a full-column-rank (m x n)
/// matrix, `m >= n`, by twice-iterated modified Gram-Schmidt.
pub fn qr_orthonormal(a: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || a.rows() < a.cols() {
        return Err(Error::Shape(format!(
            "qr expects a tall matrix, got {:?}",
            a.shape()
        )));
    }
    let (m, n) = (a.rows(), a.cols());
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut c = a.column(j);
        let norm0 = dot(&c, &c).sqrt();
        project_out(&mut c, &q);
        let norm = dot(&c, &c).sqrt();
        if norm <= 1e-12 * norm0.max(1e-300) || norm == 0.0 {
            return Err(Error::Numeric(format!("column {j} is linearly dependent")));
        }
        c.iter_mut().for_each(|x| *x /= norm);
        q.push(c);
    }
    Ok(columns_to_matrix(&q, m))
}

/// Solves `a x = b` for symmetric positive definite `a` (n x n) and
/// right-hand sides `b` (n x k) by Cholesky factorization.
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || a.rows() != a.cols() || b.ndim() != 2 || b.rows() != a.rows() {
        return Err(Error::Shape(format!(
            "solve_spd with {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.rows();
    let k = b.cols();
    let ad = a.data();
    let max_diag = (0..n).map(|i| ad[i * n + i].abs()).fold(0.0, f64::max);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = ad[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if s <= 1e-12 * max_diag || s <= 0.0 {
                    return Err(Error::Numeric("singular system matrix".into()));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut x = b.data().to_vec();
    for c in 0..k {
        for i in 0..n {
            let mut s = x[i * k + c];
            for p in 0..i {
                s -= l[i * n + p] * x[p * k + c];
            }
            x[i * k + c] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i * k + c];
            for p in i + 1..n {
                s -= l[p * n + i] * x[p * k + c];
            }
            x[i * k + c] = s / l[i * n + i];
        }
    }
    Tensor::matrix(n, k, x)
}
