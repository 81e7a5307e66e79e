//! Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of the working copy are rotated pairwise until they are mutually
//! orthogonal; their norms are then the singular values. All arithmetic is
//! 64-bit. Output ordering is non-increasing in `s` (stable for ties) and the
//! first nonzero entry of every left singular vector is made non-negative.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAX_SWEEPS: usize = 80;

/// `m = u · diag(s) · vt` with `u: M×K`, `vt: K×N`, `K = min(M, N)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.s.len();
        let us = Matrix::from_fn(self.u.rows(), k, |i, j| self.u.get(i, j) * self.s[j]);
        us.matmul(&self.vt).expect("svd factors are conformant")
    }
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Shape("svd of an empty matrix".into()));
    }
    if m.rows() >= m.cols() {
        let (u, s, v) = jacobi_tall(m);
        let mut out = SvdResult {
            u,
            s,
            vt: v.transpose(),
        };
        fix_signs(&mut out);
        Ok(out)
    } else {
        // mᵀ = u' s v'ᵀ  =>  m = v' s u'ᵀ
        let (u, s, v) = jacobi_tall(&m.transpose());
        let mut out = SvdResult {
            u: v,
            s,
            vt: u.transpose(),
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// Singular values only, non-increasing.
/// Leading `r` left singular vectors; when `r` exceeds the rank of `m` the
/// extra columns complete an orthonormal basis.
pub fn leading_left_vectors(m: &Matrix, r: usize) -> Result<Matrix> {
    let rows = m.rows();
    if r > rows {
        return Err(Error::RankOutOfRange { rank: r, max: rows });
    }
    let u = svd(m)?.u;
    let have = u.cols().min(r);
    let mut cols: Vec<Vec<f64>> = (0..have).map(|j| (0..rows).map(|i| u.get(i, j)).collect()).collect();
    while cols.len() < r {
        let e = complete_basis(&cols, rows);
        cols.push(e);
    }
    Ok(Matrix::from_fn(rows, r, |i, j| cols[j][i]))
}

pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(m)?.s)
}

/// Jacobi SVD of a matrix with `rows >= cols`; returns `(u, s, v)` with
/// `u: rows×cols` orthonormal columns, `v: cols×cols` orthogonal.
fn jacobi_tall(m: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (rows, n) = m.shape();
    if 2 * rows > 3 * n {
        // m = Q·R; rotating the small square R is much cheaper.
        let (q, r) = householder_qr(m);
        let (ur, s, v) = jacobi_tall(&r);
        let u = q.matmul(&ur).expect("conformant");
        return (u, s, v);
    }
    // Column-major working copies.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..rows).map(|i| m.get(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let total: f64 = cols.iter().flatten().map(|x| x * x).sum();
    let negligible = total * f64::EPSILON * f64::EPSILON;

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (a, b) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in a.iter().zip(b) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("finite norms"));

    let s_max = order.first().map(|&i| norms[i]).unwrap_or(0.0);
    let null_floor = s_max * f64::EPSILON * (rows.max(n) as f64);

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v_sorted = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        let candidate = if sigma > null_floor && sigma > 0.0 {
            let mut c: Vec<f64> = cols[j].iter().map(|x| x / sigma).collect();
            // Re-orthogonalize against stronger columns; small columns carry
            // relative orthogonality error of order eps·s_max/sigma.
            orthogonalize(&mut c, &u_cols);
            let nrm = norm(&c);
            if nrm > 0.5 {
                c.iter_mut().for_each(|x| *x /= nrm);
                Some(c)
            } else {
                None
            }
        } else {
            None
        };
        let col = candidate.unwrap_or_else(|| complete_basis(&u_cols, rows));
        s.push(sigma);
        u_cols.push(col);
        for i in 0..n {
            v_sorted.set(i, k, v[j][i]);
        }
    }

    let u = Matrix::from_fn(rows, n, |i, j| u_cols[j][i]);
    (u, s, v_sorted)
}

/// Thin Householder QR of a matrix with `rows >= cols`: `(Q: rows×cols, R: cols×cols)`.
fn householder_qr(m: &Matrix) -> (Matrix, Matrix) {
    let (rows, n) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..rows).map(|i| m.get(i, j)).collect())
        .collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let x = &a[k][k..];
        let xnorm = norm(x);
        let mut v = x.to_vec();
        let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|t| t * t).sum();
        if vv > 0.0 {
            for col in a.iter_mut().skip(k) {
                let seg = &mut col[k..];
                let d: f64 = seg.iter().zip(&v).map(|(p, q)| p * q).sum();
                let f = 2.0 * d / vv;
                seg.iter_mut().zip(&v).for_each(|(p, q)| *p -= f * q);
            }
        }
        reflectors.push(v);
    }
    let r = Matrix::from_fn(n, n, |i, j| if i <= j { a[j][i] } else { 0.0 });
    // Q = H_0 H_1 ... H_{n-1} applied to the leading identity columns.
    let mut q: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; rows];
            e[j] = 1.0;
            e
        })
        .collect();
    for (k, v) in reflectors.iter().enumerate().rev() {
        let vv: f64 = v.iter().map(|t| t * t).sum();
        if vv == 0.0 {
            continue;
        }
        for col in q.iter_mut() {
            let seg = &mut col[k..];
            let d: f64 = seg.iter().zip(v).map(|(p, q)| p * q).sum();
            let f = 2.0 * d / vv;
            seg.iter_mut().zip(v).for_each(|(p, q)| *p -= f * q);
        }
    }
    let q = Matrix::from_fn(rows, n, |i, j| q[j][i]);
    (q, r)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn orthogonalize(c: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let d: f64 = c.iter().zip(b).map(|(x, y)| x * y).sum();
            c.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
    }
}

/// A unit vector orthogonal to `basis`, taken from the first standard basis
/// vector that survives projection.
fn complete_basis(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in 0..dim {
        let mut e = vec![0.0; dim];
        e[k] = 1.0;
        orthogonalize(&mut e, basis);
        let nrm = norm(&e);
        if nrm > 0.5 {
            e.iter_mut().for_each(|x| *x /= nrm);
            return e;
        }
        if best.as_ref().is_none_or(|(b, _)| nrm > *b) {
            best = Some((nrm, e));
        }
    }
    let (nrm, mut e) = best.expect("dim > 0");
    e.iter_mut().for_each(|x| *x /= nrm);
    e
}

fn fix_signs(r: &mut SvdResult) {
    let (rows, k) = r.u.shape();
    for j in 0..k {
        let first = (0..rows)
            .map(|i| r.u.get(i, j))
            .find(|x| x.abs() > 1e-12)
            .unwrap_or(0.0);
        if first < 0.0 {
            for i in 0..rows {
                r.u.set(i, j, -r.u.get(i, j));
            }
            for c in 0..r.vt.cols() {
                r.vt.set(j, c, -r.vt.get(j, c));
            }
        }
    }
}
