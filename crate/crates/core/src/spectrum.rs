//! Singular value decomposition (one-sided Jacobi), numerical rank, truncated
//! SVD and tail energy, plus a cyclic Jacobi eigensolver for symmetric input.
//!
//! Jacobi is slower than bidiagonalization but computes small singular values
//! to high relative accuracy, and tail energies depend on exactly those.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Sweep budget for both Jacobi solvers.
pub const DEFAULT_MAX_SWEEPS: usize = 80;

/// Unit roundoff of IEEE double precision, 2^-53.
pub const UNIT_ROUNDOFF: f64 = f64::EPSILON / 2.0;

/// Thin SVD `W = U diag(σ) Vᵀ` with `m = min(rows, cols)` descending singular values.
///
/// Signs are fixed so that the first non-negligible entry of every left
/// singular vector is positive.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    left: Matrix,
    singular_values: Vec<f64>,
    right: Matrix,
}

impl SpectralDecomposition {
    /// `rows x m`, orthonormal columns.
    pub fn left_vectors(&self) -> &Matrix {
        &self.left
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// `cols x m`, orthonormal columns.
    pub fn right_vectors(&self) -> &Matrix {
        &self.right
    }

    pub fn rank_dim(&self) -> usize {
        self.singular_values.len()
    }

    pub fn source_shape(&self) -> (usize, usize) {
        (self.left.rows(), self.right.rows())
    }

    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    pub fn default_tolerance(&self) -> f64 {
        let (r, c) = self.source_shape();
        rank_tolerance(r, c, self.sigma_max())
    }

    /// Number of singular values strictly greater than `epsilon`.
    pub fn numerical_rank(&self, epsilon: f64) -> usize {
        self.singular_values.iter().filter(|&&s| s > epsilon).count()
    }

    /// Best rank-`r` approximation `Σ_{i<r} σ_i u_i v_iᵀ`.
    pub fn truncated(&self, r: usize) -> Result<Matrix> {
        let m = self.rank_dim();
        if r > m {
            return Err(Error::Range(format!("truncation rank {r} exceeds min dimension {m}")));
        }
        let (rows, cols) = self.source_shape();
        let mut data = vec![0.0; rows * cols];
        for k in 0..r {
            let s = self.singular_values[k];
            if s == 0.0 {
                continue;
            }
            for i in 0..rows {
                let us = self.left.get(i, k) * s;
                let row = &mut data[i * cols..(i + 1) * cols];
                for (j, x) in row.iter_mut().enumerate() {
                    *x += us * self.right.get(j, k);
                }
            }
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    pub fn reconstruct(&self) -> Matrix {
        self.truncated(self.rank_dim()).expect("full rank is in range")
    }

    /// `Σ_{i>r} σ_i²` (1-based i).
    pub fn tail_energy(&self, r: usize) -> Result<f64> {
        let m = self.rank_dim();
        if r > m {
            return Err(Error::Range(format!("tail index {r} exceeds min dimension {m}")));
        }
        Ok(self.singular_values[r..].iter().map(|s| s * s).sum())
    }
}

/// Conventional numerical-rank threshold `max(rows, cols) · σ₁ · u`.
pub fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * sigma_max * UNIT_ROUNDOFF
}

pub fn svd(w: &Matrix) -> Result<SpectralDecomposition> {
    svd_with_budget(w, DEFAULT_MAX_SWEEPS)
}

pub fn svd_with_budget(w: &Matrix, max_sweeps: usize) -> Result<SpectralDecomposition> {
    let tall = w.rows() >= w.cols();
    let work = if tall { w.clone() } else { w.transpose() };
    let (cols, v) = one_sided_jacobi(&work, true, max_sweeps)?;
    let v = v.expect("vectors requested");
    let (u_cols, sigma, v_cols) = finish_vectors(work.rows(), cols, v);
    let (mut left, mut right) = (u_cols, v_cols);
    if !tall {
        std::mem::swap(&mut left, &mut right);
    }
    // sign convention: first non-negligible entry of each left vector positive
    for k in 0..sigma.len() {
        let lead = left[k]
            .iter()
            .chain(right[k].iter())
            .copied()
            .find(|x| x.abs() > 1e-12)
            .unwrap_or(1.0);
        if lead < 0.0 {
            left[k].iter_mut().for_each(|x| *x = -*x);
            right[k].iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(SpectralDecomposition {
        left: columns_to_matrix(w.rows(), &left),
        singular_values: sigma,
        right: columns_to_matrix(w.cols(), &right),
    })
}

/// Singular values only (descending), skipping vector accumulation.
pub fn singular_values(w: &Matrix) -> Result<Vec<f64>> {
    let work = if w.rows() >= w.cols() { w.clone() } else { w.transpose() };
    let (cols, _) = one_sided_jacobi(&work, false, DEFAULT_MAX_SWEEPS)?;
    let mut s: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

pub fn numerical_rank(w: &Matrix, epsilon: f64) -> Result<usize> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::Argument(format!("rank tolerance must be finite and >= 0, got {epsilon}")));
    }
    Ok(singular_values(w)?.iter().filter(|&&s| s > epsilon).count())
}

/// Numerical rank at the default tolerance; also returns that tolerance.
pub fn default_rank(w: &Matrix) -> Result<(usize, f64)> {
    let s = singular_values(w)?;
    let eps = rank_tolerance(w.rows(), w.cols(), s.first().copied().unwrap_or(0.0));
    Ok((s.iter().filter(|&&x| x > eps).count(), eps))
}

pub fn truncated_svd(w: &Matrix, r: usize) -> Result<Matrix> {
    check_rank_index(w, r)?;
    svd(w)?.truncated(r)
}

pub fn tail_energy(w: &Matrix, r: usize) -> Result<f64> {
    check_rank_index(w, r)?;
    let s = singular_values(w)?;
    Ok(s[r..].iter().map(|x| x * x).sum())
}

fn check_rank_index(w: &Matrix, r: usize) -> Result<()> {
    let m = w.rows().min(w.cols());
    if r > m {
        return Err(Error::Range(format!(
            "rank {r} exceeds min dimension {m} of a {}x{} matrix",
            w.rows(),
            w.cols()
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn pair_mut(cols: &mut [Vec<f64>], p: usize, q: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
    debug_assert!(p < q);
    let (lo, hi) = cols.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

type Columns = Vec<Vec<f64>>;

/// Hestenes one-sided Jacobi on a tall matrix; returns the orthogonalized
/// columns `A·V` and optionally `V`, both column-wise.
fn one_sided_jacobi(a: &Matrix, want_v: bool, max_sweeps: usize) -> Result<(Columns, Option<Columns>)> {
    let (rows, n) = a.shape();
    let mut cols: Columns = (0..n).map(|j| a.column(j)).collect();
    let mut v: Option<Columns> = want_v.then(|| {
        (0..n)
            .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    });
    let tol = f64::EPSILON * (rows as f64).sqrt();
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    // columns this small carry only roundoff; their direction never settles
    let negligible = (f64::EPSILON.powi(2)) * norms.iter().sum::<f64>();

    for _sweep in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (cp, cq) = pair_mut(&mut cols, p, q);
                rotate(cp, cq, c, s);
                norms[p] = dot(cp, cp);
                norms[q] = dot(cq, cq);
                if let Some(v) = v.as_mut() {
                    let (vp, vq) = pair_mut(v, p, q);
                    rotate(vp, vq, c, s);
                }
            }
        }
        if !rotated {
            return Ok((cols, v));
        }
    }
    Err(Error::Numerical(format!(
        "Jacobi SVD of a {}x{} matrix did not converge within {max_sweeps} sweeps",
        a.rows(),
        a.cols()
    )))
}

/// Sorts by singular value and normalizes left vectors, completing an
/// orthonormal basis where singular values vanish.
fn finish_vectors(rows: usize, cols: Columns, v: Columns) -> (Columns, Vec<f64>, Columns) {
    let n = cols.len();
    let sig: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sig[b].total_cmp(&sig[a]).then(a.cmp(&b)));
    let smax = order.first().map_or(0.0, |&i| sig[i]);
    let negligible = rows as f64 * f64::EPSILON * smax;

    let mut u: Columns = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for &j in &order {
        let s = sig[j];
        let mut col: Vec<f64> = if s > 0.0 {
            cols[j].iter().map(|x| x / s).collect()
        } else {
            vec![0.0; rows]
        };
        if s <= negligible {
            col = orthogonal_complement_vector(&u, col);
        }
        u.push(col);
        sigma.push(s);
        right.push(v[j].clone());
    }
    (u, sigma, right)
}

fn orthogonal_complement_vector(basis: &[Vec<f64>], start: Vec<f64>) -> Vec<f64> {
    let rows = start.len();
    let project_out = |mut x: Vec<f64>| {
        for _ in 0..2 {
            for b in basis {
                let d = dot(&x, b);
                x.iter_mut().zip(b).for_each(|(xi, bi)| *xi -= d * bi);
            }
        }
        x
    };
    let candidates = std::iter::once(start).chain((0..rows).map(|e| {
        let mut x = vec![0.0; rows];
        x[e] = 1.0;
        x
    }));
    for cand in candidates {
        let x = project_out(cand);
        let nx = norm(&x);
        if nx > 0.5 {
            return x.into_iter().map(|xi| xi / nx).collect();
        }
    }
    unreachable!("a basis of size < rows always leaves a standard vector with large residual")
}

fn columns_to_matrix(rows: usize, cols: &[Vec<f64>]) -> Matrix {
    Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending; the
/// eigenvectors are the columns of the returned matrix.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dim("symmetric_eigen", a.shape(), (n, n)));
    }
    let mut m: Vec<f64> = Matrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i))).into_vec();
    let mut v = Matrix::identity(n).into_vec();
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let idx = |i: usize, j: usize| i * n + j;

    // entries below `floor` sum to at most ε‖A‖_F, the backward error anyway
    let floor = f64::EPSILON * scale / n as f64;
    let mut converged = n == 1 || scale == 0.0;
    for _ in 0..DEFAULT_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[idx(p, q)];
                let diag = (m[idx(p, p)] * m[idx(q, q)]).abs().sqrt();
                if apq.abs() <= floor || apq.abs() <= f64::EPSILON * diag {
                    continue;
                }
                rotated = true;
                let theta = (m[idx(q, q)] - m[idx(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[idx(k, p)], m[idx(k, q)]);
                    m[idx(k, p)] = c * akp - s * akq;
                    m[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[idx(p, k)], m[idx(q, k)]);
                    m[idx(p, k)] = c * apk - s * aqk;
                    m[idx(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[idx(k, p)], v[idx(k, q)]);
                    v[idx(k, p)] = c * vkp - s * vkq;
                    v[idx(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi eigensolver on a {n}x{n} matrix did not converge within {DEFAULT_MAX_SWEEPS} sweeps"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[idx(b, b)].total_cmp(&m[idx(a, a)]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| m[idx(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v[idx(i, order[j])]);
    Ok((values, vectors))
}
