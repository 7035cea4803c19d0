//! Dense `f64` linear algebra: SVD, QR with column pivoting, pseudo-inverse,
//! and representative-row selection for channel pruning.
//!
//! Everything here is deterministic: the same input produces the same
//! output bit for bit. Column pivoting breaks near-ties (within `1e-12`
//! relative) toward the lowest column index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PINV_RTOL: f64 = 1e-10;

/// Relative band inside which two pivot candidates count as tied.
const PIVOT_TIE_RTOL: f64 = 1e-12;

/// Jacobi sweeps stop once every column pair has cosine below this.
const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 80;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Index(format!(
                    "row {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Matrix::new(indices.len(), self.cols, data)
    }

    /// Leading `n` columns.
    pub fn leading_columns(&self, n: usize) -> Matrix {
        Matrix::from_fn(self.rows, n.min(self.cols), |i, j| self[(i, j)])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Sum over rows, as a `1 x cols` matrix.
    pub fn column_sums(&self) -> Matrix {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        Matrix::row_vector(sums)
    }

    fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "{what}: matrix has non-finite entries"
            )))
        }
    }

    fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols).map(|j| self.column(j)).collect()
    }

    fn from_columns(rows: usize, cols: &[Vec<f64>]) -> Matrix {
        Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Thin SVD `M = U diag(s) Vt` with `r = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub vt: Matrix,
}

/// `M P = Q R`, with `perm[k]` the original index of the `k`-th pivoted column.
#[derive(Debug, Clone)]
pub struct Qrcp {
    pub q: Matrix,
    pub r: Matrix,
    pub perm: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Householder {
    /// Reflector vectors, `v[k]` acting on rows `k..`.
    vectors: Vec<Vec<f64>>,
    /// Working columns; upper part holds R after factorization.
    cols: Vec<Vec<f64>>,
    perm: Vec<usize>,
    rows: usize,
}

/// Householder QR on column storage, optionally with column pivoting by
/// largest residual 2-norm. Residual norms are recomputed from the trailing
/// block at every step rather than downdated.
fn householder_qr(m: &Matrix, pivot: bool) -> Householder {
    let rows = m.rows;
    let n = m.cols;
    let steps = rows.min(n);
    let mut cols = m.columns();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut vectors = Vec::with_capacity(steps);

    for k in 0..steps {
        if pivot {
            let norms: Vec<f64> = cols[k..].iter().map(|c| norm(&c[k..])).collect();
            let best = norms.iter().cloned().fold(0.0, f64::max);
            let cutoff = best - PIVOT_TIE_RTOL * best;
            let rel = norms
                .iter()
                .position(|&v| v >= cutoff)
                .expect("nonempty candidate set");
            let j = k + rel;
            if j != k {
                cols.swap(k, j);
                perm.swap(k, j);
            }
        }

        let x = &cols[k][k..];
        let xnorm = norm(x);
        let mut v = x.to_vec();
        if xnorm > 0.0 {
            let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
            v[0] -= alpha;
            let vv = dot(&v, &v);
            if vv > 0.0 {
                for col in cols[k..].iter_mut() {
                    let tail = &mut col[k..];
                    let f = 2.0 * dot(&v, tail) / vv;
                    for (t, &vi) in tail.iter_mut().zip(&v) {
                        *t -= f * vi;
                    }
                }
                // Exact zeros below the diagonal.
                cols[k][k] = alpha;
                cols[k][k + 1..rows].iter_mut().for_each(|e| *e = 0.0);
            } else {
                v.iter_mut().for_each(|e| *e = 0.0);
            }
        } else {
            v.iter_mut().for_each(|e| *e = 0.0);
        }
        vectors.push(v);
    }

    Householder {
        vectors,
        cols,
        perm,
        rows,
    }
}

impl Householder {
    fn r(&self) -> Matrix {
        let steps = self.vectors.len();
        Matrix::from_fn(steps, self.cols.len(), |i, j| {
            if i <= j {
                self.cols[j][i]
            } else {
                0.0
            }
        })
    }

    /// Thin Q (`rows x steps`), formed by applying the reflectors to the
    /// leading identity columns.
    fn q(&self) -> Matrix {
        let steps = self.vectors.len();
        let mut q: Vec<Vec<f64>> = (0..steps)
            .map(|j| {
                let mut e = vec![0.0; self.rows];
                e[j] = 1.0;
                e
            })
            .collect();
        for (k, v) in self.vectors.iter().enumerate().rev() {
            let vv = dot(v, v);
            if vv == 0.0 {
                continue;
            }
            for col in q.iter_mut() {
                let tail = &mut col[k..];
                let f = 2.0 * dot(v, tail) / vv;
                for (t, &vi) in tail.iter_mut().zip(v) {
                    *t -= f * vi;
                }
            }
        }
        Matrix::from_columns(self.rows, &q)
    }
}

/// QR factorization with column pivoting: at each step the remaining column
/// with the largest residual norm is moved to the front.
pub fn qr_column_pivot(m: &Matrix) -> Result<Qrcp> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::Shape("qr of an empty matrix".into()));
    }
    m.ensure_finite("qr_column_pivot")?;
    let h = householder_qr(m, true);
    Ok(Qrcp {
        q: h.q(),
        r: h.r(),
        perm: h.perm.clone(),
    })
}

/// Extends `basis` (orthonormal vectors of length `dim`) with unit vectors
/// built from the standard basis by twice-applied Gram-Schmidt, until it has
/// `target` members.
fn complete_orthonormal(basis: &mut Vec<Vec<f64>>, dim: usize, target: usize) {
    let mut candidate = 0;
    while basis.len() < target && candidate < dim {
        let mut v = vec![0.0; dim];
        v[candidate] = 1.0;
        candidate += 1;
        for _ in 0..2 {
            for b in basis.iter() {
                let p = dot(b, &v);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= p * bi;
                }
            }
        }
        let n = norm(&v);
        if n > 0.5 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
}

/// One-sided Jacobi on the columns of a square `n x n` matrix. Returns
/// `(left vectors, singular values, right vectors)` sorted by decreasing
/// singular value, each as column lists.
#[allow(clippy::type_complexity)]
fn jacobi_square(r: &Matrix) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let n = r.cols;
    let mut w = r.columns();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = w.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: equal values keep their column order.
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let smax = order.first().map_or(0.0, |&i| sigma[i]);
    let cutoff = smax * n as f64 * f64::EPSILON;
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    let mut needs_completion = false;
    for &i in &order {
        values.push(sigma[i]);
        right.push(v[i].clone());
        if sigma[i] > cutoff && sigma[i] > 0.0 && !needs_completion {
            left.push(w[i].iter().map(|x| x / sigma[i]).collect());
        } else {
            needs_completion = true;
        }
    }
    complete_orthonormal(&mut left, n, n);
    (left, values, right)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Thin singular value decomposition.
///
/// Tall inputs are first reduced with Householder QR, then the square
/// triangular factor is diagonalized by one-sided Jacobi rotations. Wide
/// inputs are handled through the transpose. Left singular vectors belonging
/// to (numerically) zero singular values are completed to an orthonormal set.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::Shape("svd of an empty matrix".into()));
    }
    m.ensure_finite("svd")?;
    if m.rows >= m.cols {
        Ok(svd_tall(m))
    } else {
        let t = svd_tall(&m.transpose());
        Ok(Svd {
            u: t.vt.transpose(),
            singular_values: t.singular_values,
            vt: t.u.transpose(),
        })
    }
}

fn svd_tall(m: &Matrix) -> Svd {
    let n = m.cols;
    let h = householder_qr(m, false);
    let q = h.q();
    let r = h.r();
    let (left, values, right) = jacobi_square(&r);
    let u_r = Matrix::from_columns(n, &left);
    let u = q.matmul(&u_r).expect("conforming shapes");
    let vt = Matrix::from_fn(n, n, |i, j| right[i][j]);
    Svd {
        u,
        singular_values: values,
        vt,
    }
}

/// Moore-Penrose pseudo-inverse; singular values below `rel_tol * s_max`
/// are treated as zero. An all-zero input gives an all-zero result.
pub fn pseudo_inverse(m: &Matrix, rel_tol: f64) -> Result<Matrix> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::Argument(format!(
            "pseudo-inverse tolerance must be in (0, 1), got {rel_tol}"
        )));
    }
    let s = svd(m)?;
    let smax = s.singular_values.first().copied().unwrap_or(0.0);
    let mut out = Matrix::zeros(m.cols, m.rows);
    for (k, &sigma) in s.singular_values.iter().enumerate() {
        if sigma == 0.0 || sigma < rel_tol * smax {
            continue;
        }
        let inv = 1.0 / sigma;
        for i in 0..m.cols {
            let vik = s.vt[(k, i)] * inv;
            if vik == 0.0 {
                continue;
            }
            for j in 0..m.rows {
                out[(i, j)] += vik * s.u[(j, k)];
            }
        }
    }
    Ok(out)
}

/// Picks `keep` rows of `a` that best represent its row space: SVD of `a`,
/// pivoted QR of the transposed leading `keep` left singular vectors, and
/// the first `keep` pivots. Indices come back distinct, in pivot order.
pub fn find_representative_rows(a: &Matrix, keep: usize) -> Result<Vec<usize>> {
    if keep == 0 || keep > a.rows {
        return Err(Error::Argument(format!(
            "cannot keep {keep} of {} rows",
            a.rows
        )));
    }
    let s = svd(a)?;
    let mut basis: Vec<Vec<f64>> = (0..keep.min(s.u.cols)).map(|j| s.u.column(j)).collect();
    complete_orthonormal(&mut basis, a.rows, keep);
    // Rows of this matrix are the leading left singular vectors.
    let ut = Matrix::from_fn(keep, a.rows, |i, j| basis[i][j]);
    let qr = qr_column_pivot(&ut)?;
    Ok(qr.perm[..keep].to_vec())
}

/// Coefficients `s = B A_kept^+` minimizing `||B - s A_kept||`.
pub fn least_squares_row(b: &Matrix, a_kept: &Matrix) -> Result<Vec<f64>> {
    if b.rows != 1 {
        return Err(Error::Shape(format!(
            "target must be a single row, got {} rows",
            b.rows
        )));
    }
    if b.cols != a_kept.cols {
        return Err(Error::Shape(format!(
            "target has {} columns but kept rows have {}",
            b.cols, a_kept.cols
        )));
    }
    b.ensure_finite("least_squares_row")?;
    let s = svd(a_kept)?;
    let smax = s.singular_values.first().copied().unwrap_or(0.0);
    let k = a_kept.rows;
    let mut coeffs = vec![0.0; k];
    for (r, &sigma) in s.singular_values.iter().enumerate() {
        if sigma == 0.0 || sigma < DEFAULT_PINV_RTOL * smax {
            continue;
        }
        let proj = dot(b.row(0), s.vt.row(r)) / sigma;
        for (i, c) in coeffs.iter_mut().enumerate() {
            *c += proj * s.u[(i, r)];
        }
    }
    Ok(coeffs)
}

/// `||B - s A_kept||_2` for a single-row `B`.
pub fn row_residual(b: &Matrix, a_kept: &Matrix, scales: &[f64]) -> Result<f64> {
    if b.cols != a_kept.cols || scales.len() != a_kept.rows {
        return Err(Error::Shape("residual operands do not conform".into()));
    }
    let mut r = b.row(0).to_vec();
    for (i, &s) in scales.iter().enumerate() {
        for (ri, &a) in r.iter_mut().zip(a_kept.row(i)) {
            *ri -= s * a;
        }
    }
    Ok(norm(&r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.rows == b.rows
            && a.cols == b.cols
            && a.data
                .iter()
                .zip(&b.data)
                .all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn svd_of_identity_and_diagonal() {
        let s = svd(&Matrix::identity(3)).unwrap();
        assert!(s.singular_values.iter().all(|&v| (v - 1.0).abs() < 1e-14));
        let s = svd(&Matrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        for (v, e) in s.singular_values.iter().zip([3.0, 2.0, 1.0]) {
            assert!((v - e).abs() < 1e-14);
        }
    }

    #[test]
    fn svd_reconstructs_wide_and_tall() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, c) in [(6, 40), (40, 6), (5, 5), (1, 7), (7, 1)] {
            let m = random(&mut rng, r, c);
            let s = svd(&m).unwrap();
            let k = r.min(c);
            let us = Matrix::from_fn(r, k, |i, j| s.u[(i, j)] * s.singular_values[j]);
            let rec = us.matmul(&s.vt).unwrap();
            assert!(close(&rec, &m, 1e-12), "{r}x{c}");
        }
    }

    #[test]
    fn svd_completes_rank_deficient_basis() {
        let m = Matrix::zeros(4, 3);
        let s = svd(&m).unwrap();
        let gram = s.u.transpose().matmul(&s.u).unwrap();
        assert!(close(&gram, &Matrix::identity(3), 1e-12));
        assert!(s.singular_values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn svd_rejects_non_finite() {
        let m = Matrix::new(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(svd(&m), Err(Error::Numeric(_))));
        assert!(matches!(qr_column_pivot(&m), Err(Error::Numeric(_))));
    }

    #[test]
    fn qrcp_forced_pivot() {
        let m = Matrix::from_rows(&[vec![0.0, 5.0], vec![0.0, 0.0]]).unwrap();
        let qr = qr_column_pivot(&m).unwrap();
        assert_eq!(qr.perm, vec![1, 0]);
    }

    #[test]
    fn qrcp_ties_pick_lowest_index() {
        let qr = qr_column_pivot(&Matrix::identity(4)).unwrap();
        assert_eq!(qr.perm, vec![0, 1, 2, 3]);
        let zero = qr_column_pivot(&Matrix::zeros(2, 3)).unwrap();
        assert_eq!(zero.perm, vec![0, 1, 2]);
    }

    #[test]
    fn qrcp_on_orthogonal_has_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = svd(&random(&mut rng, 5, 5)).unwrap().u;
        let qr = qr_column_pivot(&q).unwrap();
        for i in 0..5 {
            assert!((qr.r[(i, i)].abs() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn pinv_diagonal_and_zero() {
        let p = pseudo_inverse(&Matrix::diag(&[2.0, 4.0]), DEFAULT_PINV_RTOL).unwrap();
        assert!(close(&p, &Matrix::diag(&[0.5, 0.25]), 1e-15));
        let z = pseudo_inverse(&Matrix::zeros(2, 3), DEFAULT_PINV_RTOL).unwrap();
        assert_eq!(z, Matrix::zeros(3, 2));
        assert!(matches!(
            pseudo_inverse(&Matrix::identity(2), 0.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn pinv_of_rank_one_outer_product() {
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 1.0, -1.0, 2.0];
        let m = Matrix::from_fn(3, 4, |i, j| u[i] * v[j]);
        let uu: f64 = u.iter().map(|x| x * x).sum();
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let expected = Matrix::from_fn(4, 3, |i, j| v[i] * u[j] / (uu * vv));
        let p = pseudo_inverse(&m, DEFAULT_PINV_RTOL).unwrap();
        assert!(close(&p, &expected, 1e-10));
    }

    #[test]
    fn pinv_involution_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random(&mut rng, 4, 7);
        let pp = pseudo_inverse(
            &pseudo_inverse(&m, DEFAULT_PINV_RTOL).unwrap(),
            DEFAULT_PINV_RTOL,
        )
        .unwrap();
        assert!(close(&pp, &m, 1e-8));
    }

    #[test]
    fn representative_rows_span_dependent_row() {
        let a = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![1.0, 1.0, 0.0],
        ])
        .unwrap();
        let kept = find_representative_rows(&a, 2).unwrap();
        let excluded = (0..3).find(|i| !kept.contains(i)).unwrap();
        let ak = a.select_rows(&kept).unwrap();
        let target = Matrix::row_vector(a.row(excluded).to_vec());
        let s = least_squares_row(&target, &ak).unwrap();
        assert!(row_residual(&target, &ak, &s).unwrap() < 1e-10);
    }

    #[test]
    fn representative_rows_full_keep_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&mut rng, 5, 30);
        let mut kept = find_representative_rows(&a, 5).unwrap();
        kept.sort();
        assert_eq!(kept, vec![0, 1, 2, 3, 4]);
        assert!(matches!(
            find_representative_rows(&a, 0),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            find_representative_rows(&a, 6),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn representative_rows_beyond_rank() {
        // Rank 1, but three rows requested.
        let a = Matrix::from_fn(4, 10, |i, j| (i + 1) as f64 * (j as f64 - 4.5));
        let kept = find_representative_rows(&a, 3).unwrap();
        assert_eq!(kept.len(), 3);
        let mut d = kept.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 3);
    }

    #[test]
    fn least_squares_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random(&mut rng, 3, 50);
        let b = Matrix::row_vector(a.row(0).to_vec());
        let s = least_squares_row(&b, &a).unwrap();
        for (v, e) in s.iter().zip([1.0, 0.0, 0.0]) {
            assert!((v - e).abs() < 1e-8);
        }
        let single = Matrix::row_vector(a.row(1).to_vec());
        let s = least_squares_row(&single, &single).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);

        let planted = [2.0, -1.0, 0.5];
        let b = Matrix::row_vector(
            (0..50)
                .map(|j| (0..3).map(|i| planted[i] * a[(i, j)]).sum())
                .collect(),
        );
        let s = least_squares_row(&b, &a).unwrap();
        for (v, e) in s.iter().zip(planted) {
            assert!((v - e).abs() < 1e-8);
        }

        let bad = Matrix::row_vector(vec![1.0; 49]);
        assert!(matches!(least_squares_row(&bad, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn deterministic_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a = random(&mut rng, 8, 60);
        let r1 = find_representative_rows(&a, 4).unwrap();
        let r2 = find_representative_rows(&a.clone(), 4).unwrap();
        assert_eq!(r1, r2);
        let s1 = svd(&a).unwrap();
        let s2 = svd(&a).unwrap();
        assert_eq!(s1.u, s2.u);
        assert_eq!(s1.singular_values, s2.singular_values);
    }
}
