//! Small dense linear-algebra helpers shared by the metric, control and tube
//! modules. Everything here works on dynamically sized `nalgebra` types.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Symmetric part `(A + Aᵀ) / 2`.
pub fn sym(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted ascending.
pub fn sym_eigen(a: &Matrix) -> (Vector, Matrix) {
    let eig = SymmetricEigen::new(sym(a));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Matrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eig_range(a: &Matrix) -> (f64, f64) {
    let (values, _) = sym_eigen(a);
    (values[0], values[values.len() - 1])
}

/// Singular values and the full right-singular basis of `a`.
///
/// `nalgebra` only returns the thin factorisation, so the matrix is padded
/// with zero rows up to square before decomposing.
fn full_right_svd(a: &Matrix) -> (Vec<f64>, Matrix) {
    let (rows, cols) = a.shape();
    let size = rows.max(cols);
    let mut padded = Matrix::zeros(size, cols);
    padded.view_mut((0, 0), (rows, cols)).copy_from(a);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    (
        svd.singular_values.iter().copied().collect(),
        v_t.transpose(),
    )
}

/// Orthonormal basis (as columns) of `ker(a)`. Singular values below
/// `rel_tol * σ_max` count as zero. Returns an `n × 0` matrix when the
/// kernel is trivial.
pub fn null_space(a: &Matrix, rel_tol: f64) -> Matrix {
    let cols = a.ncols();
    let (sv, v) = full_right_svd(a);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let threshold = rel_tol * smax.max(f64::MIN_POSITIVE);
    let kernel: Vec<usize> = (0..cols).filter(|&i| sv[i] <= threshold).collect();
    let mut basis = Matrix::zeros(cols, kernel.len());
    for (c, &i) in kernel.iter().enumerate() {
        basis.set_column(c, &v.column(i));
    }
    basis
}

/// Moore–Penrose pseudo-inverse; singular values below `1e-10 σ_max` are dropped.
pub fn pinv(a: &Matrix) -> Matrix {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let threshold = 1e-10 * smax;
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V");
    let mut out = Matrix::zeros(a.ncols(), a.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > threshold && s > 0.0 {
            out += v_t.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    out
}

/// Numerical rank with the same relative threshold as [`pinv`].
pub fn rank(a: &Matrix) -> usize {
    let sv = a.singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > 1e-10 * smax && s > 0.0).count()
}

/// Central finite-difference step for coordinate value `v`.
#[inline]
pub fn fd_step(v: f64) -> f64 {
    1e-5 * v.abs().max(1.0)
}

/// Jacobian of `f` at `x` by central differences.
pub fn jacobian(f: impl Fn(&Vector) -> Vector, x: &Vector) -> Matrix {
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut xp = x.clone();
    for k in 0..n {
        let h = fd_step(x[k]);
        xp[k] = x[k] + h;
        let fp = f(&xp);
        xp[k] = x[k] - h;
        let fm = f(&xp);
        xp[k] = x[k];
        cols.push((fp - fm) / (2.0 * h));
    }
    Matrix::from_columns(&cols)
}

/// Derivative of a matrix field along coordinate `k` by central differences.
pub fn matrix_partial(f: impl Fn(&Vector) -> Matrix, x: &Vector, k: usize) -> Matrix {
    let h = fd_step(x[k]);
    let mut xp = x.clone();
    xp[k] = x[k] + h;
    let fp = f(&xp);
    xp[k] = x[k] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky_lower(a: &Matrix) -> Option<Matrix> {
    nalgebra::Cholesky::new(sym(a)).map(|c| c.l())
}

/// Solve a symmetric tridiagonal system with constant diagonal `d` and
/// off-diagonal `e` (Thomas algorithm), in place on `rhs`.
pub fn solve_toeplitz_tridiagonal(d: f64, e: f64, rhs: &mut [f64]) {
    let n = rhs.len();
    if n == 0 {
        return;
    }
    let mut c = vec![0.0; n];
    let mut denom = d;
    c[0] = e / denom;
    rhs[0] /= denom;
    for i in 1..n {
        denom = d - e * c[i - 1];
        c[i] = e / denom;
        rhs[i] = (rhs[i] - e * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_space_of_wide_matrix() {
        let a = Matrix::from_row_slice(2, 3, &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let n = null_space(&a, 1e-8);
        assert_eq!(n.ncols(), 1);
        assert!((a * &n).norm() < 1e-12);
        assert!((n.column(0).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn null_space_trivial_for_full_rank_square() {
        let a = Matrix::identity(3, 3);
        assert_eq!(null_space(&a, 1e-8).ncols(), 0);
    }

    #[test]
    fn pinv_of_tall_full_rank() {
        let b = Matrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let bp = pinv(&b);
        let id = &bp * &b;
        assert!((id - Matrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn tridiagonal_solve_matches_dense() {
        let n = 6;
        let mut dense = Matrix::zeros(n, n);
        for i in 0..n {
            dense[(i, i)] = 2.0;
            if i + 1 < n {
                dense[(i, i + 1)] = -1.0;
                dense[(i + 1, i)] = -1.0;
            }
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin() + 0.3).collect();
        let mut x = b.clone();
        solve_toeplitz_tridiagonal(2.0, -1.0, &mut x);
        let residual = dense * Vector::from_vec(x) - Vector::from_vec(b);
        assert!(residual.norm() < 1e-12);
    }

    #[test]
    fn jacobian_of_quadratic() {
        let f = |x: &Vector| Vector::from_vec(vec![x[0] * x[0], x[0] * x[1]]);
        let j = jacobian(f, &Vector::from_vec(vec![2.0, 3.0]));
        let expect = Matrix::from_row_slice(2, 2, &[4.0, 0.0, 3.0, 2.0]);
        assert!((j - expect).norm() < 1e-8);
    }
}
