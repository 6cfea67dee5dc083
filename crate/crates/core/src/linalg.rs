//! Small dense linear-algebra helpers on top of nalgebra.
//!
//! Data matrices are stored units-by-variables (`n × p`), one row per unit.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Condition number above which a covariance is treated as numerically singular.
pub const MAX_CONDITION: f64 = 1e12;

/// The all-ones vector `U` of length `p`.
pub fn ones<T: Scalar>(p: usize) -> DVector<T> {
    DVector::from_element(p, T::one())
}

/// `‖a − a′‖_F / ‖a‖_F`, zero for the zero matrix.
pub fn asymmetry<T: Scalar>(m: &DMatrix<T>) -> T {
    let norm = m.norm();
    if norm == T::zero() {
        return T::zero();
    }
    (m - m.transpose()).norm() / norm
}

pub fn check_square<T: Scalar>(m: &DMatrix<T>, p: usize, what: &str) -> Result<()> {
    if m.nrows() != p || m.ncols() != p {
        return Err(Error::Structural(format!("{what}: expected {p}x{p} matrix, found {}x{}", m.nrows(), m.ncols())));
    }
    Ok(())
}

/// Symmetric positive-definite check returning the Cholesky factor.
pub fn spd_cholesky<T: Scalar>(m: &DMatrix<T>, what: &str) -> Result<Cholesky<T, Dyn>> {
    if asymmetry(m).as_f64() > T::STRUCTURAL_TOL {
        return Err(Error::Structural(format!("{what} is not symmetric")));
    }
    let sym = (m + m.transpose()) * T::lit(0.5);
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().any(|&l| l <= T::zero()) {
        return Err(Error::Structural(format!("{what} is not positive definite")));
    }
    Cholesky::new(sym).ok_or_else(|| Error::Structural(format!("{what} is not positive definite")))
}

/// Ratio of extreme eigenvalues of a symmetric matrix (infinite when singular).
pub fn condition_number<T: Scalar>(m: &DMatrix<T>) -> f64 {
    let eig = SymmetricEigen::new((m + m.transpose()) * T::lit(0.5));
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for l in eig.eigenvalues.iter() {
        let a = l.as_f64().abs();
        lo = lo.min(a);
        hi = hi.max(a);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Inverse of the lower Cholesky factor, `L⁻¹` with `Σ = L L′`.
pub fn inverse_lower<T: Scalar>(chol: &Cholesky<T, Dyn>) -> DMatrix<T> {
    let l = chol.l();
    let n = l.nrows();
    l.solve_lower_triangular(&DMatrix::identity(n, n)).expect("Cholesky factor has a positive diagonal")
}

/// Householder reflection `H` with `H·from = to` for unit vectors `from`, `to`.
pub fn householder<T: Scalar>(from: &DVector<T>, to: &DVector<T>) -> DMatrix<T> {
    let p = from.len();
    let w = from - to;
    let ww = w.dot(&w);
    if ww.as_f64() <= 1e-30 {
        return DMatrix::identity(p, p);
    }
    DMatrix::identity(p, p) - (&w * w.transpose()) * (T::lit(2.0) / ww)
}

/// Column means of a units-by-variables matrix.
pub fn column_means<T: Scalar>(data: &DMatrix<T>) -> DVector<T> {
    let n = data.nrows();
    let mut mean = DVector::zeros(data.ncols());
    if n == 0 {
        return mean;
    }
    for row in data.row_iter() {
        mean += row.transpose();
    }
    mean / T::from_usize_lossy(n)
}

/// Sum of squares and cross products about the column means.
pub fn scatter<T: Scalar>(data: &DMatrix<T>) -> DMatrix<T> {
    let p = data.ncols();
    let mean = column_means(data);
    let mut s = DMatrix::zeros(p, p);
    for row in data.row_iter() {
        let d = row.transpose() - &mean;
        s += &d * d.transpose();
    }
    s
}

/// Sample covariance with denominator `n − 1`; `None` for fewer than two rows.
pub fn sample_covariance<T: Scalar>(data: &DMatrix<T>) -> Option<DMatrix<T>> {
    let n = data.nrows();
    if n < 2 {
        return None;
    }
    Some(scatter(data) / T::from_usize_lossy(n - 1))
}

/// Pooled within-group covariance `((n_t−1)S_t + (n_c−1)S_c)/(n_t+n_c−2)`.
pub fn pooled_covariance<T: Scalar>(treated: &DMatrix<T>, control: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = treated.nrows() + control.nrows();
    if n < 3 {
        return Err(Error::Config(format!("pooled covariance needs at least 3 units, found {n}")));
    }
    Ok((scatter(treated) + scatter(control)) / T::from_usize_lossy(n - 2))
}

/// Selects the given rows of `data`.
pub fn select_rows<T: Scalar>(data: &DMatrix<T>, rows: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), data.ncols(), |i, j| data[(rows[i], j)])
}

/// Converts between scalar types through `f64`.
pub fn cast_matrix<A: Scalar, B: Scalar>(m: &DMatrix<A>) -> DMatrix<B> {
    m.map(|x| B::lit(x.as_f64()))
}

pub fn cast_vector<A: Scalar, B: Scalar>(v: &DVector<A>) -> DVector<B> {
    v.map(|x| B::lit(x.as_f64()))
}
