//! Pooled Mahalanobis metric and discriminant score.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, MAX_CONDITION};
use crate::model::Direction;
use crate::sampler::Sample;
use crate::scalar::Scalar;

/// Relative ridge added once to an ill-conditioned pooled covariance.
pub const RIDGE: f64 = 1e-10;

/// Everything a matcher needs from the covariates' second-order structure.
#[derive(Debug, Clone)]
pub struct MatchMetric<T: Scalar> {
    pub covariance: DMatrix<T>,
    /// `L⁻¹` with `covariance = L L′`; Mahalanobis distance is the Euclidean
    /// distance between `L⁻¹x` vectors.
    pub whitener: DMatrix<T>,
    /// Unit-length discriminant coefficients, or zero when the group means coincide.
    pub discriminant: Direction<T>,
    /// Standard deviation of the discriminant score under `covariance`.
    pub score_sd: T,
    /// Whether the ridge repair was applied.
    pub ridged: bool,
}

impl<T: Scalar> MatchMetric<T> {
    fn build(covariance: DMatrix<T>, raw_discriminant: DVector<T>, ridged: bool) -> Result<Self> {
        let chol = Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::Conditioning("metric covariance is not positive definite".into()))?;
        let whitener = linalg::inverse_lower(&chol);
        let discriminant = Direction::normalized_or_zero(raw_discriminant, T::zero());
        let b = discriminant.coefficients();
        let score_sd = (b.transpose() * &covariance * b)[(0, 0)].max(T::zero()).sqrt();
        Ok(MatchMetric { covariance, whitener, discriminant, score_sd, ridged })
    }

    /// Rows mapped to whitened coordinates `L⁻¹x`.
    pub fn whiten(&self, rows: &DMatrix<T>) -> DMatrix<T> {
        rows * self.whitener.transpose()
    }

    /// Mahalanobis distance between two points.
    pub fn distance(&self, a: &DVector<T>, b: &DVector<T>) -> T {
        (&self.whitener * (a - b)).norm()
    }
}

/// Population covariance and discriminant used instead of sample estimates.
#[derive(Debug, Clone)]
pub struct OracleMetric<T: Scalar> {
    pub covariance: DMatrix<T>,
    pub discriminant: Direction<T>,
}

impl<T: Scalar> OracleMetric<T> {
    pub fn to_metric(&self) -> Result<MatchMetric<T>> {
        linalg::spd_cholesky(&self.covariance, "oracle covariance")?;
        MatchMetric::build(self.covariance.clone(), self.discriminant.coefficients().clone(), false)
    }
}

/// Pooled within-group covariance and `S⁻¹(x̄_t − x̄_c)` from the sample.
///
/// A covariance with condition number above `1e12` receives one ridge of
/// `1e-10·trace(S)/p` on the diagonal; if that does not help the sample is
/// rejected.
pub fn estimate_metric<T: Scalar>(sample: &Sample<T>) -> Result<MatchMetric<T>> {
    let p = sample.dimension();
    let n = sample.n_treated() + sample.n_control();
    if n <= p + 2 {
        return Err(Error::Config(format!(
            "estimating a {p}-dimensional metric needs more than {} units, found {n}",
            p + 2
        )));
    }
    let mut s = linalg::pooled_covariance(&sample.treated, &sample.control)?;
    let mut ridged = false;
    if linalg::condition_number(&s) > MAX_CONDITION {
        let bump = T::lit(RIDGE) * s.trace() / T::from_usize_lossy(p);
        for i in 0..p {
            s[(i, i)] += bump;
        }
        ridged = true;
        if !(linalg::condition_number(&s) <= MAX_CONDITION) {
            return Err(Error::Conditioning(format!(
                "pooled covariance stays singular after ridge (condition {:.3e})",
                linalg::condition_number(&s)
            )));
        }
    }
    let diff = linalg::column_means(&sample.treated) - linalg::column_means(&sample.control);
    let chol = Cholesky::new(s.clone())
        .ok_or_else(|| Error::Conditioning("pooled covariance is not positive definite".into()))?;
    let raw = chol.solve(&diff);
    MatchMetric::build(s, raw, ridged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn discriminant_solves_pooled_system() {
        let t = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 2.0, 1.0, 3.0, 1.0, 2.0, 3.0]);
        let c = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, -1.0, 1.0, 0.5, -1.0, 0.0, 2.0]);
        let sample = Sample::unlabelled(t.clone(), c.clone()).unwrap();
        let m = estimate_metric(&sample).unwrap();
        let s = linalg::pooled_covariance(&t, &c).unwrap();
        let diff = linalg::column_means(&t) - linalg::column_means(&c);
        let raw = s.try_inverse().unwrap() * diff;
        let expected = &raw / raw.norm();
        assert_relative_eq!(m.discriminant.coefficients(), &expected, epsilon = 1e-12);
        assert!(!m.ridged);
        let sd: f64 = (expected.transpose() * &m.covariance * &expected)[(0, 0)];
        let sd = sd.sqrt();
        assert_relative_eq!(m.score_sd, sd, epsilon = 1e-12);
    }

    #[test]
    fn collinear_columns_get_ridged() {
        // second column duplicates the first
        let t = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 4.0, 4.0]);
        let c = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, -1.0, -1.0, 0.5, 0.5]);
        let m = estimate_metric(&Sample::unlabelled(t, c).unwrap()).unwrap();
        assert!(m.ridged);
    }

    #[test]
    fn constant_data_is_rejected() {
        let t = DMatrix::from_element(3, 1, 1.0);
        let c = DMatrix::from_element(3, 1, 1.0);
        assert!(matches!(estimate_metric(&Sample::unlabelled(t, c).unwrap()), Err(Error::Conditioning(_))));
    }

    #[test]
    fn too_few_units() {
        let t = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        assert!(matches!(estimate_metric(&Sample::unlabelled(t, c).unwrap()), Err(Error::Config(_))));
    }
}
