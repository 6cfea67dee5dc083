//! Diagnostics in canonical coordinates: projection on the discriminant `Z`,
//! the `Y = ρZ + √(1−ρ²)W` split of a direction, exchangeable-structure
//! fits, matched moments, percent bias reduction and variance-ratio
//! decompositions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::matching::MatchResult;
use crate::model::{Direction, Group};
use crate::sampler::Sample;
use crate::scalar::Scalar;

/// Norm below which a residual direction counts as zero.
const DEGENERATE_NORM: f64 = 1e-12;

/// `U′x/√p`, the discriminant coordinate in canonical form.
pub fn project_z<T: Scalar>(x: &DVector<T>) -> T {
    Direction::<T>::along_ones(x.len()).project(x)
}

/// Split of a unit direction `y = a·z + b·w` with unit `z`, unit `w`
/// orthogonal to `z` in the chosen metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition<T: Scalar> {
    /// Correlation of `Y` and `Z`.
    pub rho: T,
    pub z: Direction<T>,
    pub w: Direction<T>,
    /// Coefficient of `z` in the split of `y`.
    pub z_weight: T,
    /// Coefficient of `w` in the split of `y`.
    pub w_weight: T,
    /// `Z` is the zero direction, so `Y = W` and `ρ = 0`.
    pub degenerate_z: bool,
}

impl<T: Scalar> Decomposition<T> {
    /// `z_weight·z + w_weight·w`.
    pub fn reconstruct(&self) -> DVector<T> {
        self.z.coefficients() * self.z_weight + self.w.coefficients() * self.w_weight
    }

    /// The same split with `ρ` measured as a correlation under covariance `m`.
    /// Valid when `z` and `w` are orthogonal under `m`.
    pub fn in_metric(&self, m: &DMatrix<T>) -> Self {
        let quad = |v: &DVector<T>| (v.transpose() * m * v)[(0, 0)];
        let y = self.reconstruct();
        let vy = quad(&y);
        let rho = if self.degenerate_z || vy <= T::zero() {
            T::zero()
        } else {
            let part = self.z_weight * self.z_weight * quad(self.z.coefficients());
            let r = (part / vy).max(T::zero()).min(T::one()).sqrt();
            if self.z_weight < T::zero() {
                -r
            } else {
                r
            }
        };
        Decomposition { rho, ..self.clone() }
    }
}

/// Euclidean split of a unit `y` against a unit (or zero) `z`.
pub fn decompose_direction<T: Scalar>(y: &Direction<T>, z: &Direction<T>) -> Decomposition<T> {
    let p = y.dimension();
    if z.is_zero() {
        return Decomposition {
            rho: T::zero(),
            z: z.clone(),
            w: y.clone(),
            z_weight: T::zero(),
            w_weight: T::one(),
            degenerate_z: true,
        };
    }
    let rho = y.coefficients().dot(z.coefficients());
    let residual = y.coefficients() - z.coefficients() * rho;
    let norm = residual.norm();
    if norm.as_f64() <= DEGENERATE_NORM {
        let rho = if rho < T::zero() { -T::one() } else { T::one() };
        return Decomposition {
            rho,
            z: z.clone(),
            w: Direction::zero(p),
            z_weight: rho,
            w_weight: T::zero(),
            degenerate_z: false,
        };
    }
    Decomposition {
        rho,
        z: z.clone(),
        w: Direction::unit(residual).expect("nonzero residual"),
        z_weight: rho,
        w_weight: norm,
        degenerate_z: false,
    }
}

/// Split of `y` against `z` with orthogonality and correlation taken under
/// the positive definite covariance `m`: `w ∝ y − (y′mz / z′mz)·z`.
pub fn decompose_direction_in_metric<T: Scalar>(
    y: &Direction<T>,
    z: &Direction<T>,
    m: &DMatrix<T>,
) -> Decomposition<T> {
    let p = y.dimension();
    if z.is_zero() {
        return decompose_direction(y, z);
    }
    let yc = y.coefficients();
    let zc = z.coefficients();
    let mz = m * zc;
    let a = yc.dot(&mz) / zc.dot(&mz);
    let residual = yc - zc * a;
    let norm = residual.norm();
    if norm.as_f64() <= DEGENERATE_NORM {
        let rho = if a < T::zero() { -T::one() } else { T::one() };
        return Decomposition {
            rho,
            z: z.clone(),
            w: Direction::zero(p),
            z_weight: a,
            w_weight: T::zero(),
            degenerate_z: false,
        };
    }
    let dec = Decomposition {
        rho: T::zero(),
        z: z.clone(),
        w: Direction::unit(residual).expect("nonzero residual"),
        z_weight: a,
        w_weight: norm,
        degenerate_z: false,
    };
    dec.in_metric(m)
}

/// Least-squares fit of `k(I + cUU′)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StructureFit {
    pub k: f64,
    pub c: f64,
    /// `‖m − k(I + cUU′)‖_F / ‖m‖_F`.
    pub residual: f64,
    /// `c < −1/p`: the fitted matrix is not positive semidefinite. Reported, not clipped.
    pub c_below_bound: bool,
}

impl StructureFit {
    /// `k·c`, the common off-diagonal value.
    pub fn off_diagonal(&self) -> f64 {
        self.k * self.c
    }
}

/// Fits `k(I + cUU′)` to a symmetric matrix: `k = ā − b̄` and `k·c = b̄`, where
/// `ā` and `b̄` are the mean diagonal and mean off-diagonal entries.
pub fn fit_exchangeable<T: Scalar>(m: &DMatrix<T>) -> Result<StructureFit> {
    let p = m.nrows();
    linalg::check_square(m, p, "exchangeable fit")?;
    if p == 0 {
        return Err(Error::Structural("exchangeable fit of an empty matrix".into()));
    }
    if linalg::asymmetry(m).as_f64() > T::STRUCTURAL_TOL {
        return Err(Error::Structural("exchangeable fit needs a symmetric matrix".into()));
    }
    let a_bar = (0..p).map(|i| m[(i, i)].as_f64()).sum::<f64>() / p as f64;
    let b_bar = if p > 1 {
        let mut s = 0.0;
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    s += m[(i, j)].as_f64();
                }
            }
        }
        s / (p * (p - 1)) as f64
    } else {
        0.0
    };
    let k = a_bar - b_bar;
    let c = if k != 0.0 { b_bar / k } else { 0.0 };
    let norm = m.norm().as_f64();
    let mut err = 0.0;
    for i in 0..p {
        for j in 0..p {
            let fitted = if i == j { a_bar } else { b_bar };
            let d = m[(i, j)].as_f64() - fitted;
            err += d * d;
        }
    }
    let residual = if norm > 0.0 { err.sqrt() / norm } else { 0.0 };
    Ok(StructureFit { k, c, residual, c_below_bound: c < -1.0 / p as f64 })
}

/// Mean and (when at least two units) covariance of a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMoments<T: Scalar> {
    pub n: usize,
    pub mean: DVector<T>,
    pub covariance: Option<DMatrix<T>>,
}

impl<T: Scalar> RowMoments<T> {
    pub fn of(rows: &DMatrix<T>) -> Self {
        RowMoments { n: rows.nrows(), mean: linalg::column_means(rows), covariance: linalg::sample_covariance(rows) }
    }
}

/// Moments of the units selected by a match or subsample, overall and by
/// component of origin.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSummary<T: Scalar> {
    pub treated: RowMoments<T>,
    pub control: RowMoments<T>,
    /// `(component, group, moments)` for every component label present
    /// among the selected units, in increasing label order.
    pub components: Vec<(usize, Group, RowMoments<T>)>,
}

impl<T: Scalar> MomentSummary<T> {
    /// `x̄_t − x̄_c`.
    pub fn mean_gap(&self) -> DVector<T> {
        &self.treated.mean - &self.control.mean
    }

    pub fn component(&self, k: usize) -> Option<&RowMoments<T>> {
        self.components.iter().find(|c| c.0 == k).map(|c| &c.2)
    }
}

/// Exact sample moments (denominator `n − 1`) of the selected units.
pub fn matched_moments<T: Scalar>(sample: &Sample<T>, result: &MatchResult<T>) -> Result<MomentSummary<T>> {
    let check = |idx: &[usize], n: usize| -> Result<()> {
        match idx.iter().find(|&&i| i >= n) {
            Some(&i) => Err(Error::Config(format!("selected row {i} out of range for {n} rows"))),
            None => Ok(()),
        }
    };
    check(&result.treated, sample.n_treated())?;
    check(&result.control, sample.n_control())?;
    let mut treated_idx = result.treated.clone();
    treated_idx.sort_unstable();
    let mut control_idx = result.control.clone();
    control_idx.sort_unstable();
    let t = linalg::select_rows(&sample.treated, &treated_idx);
    let c = linalg::select_rows(&sample.control, &control_idx);
    let mut components = Vec::new();
    for (group, idx, labels, rows) in [
        (Group::Treated, &treated_idx, &sample.treated_labels, &sample.treated),
        (Group::Control, &control_idx, &sample.control_labels, &sample.control),
    ] {
        let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for &i in idx.iter() {
            by_label.entry(labels[i]).or_default().push(i);
        }
        for (k, members) in by_label {
            components.push((k, group, RowMoments::of(&linalg::select_rows(rows, &members))));
        }
    }
    components.sort_by_key(|c| (c.0, c.1.tag()));
    Ok(MomentSummary { treated: RowMoments::of(&t), control: RowMoments::of(&c), components })
}

/// Which branch of the bias-reduction comparison applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasCase {
    /// Nonzero random-design `Z` gap: ratios are comparable.
    Ratio,
    /// `Z` is the zero direction: every numerator and denominator vanishes.
    ZeroDiscriminant,
    /// `Z` exists but its random-design gap is statistically zero; only
    /// `E(Ȳ_m gap) = ρ·E(Z̄_m gap)` is reported.
    ZeroZGap,
}

/// Expected mean gaps over replications with the covariance of their estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct GapMoments<T: Scalar> {
    /// Estimated `E(X̄_mt − X̄_mc)`.
    pub matched: DVector<T>,
    /// Estimated `E(X̄_rt − X̄_rc)`.
    pub random: DVector<T>,
    /// Covariance of the estimate of `random` (already divided by the replication count).
    pub random_cov: DMatrix<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasReduction {
    pub case: BiasCase,
    /// `100·(1 − matched/random)` along `Y`; `None` outside the ratio case.
    pub pbr_y: Option<f64>,
    pub pbr_z: Option<f64>,
    /// `ρ·E(Z̄_mt − Z̄_mc)`, the prediction for the matched `Y` gap.
    pub rho_times_z_gap: f64,
    pub matched_y_gap: f64,
    pub random_z_gap: f64,
    pub random_z_gap_se: f64,
}

/// `100·(1 − matched/random)`.
pub fn pbr(matched: f64, random: f64) -> f64 {
    100.0 * (1.0 - matched / random)
}

/// Percent bias reduction along `Y` and along `Z`. When the random-design
/// `Z` gap is within `se_multiplier` standard errors of zero, or `Z` is
/// zero, the ratio form is replaced by the diagnostic `ρ·E(Z̄_m gap)`.
pub fn percent_bias_reduction<T: Scalar>(
    gaps: &GapMoments<T>,
    decomposition: &Decomposition<T>,
    se_multiplier: f64,
) -> BiasReduction {
    let y = decomposition.reconstruct();
    let z = decomposition.z.coefficients();
    let matched_y = y.dot(&gaps.matched).as_f64();
    let random_y = y.dot(&gaps.random).as_f64();
    let matched_z = z.dot(&gaps.matched).as_f64();
    let random_z = z.dot(&gaps.random).as_f64();
    let random_z_se = (z.transpose() * &gaps.random_cov * z)[(0, 0)].as_f64().max(0.0).sqrt();
    let rho = decomposition.rho.as_f64();
    let case = if decomposition.degenerate_z {
        BiasCase::ZeroDiscriminant
    } else if random_z.abs() < se_multiplier * random_z_se {
        BiasCase::ZeroZGap
    } else {
        BiasCase::Ratio
    };
    let (pbr_y, pbr_z) = match case {
        BiasCase::Ratio => (Some(pbr(matched_y, random_y)), Some(pbr(matched_z, random_z))),
        _ => (None, None),
    };
    BiasReduction {
        case,
        pbr_y,
        pbr_z,
        rho_times_z_gap: rho * matched_z,
        matched_y_gap: matched_y,
        random_z_gap: random_z,
        random_z_gap_se: random_z_se,
    }
}

/// Matched-to-random ratios along `Y`, `Z` and `W`, and the combination
/// `ρ²·z_ratio + (1 − ρ²)·w_ratio` that should reproduce the `Y` ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioDecomposition {
    pub rho: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// `None` when `Z` is the zero direction.
    pub z_ratio: Option<f64>,
    /// `None` when `Y` lies along `Z`.
    pub w_ratio: Option<f64>,
}

fn quad<T: Scalar>(m: &DMatrix<T>, v: &DVector<T>) -> f64 {
    (v.transpose() * m * v)[(0, 0)].as_f64()
}

/// Ratio decomposition for any pair of matched/random second-moment
/// matrices (variances of mean gaps or expected sample covariances).
pub fn ratio_decomposition<T: Scalar>(
    matched: &DMatrix<T>,
    random: &DMatrix<T>,
    decomposition: &Decomposition<T>,
) -> Result<RatioDecomposition> {
    let ratio = |v: &DVector<T>| -> Option<f64> {
        let den = quad(random, v);
        (den > 0.0).then(|| quad(matched, v) / den)
    };
    let zero_variance = || Error::Conditioning("random-design variance is zero along a tested direction".into());
    let y = decomposition.reconstruct();
    let lhs = ratio(&y).ok_or_else(zero_variance)?;
    let rho = decomposition.rho.as_f64();
    let rho2 = rho * rho;
    let z_ratio = if decomposition.degenerate_z { None } else { ratio(decomposition.z.coefficients()) };
    let w_ratio = if decomposition.w.is_zero() { None } else { ratio(decomposition.w.coefficients()) };
    // a part with zero random-design variance must also carry zero weight
    if (rho2 > 0.0 && z_ratio.is_none()) || (rho2 < 1.0 && w_ratio.is_none()) {
        return Err(zero_variance());
    }
    let rhs = rho2 * z_ratio.unwrap_or(0.0) + (1.0 - rho2) * w_ratio.unwrap_or(0.0);
    Ok(RatioDecomposition { rho, lhs, rhs, z_ratio, w_ratio })
}

/// Ratio identity for `var(Ȳ_mt − Ȳ_mc) / var(Ȳ_rt − Ȳ_rc)`, with `matched`
/// and `random` the covariance matrices of the two mean-gap vectors.
pub fn variance_ratio_decomposition<T: Scalar>(
    matched: &DMatrix<T>,
    random: &DMatrix<T>,
    decomposition: &Decomposition<T>,
) -> Result<RatioDecomposition> {
    ratio_decomposition(matched, random, decomposition)
}

/// Ratio identity for `E ν_mk(Y) / E ν_rk(Y)` within one component, with
/// `matched` and `random` the expected sample covariance matrices of that
/// component's matched and randomly sampled units.
pub fn component_variance_ratios<T: Scalar>(
    matched: &DMatrix<T>,
    random: &DMatrix<T>,
    decomposition: &Decomposition<T>,
) -> Result<RatioDecomposition> {
    ratio_decomposition(matched, random, decomposition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dir(v: &[f64]) -> Direction<f64> {
        Direction::unit(DVector::from_column_slice(v)).unwrap()
    }

    #[test]
    fn z_projection_examples() {
        assert_relative_eq!(project_z(&DVector::from_element(4, 1.0)), 2.0, epsilon = 1e-15);
        assert_relative_eq!(project_z(&DVector::from_element(7, 1.0)), 7f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(project_z(&DVector::from_vec(vec![1.0, -1.0, 0.0])), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn y_equal_to_z() {
        let z = dir(&[1.0, 1.0]);
        let d = decompose_direction(&z, &z);
        assert_eq!(d.rho, 1.0);
        assert!(d.w.is_zero());
    }

    #[test]
    fn y_orthogonal_to_z() {
        let d = decompose_direction(&dir(&[1.0, -1.0]), &dir(&[1.0, 1.0]));
        assert_relative_eq!(d.rho, 0.0, epsilon = 1e-15);
        assert_relative_eq!(d.w.coefficients(), dir(&[1.0, -1.0]).coefficients(), epsilon = 1e-15);
    }

    #[test]
    fn planar_example() {
        let d = decompose_direction(&dir(&[1.0, 0.0]), &dir(&[1.0, 1.0]));
        assert_relative_eq!(d.rho, 0.5f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(d.w.coefficients(), dir(&[1.0, -1.0]).coefficients(), epsilon = 1e-15);
    }

    #[test]
    fn zero_z_means_y_is_w() {
        let y = dir(&[0.3, 0.4]);
        let d = decompose_direction(&y, &Direction::zero(2));
        assert!(d.degenerate_z);
        assert_eq!(d.rho, 0.0);
        assert_eq!(d.w, y);
    }

    #[test]
    fn metric_split_is_orthogonal_in_the_metric() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 1.5]);
        let y = dir(&[0.2, -0.5, 0.9]);
        let z = dir(&[1.0, 1.0, 1.0]);
        let d = decompose_direction_in_metric(&y, &z, &m);
        let cross = (d.z.coefficients().transpose() * &m * d.w.coefficients())[(0, 0)];
        assert_relative_eq!(cross, 0.0, epsilon = 1e-14);
        assert_relative_eq!(d.reconstruct(), y.coefficients().clone(), epsilon = 1e-14);
        let yv = y.coefficients();
        let zv = z.coefficients();
        let corr = (yv.transpose() * &m * zv)[(0, 0)]
            / ((yv.transpose() * &m * yv)[(0, 0)] * (zv.transpose() * &m * zv)[(0, 0)]).sqrt();
        assert_relative_eq!(d.rho, corr, epsilon = 1e-14);
    }

    #[test]
    fn exchangeable_fits() {
        let f = fit_exchangeable(&DMatrix::<f64>::identity(4, 4)).unwrap();
        assert_eq!((f.k, f.c, f.residual), (1.0, 0.0, 0.0));
        let f = fit_exchangeable(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert_relative_eq!(f.k, 1.0);
        assert_relative_eq!(f.c, 1.0);
        assert_relative_eq!(f.residual, 0.0);
        let f = fit_exchangeable(&DMatrix::from_row_slice(2, 2, &[1.0, -2.0, -2.0, 1.0])).unwrap();
        assert!(f.c_below_bound);
        assert!(fit_exchangeable(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn exchangeable_fit_matches_grid_search() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.6, 0.9, 0.1, 0.9, 2.3]);
        let f = fit_exchangeable(&m).unwrap();
        // brute-force least squares over (diag, off-diag) levels
        let sse = |a: f64, b: f64| {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    let d = m[(i, j)] - if i == j { a } else { b };
                    s += d * d;
                }
            }
            s
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=400 {
            for j in 0..=400 {
                let a = 1.5 + i as f64 * 0.002;
                let b = j as f64 * 0.002;
                let e = sse(a, b);
                if e < best.0 {
                    best = (e, a, b);
                }
            }
        }
        assert_relative_eq!(f.k, best.1 - best.2, epsilon = 2e-3);
        assert_relative_eq!(f.off_diagonal(), best.2, epsilon = 2e-3);
        assert!(f.residual > 0.0);
        assert_relative_eq!(f.residual, best.0.sqrt() / m.norm(), epsilon = 1e-3);
    }

    #[test]
    fn moments_of_full_selection_and_single_pair() {
        let s = Sample::new(
            DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 7.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 2.0]),
            vec![0, 0, 1],
            vec![2, 2],
        )
        .unwrap();
        let all = MatchResult {
            treated: vec![2, 0, 1],
            control: vec![1, 0],
            distances: vec![],
            unmatched_treated: vec![],
            backfilled: vec![],
        };
        let m = matched_moments(&s, &all).unwrap();
        assert_eq!(m.treated.mean, linalg::column_means(&s.treated));
        assert_eq!(m.treated.covariance, linalg::sample_covariance(&s.treated));
        assert_eq!(m.components.len(), 3);
        assert!(m.component(1).unwrap().covariance.is_none());
        let pair = MatchResult {
            treated: vec![1],
            control: vec![0],
            distances: vec![1.0],
            unmatched_treated: vec![],
            backfilled: vec![],
        };
        let m = matched_moments(&s, &pair).unwrap();
        assert_eq!(m.treated.mean, DVector::from_vec(vec![3.0, 4.0]));
        assert!(m.treated.covariance.is_none() && m.control.covariance.is_none());
    }

    #[test]
    fn bias_reduction_branches() {
        let z = Direction::along_ones(2);
        let y = dir(&[1.0, 0.0]);
        let dec = decompose_direction(&y, &z);
        let gaps = GapMoments {
            matched: DVector::from_element(2, 0.0),
            random: DVector::from_element(2, 1.0),
            random_cov: DMatrix::identity(2, 2) * 1e-4,
        };
        let b = percent_bias_reduction(&gaps, &dec, 3.0);
        assert_eq!(b.case, BiasCase::Ratio);
        assert_relative_eq!(b.pbr_y.unwrap(), 100.0);
        let same = GapMoments { matched: gaps.random.clone(), ..gaps.clone() };
        assert_relative_eq!(percent_bias_reduction(&same, &dec, 3.0).pbr_y.unwrap(), 0.0);
        let zero = decompose_direction(&y, &Direction::zero(2));
        assert_eq!(percent_bias_reduction(&gaps, &zero, 3.0).case, BiasCase::ZeroDiscriminant);
        let tiny = GapMoments { random: DVector::from_element(2, 1e-4), ..gaps };
        assert_eq!(percent_bias_reduction(&tiny, &dec, 3.0).case, BiasCase::ZeroZGap);
    }

    #[test]
    fn ratio_identity_collapses_along_z_and_w() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 2.0]);
        let r = DMatrix::identity(2, 2);
        let z = Direction::along_ones(2);
        let along = ratio_decomposition(&m, &r, &decompose_direction(&z, &z)).unwrap();
        assert_relative_eq!(along.lhs, along.z_ratio.unwrap(), epsilon = 1e-14);
        let w = dir(&[1.0, -1.0]);
        let across = ratio_decomposition(&m, &r, &decompose_direction(&w, &z)).unwrap();
        assert_relative_eq!(across.lhs, across.w_ratio.unwrap(), epsilon = 1e-14);
        let same = ratio_decomposition(&r, &r, &decompose_direction(&dir(&[0.3, 0.7]), &z)).unwrap();
        assert_relative_eq!(same.lhs, 1.0, epsilon = 1e-14);
        assert_relative_eq!(same.rhs, 1.0, epsilon = 1e-14);
        assert!(ratio_decomposition(&m, &DMatrix::zeros(2, 2), &decompose_direction(&w, &z)).is_err());
    }

    #[test]
    fn exchangeable_matrices_satisfy_the_ratio_identity() {
        let p = 4;
        let u = linalg::ones::<f64>(p);
        let matched = DMatrix::identity(p, p) * 0.7 + &u * u.transpose() * 0.2;
        let random = DMatrix::identity(p, p) * 1.3;
        let y = dir(&[0.1, -0.4, 0.8, 0.2]);
        let r = ratio_decomposition(&matched, &random, &decompose_direction(&y, &Direction::along_ones(p))).unwrap();
        assert_relative_eq!(r.lhs, r.rhs, epsilon = 1e-13);
    }

    proptest! {
        #[test]
        fn split_reconstructs_and_is_orthogonal(
            y in proptest::collection::vec(-1.0f64..1.0, 5),
            z in proptest::collection::vec(-1.0f64..1.0, 5),
        ) {
            let yv = DVector::from_vec(y);
            let zv = DVector::from_vec(z);
            prop_assume!(yv.norm() > 1e-3 && zv.norm() > 1e-3);
            let y = Direction::unit(yv).unwrap();
            let z = Direction::unit(zv).unwrap();
            let d = decompose_direction(&y, &z);
            let rebuilt = d.z.coefficients() * d.rho + d.w.coefficients() * (1.0 - d.rho * d.rho).max(0.0).sqrt();
            prop_assert!((rebuilt - y.coefficients()).amax() <= 1e-10);
            prop_assert!(d.w.coefficients().dot(d.z.coefficients()).abs() <= 1e-10);
            prop_assert!(d.rho.abs() <= 1.0 + 1e-15);
        }

        #[test]
        fn exchangeable_fit_recovers_parameters(k in 0.1f64..5.0, c in -0.2f64..3.0, p in 2usize..7) {
            let u = linalg::ones::<f64>(p);
            let m = (DMatrix::identity(p, p) + &u * u.transpose() * c) * k;
            let f = fit_exchangeable(&m).unwrap();
            prop_assert!((f.k - k).abs() <= 1e-10 * k.max(1.0));
            prop_assert!((f.c - c).abs() <= 1e-9);
            prop_assert!(f.residual <= 1e-12);
        }
    }
}
