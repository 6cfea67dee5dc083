//! DMPES populations: ellipsoidal mixture components with proportional
//! inner products and collinear discriminants.
//!
//! A [`DmpesModel`] stores each component's covariance directly (not an
//! abstract inner product), so samplers and moment formulas agree on scale.
//! [`validate_dmpes`] checks proportionality and collinearity; a valid model
//! can be brought to canonical form with [`canonicalize`], where component
//! `k` is spherical with covariance `σ_k² I` and center `δ_k U`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, ones};
use crate::scalar::Scalar;

/// Mahalanobis spread of the component centers below which the population
/// discriminant is taken to be zero.
pub const DEGENERATE_SPREAD: f64 = 1e-10;

/// Radial law of an ellipsoidal component. Every law is scaled so that the
/// component covariance equals the stored matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RadialLaw {
    Normal,
    StudentT { df: f64 },
    UniformBall,
}

impl RadialLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RadialLaw::StudentT { df } if !(df > 2.0) || !df.is_finite() => Err(Error::Structural(format!(
                "student-t radial law needs finite df > 2 for a finite covariance, got {df}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for RadialLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RadialLaw::Normal => write!(f, "normal"),
            RadialLaw::StudentT { df } => write!(f, "student-t(df={df})"),
            RadialLaw::UniformBall => write!(f, "uniform-ball"),
        }
    }
}

/// One ellipsoidally symmetric mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct Component<T: Scalar> {
    pub center: DVector<T>,
    /// Component covariance `Σ_k` (symmetric positive definite).
    pub covariance: DMatrix<T>,
    pub radial: RadialLaw,
}

impl<T: Scalar> Component<T> {
    pub fn new(center: DVector<T>, covariance: DMatrix<T>, radial: RadialLaw) -> Self {
        Component { center, covariance, radial }
    }

    /// Normal component `N(center, σ² I)`.
    pub fn spherical(center: DVector<T>, sigma2: T) -> Self {
        let p = center.len();
        Component { center, covariance: DMatrix::identity(p, p) * sigma2, radial: RadialLaw::Normal }
    }

    pub fn with_radial(mut self, radial: RadialLaw) -> Self {
        self.radial = radial;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Treated,
    Control,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Treated => "treated",
            Group::Control => "control",
        }
    }

    pub fn tag(self) -> u64 {
        match self {
            Group::Treated => 0,
            Group::Control => 1,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Partition of the component indices into treated and control sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    treated: Vec<usize>,
    control: Vec<usize>,
}

impl GroupAssignment {
    pub fn new(k: usize, mut treated: Vec<usize>, mut control: Vec<usize>) -> Result<Self> {
        treated.sort_unstable();
        control.sort_unstable();
        if treated.is_empty() || control.is_empty() {
            return Err(Error::Structural("both groups need at least one component".into()));
        }
        let mut seen = vec![false; k];
        for &i in treated.iter().chain(control.iter()) {
            if i >= k {
                return Err(Error::Structural(format!("component index {i} out of range for K = {k}")));
            }
            if seen[i] {
                return Err(Error::Structural(format!("component {i} assigned to more than one group")));
            }
            seen[i] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Structural(format!("component {missing} belongs to no group")));
        }
        Ok(GroupAssignment { treated, control })
    }

    pub fn from_labels(labels: &[Group]) -> Result<Self> {
        let pick = |g: Group| labels.iter().enumerate().filter(|(_, &l)| l == g).map(|(i, _)| i).collect();
        Self::new(labels.len(), pick(Group::Treated), pick(Group::Control))
    }

    pub fn members(&self, group: Group) -> &[usize] {
        match group {
            Group::Treated => &self.treated,
            Group::Control => &self.control,
        }
    }

    pub fn group_of(&self, component: usize) -> Group {
        if self.treated.binary_search(&component).is_ok() {
            Group::Treated
        } else {
            Group::Control
        }
    }

    pub fn k_treated(&self) -> usize {
        self.treated.len()
    }

    pub fn k_control(&self) -> usize {
        self.control.len()
    }
}

/// Mixture of ellipsoidal components split into treated and control groups.
#[derive(Debug, Clone, PartialEq)]
pub struct DmpesModel<T: Scalar> {
    dimension: usize,
    components: Vec<Component<T>>,
    weights: Vec<T>,
    groups: GroupAssignment,
}

impl<T: Scalar> DmpesModel<T> {
    /// Builds a model after structural checks. The DMPES conditions themselves
    /// are checked separately by [`validate_dmpes`].
    pub fn new(components: Vec<Component<T>>, weights: Vec<T>, groups: GroupAssignment) -> Result<Self> {
        let k = components.len();
        if k < 2 {
            return Err(Error::Structural(format!("need at least two components, found {k}")));
        }
        if weights.len() != k {
            return Err(Error::Dimension { expected: k, found: weights.len() });
        }
        let p = components[0].center.len();
        if p == 0 {
            return Err(Error::Structural("dimension must be positive".into()));
        }
        for (i, c) in components.iter().enumerate() {
            if c.center.len() != p {
                return Err(Error::Dimension { expected: p, found: c.center.len() });
            }
            linalg::check_square(&c.covariance, p, &format!("component {i} covariance"))?;
            linalg::spd_cholesky(&c.covariance, &format!("component {i} covariance"))?;
            c.radial.validate()?;
        }
        if weights.iter().any(|w| !(*w >= T::zero())) {
            return Err(Error::Structural("mixture weights must be nonnegative".into()));
        }
        let groups_ok = GroupAssignment::new(k, groups.treated.clone(), groups.control.clone())?;
        let model = DmpesModel { dimension: p, components, weights, groups: groups_ok };
        for g in [Group::Treated, Group::Control] {
            if model.group_weight(g) <= T::zero() {
                return Err(Error::Structural(format!("{g} group has zero total weight")));
            }
        }
        Ok(model)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn components(&self) -> &[Component<T>] {
        &self.components
    }

    pub fn component(&self, k: usize) -> &Component<T> {
        &self.components[k]
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn groups(&self) -> &GroupAssignment {
        &self.groups
    }

    fn group_weight(&self, group: Group) -> T {
        self.groups.members(group).iter().fold(T::zero(), |acc, &k| acc + self.weights[k])
    }

    /// Weights of the group's components renormalized to sum to one.
    pub fn within_group_weights(&self, group: Group) -> Vec<(usize, T)> {
        let total = self.group_weight(group);
        self.groups.members(group).iter().map(|&k| (k, self.weights[k] / total)).collect()
    }

    /// The model pushed through `x ↦ A x + b`.
    pub fn transformed(&self, map: &AffineMap<T>) -> Result<Self> {
        map.check_dimension(self.dimension)?;
        let components = self
            .components
            .iter()
            .map(|c| Component {
                center: &map.linear * &c.center + &map.offset,
                covariance: &map.linear * &c.covariance * map.linear.transpose(),
                radial: c.radial,
            })
            .collect();
        DmpesModel::new(components, self.weights.clone(), self.groups.clone())
    }

    /// Same model with each covariance multiplied by its own positive factor.
    pub fn with_scaled_covariances(&self, factors: &[T]) -> Result<Self> {
        let components = self
            .components
            .iter()
            .zip(factors)
            .map(|(c, &f)| Component { covariance: &c.covariance * f, ..c.clone() })
            .collect();
        DmpesModel::new(components, self.weights.clone(), self.groups.clone())
    }
}

/// Affine map `x ↦ linear·x + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap<T: Scalar> {
    pub linear: DMatrix<T>,
    pub offset: DVector<T>,
}

impl<T: Scalar> AffineMap<T> {
    pub fn new(linear: DMatrix<T>, offset: DVector<T>) -> Result<Self> {
        let p = offset.len();
        linalg::check_square(&linear, p, "affine linear part")?;
        Ok(AffineMap { linear, offset })
    }

    pub fn identity(p: usize) -> Self {
        AffineMap { linear: DMatrix::identity(p, p), offset: DVector::zeros(p) }
    }

    pub fn dimension(&self) -> usize {
        self.offset.len()
    }

    fn check_dimension(&self, p: usize) -> Result<()> {
        if self.dimension() != p {
            return Err(Error::Dimension { expected: self.dimension(), found: p });
        }
        Ok(())
    }

    pub fn apply_point(&self, x: &DVector<T>) -> DVector<T> {
        &self.linear * x + &self.offset
    }

    /// `self ∘ inner`: first `inner`, then `self`.
    pub fn compose(&self, inner: &AffineMap<T>) -> AffineMap<T> {
        AffineMap { linear: &self.linear * &inner.linear, offset: &self.linear * &inner.offset + &self.offset }
    }

    pub fn inverse(&self) -> Result<AffineMap<T>> {
        let inv = self
            .linear
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Conditioning("affine map is not invertible".into()))?;
        let offset = -(&inv * &self.offset);
        Ok(AffineMap { linear: inv, offset })
    }
}

/// Applies `x ↦ linear·x + offset` to every row of an `n × p` data matrix.
pub fn apply_affine<T: Scalar>(map: &AffineMap<T>, data: &DMatrix<T>) -> Result<DMatrix<T>> {
    if data.ncols() != map.dimension() {
        return Err(Error::Dimension { expected: map.dimension(), found: data.ncols() });
    }
    let mut out = data * map.linear.transpose();
    for mut row in out.row_iter_mut() {
        row += map.offset.transpose();
    }
    Ok(out)
}

/// A standardized linear combination: unit coefficient vector, or zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction<T: Scalar> {
    coefficients: DVector<T>,
}

impl<T: Scalar> Direction<T> {
    /// Normalizes `v`; vectors with norm at or below `tiny` become the zero direction.
    pub fn normalized_or_zero(v: DVector<T>, tiny: T) -> Self {
        let n = v.norm();
        if n <= tiny {
            Direction { coefficients: DVector::zeros(v.len()) }
        } else {
            Direction { coefficients: v / n }
        }
    }

    /// Normalizes a nonzero vector.
    pub fn unit(v: DVector<T>) -> Option<Self> {
        let n = v.norm();
        (n > T::zero()).then(|| Direction { coefficients: v / n })
    }

    pub fn zero(p: usize) -> Self {
        Direction { coefficients: DVector::zeros(p) }
    }

    /// `U/√p`, the discriminant in canonical coordinates.
    pub fn along_ones(p: usize) -> Self {
        Direction { coefficients: ones::<T>(p) / T::from_usize_lossy(p).sqrt() }
    }

    pub fn coefficients(&self) -> &DVector<T> {
        &self.coefficients
    }

    pub fn dimension(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients.iter().all(|&c| c == T::zero())
    }

    /// `β′x`.
    pub fn project(&self, x: &DVector<T>) -> T {
        self.coefficients.dot(x)
    }
}

/// Which DMPES condition a violation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Condition {
    /// Proportional inner products.
    Proportional,
    /// Collinear best linear discriminants.
    Collinear,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Proportional => write!(f, "proportional inner products (Sigma_i = r_ij Sigma_j)"),
            Condition::Collinear => write!(f, "collinear discriminants (Sigma^-1 (mu_i - mu_j) parallel)"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub condition: Condition,
    pub detail: String,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProportionalityCheck {
    pub component: usize,
    pub reference: usize,
    /// Least-squares `r` with `Σ_component ≈ r Σ_reference`.
    pub ratio: f64,
    pub relative_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiscriminantCosine {
    pub first: (usize, usize),
    pub second: (usize, usize),
    pub cosine: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub proportionality: Vec<ProportionalityCheck>,
    pub cosines: Vec<DiscriminantCosine>,
    /// Largest Mahalanobis distance between two centers, under component 0.
    pub center_spread: f64,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violates(&self, condition: Condition) -> bool {
        self.violations.iter().any(|v| v.condition == condition)
    }
}

/// Checks proportionality of all covariances against component 0 and
/// pairwise parallelism of every best linear discriminant `Σ⁻¹(μ_i − μ_j)`.
pub fn validate_dmpes<T: Scalar>(model: &DmpesModel<T>) -> Result<ValidationReport> {
    let tol = T::STRUCTURAL_TOL;
    let reference = &model.components[0].covariance;
    let ref_norm2 = reference.dot(reference);
    let mut violations = Vec::new();

    let mut proportionality = Vec::new();
    for (i, c) in model.components.iter().enumerate().skip(1) {
        let ratio = c.covariance.dot(reference) / ref_norm2;
        let residual = ((&c.covariance - reference * ratio).norm() / c.covariance.norm()).as_f64();
        if residual > tol || ratio <= T::zero() {
            violations.push(Violation {
                condition: Condition::Proportional,
                detail: format!("component {i} is not proportional to component 0 (residual {residual:.3e})"),
                magnitude: residual,
            });
        }
        proportionality.push(ProportionalityCheck {
            component: i,
            reference: 0,
            ratio: ratio.as_f64(),
            relative_residual: residual,
        });
    }

    let chol = linalg::spd_cholesky(reference, "component 0 covariance")?;
    let k = model.k();
    let mut discriminants = Vec::new();
    let mut spread = 0.0f64;
    for i in 0..k {
        for j in (i + 1)..k {
            let diff = &model.components[j].center - &model.components[i].center;
            let d = chol.solve(&diff);
            let maha = diff.dot(&d).max(T::zero()).sqrt().as_f64();
            spread = spread.max(maha);
            discriminants.push(((i, j), d, maha));
        }
    }
    let zero_cut = DEGENERATE_SPREAD.max(tol * spread);
    let nonzero: Vec<_> = discriminants.iter().filter(|(_, _, m)| *m > zero_cut).collect();
    let mut cosines = Vec::new();
    let mut worst = 1.0f64;
    let mut worst_pair = None;
    for a in 0..nonzero.len() {
        for b in (a + 1)..nonzero.len() {
            let (pa, da, _) = nonzero[a];
            let (pb, db, _) = nonzero[b];
            let cos = (da.dot(db) / (da.norm() * db.norm())).as_f64();
            if cos.abs() < worst {
                worst = cos.abs();
                worst_pair = Some((*pa, *pb));
            }
            cosines.push(DiscriminantCosine { first: *pa, second: *pb, cosine: cos });
        }
    }
    if worst < 1.0 - tol {
        let (pa, pb) = worst_pair.expect("worst pair recorded");
        violations.push(Violation {
            condition: Condition::Collinear,
            detail: format!("discriminants of pairs {pa:?} and {pb:?} are not parallel (|cosine| = {worst:.6})"),
            magnitude: 1.0 - worst,
        });
    }

    Ok(ValidationReport { proportionality, cosines, center_spread: spread, violations })
}

/// Affine map to canonical coordinates together with the canonical invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalMap<T: Scalar> {
    pub map: AffineMap<T>,
    /// `σ_k²`, with component 0 scaled to one.
    pub sigmas2: Vec<T>,
    /// `δ_k`, with the weighted control-group center at zero.
    pub deltas: Vec<T>,
    /// True when all centers coincide (population discriminant is zero).
    pub degenerate: bool,
}

impl<T: Scalar> CanonicalMap<T> {
    /// `(σ_k², δ_k)` pairs, in component order.
    pub fn invariants(&self) -> Vec<(T, T)> {
        self.sigmas2.iter().copied().zip(self.deltas.iter().copied()).collect()
    }

    pub fn apply(&self, data: &DMatrix<T>) -> Result<DMatrix<T>> {
        apply_affine(&self.map, data)
    }
}

/// Maps a valid DMPES model to canonical form.
///
/// Whitens with the inverse Cholesky factor of component 0, then reflects
/// the whitened discriminant onto `U/√p`. The offset puts the weighted
/// control-group center at the origin, and the orientation makes the weighted
/// treated `δ` at least the control one (ties: the lowest-index component
/// with nonzero `δ` is positive). The result is unique up to rotations
/// orthogonal to `U`, so only the invariants `(σ_k², δ_k)` are comparable.
pub fn canonicalize<T: Scalar>(model: &DmpesModel<T>) -> Result<(CanonicalMap<T>, DmpesModel<T>)> {
    let report = validate_dmpes(model)?;
    if !report.is_valid() {
        let detail: Vec<_> = report.violations.iter().map(|v| v.detail.clone()).collect();
        return Err(Error::NotDmpes(detail.join("; ")));
    }
    let p = model.dimension;
    let sigma0 = &model.components[0].covariance;
    let cond = linalg::condition_number(sigma0);
    if cond > linalg::MAX_CONDITION {
        return Err(Error::Conditioning(format!("component 0 covariance has condition number {cond:.3e}")));
    }
    let chol = linalg::spd_cholesky(sigma0, "component 0 covariance")?;
    let whiten = linalg::inverse_lower(&chol);

    let weighted_center = |group: Group| {
        model
            .within_group_weights(group)
            .into_iter()
            .fold(DVector::zeros(p), |acc: DVector<T>, (k, w)| acc + &model.components[k].center * w)
    };
    let control_center = weighted_center(Group::Control);
    let treated_center = weighted_center(Group::Treated);

    let whitened: Vec<DVector<T>> = model.components.iter().map(|c| &whiten * (&c.center - &control_center)).collect();

    // Widest pair of whitened centers fixes the discriminant line.
    let mut best = (T::zero(), DVector::zeros(p));
    for i in 0..whitened.len() {
        for j in (i + 1)..whitened.len() {
            let d = &whitened[j] - &whitened[i];
            let n = d.norm();
            if n > best.0 {
                best = (n, d);
            }
        }
    }
    let degenerate = best.0.as_f64() < DEGENERATE_SPREAD;
    let target = ones::<T>(p) / T::from_usize_lossy(p).sqrt();
    let rotation = if degenerate {
        DMatrix::identity(p, p)
    } else {
        let mut u = &best.1 / best.0;
        let gap = u.dot(&(&whiten * (&treated_center - &control_center)));
        let tie = gap.abs().as_f64() <= T::STRUCTURAL_TOL * best.0.as_f64();
        let flip = if tie {
            whitened
                .iter()
                .map(|w| u.dot(w))
                .find(|proj| proj.abs().as_f64() > T::STRUCTURAL_TOL * best.0.as_f64())
                .is_some_and(|proj| proj < T::zero())
        } else {
            gap < T::zero()
        };
        if flip {
            u = -u;
        }
        linalg::householder(&u, &target)
    };

    let linear = &rotation * &whiten;
    let offset = -(&linear * &control_center);
    let map = AffineMap { linear, offset };
    let p_t = T::from_usize_lossy(p);

    let mut sigmas2 = Vec::with_capacity(model.k());
    let mut deltas = Vec::with_capacity(model.k());
    let mut components = Vec::with_capacity(model.k());
    for (i, c) in model.components.iter().enumerate() {
        let cov = &map.linear * &c.covariance * map.linear.transpose();
        let s2 = cov.trace() / p_t;
        let center = map.apply_point(&c.center);
        let delta = if degenerate { T::zero() } else { center.sum() / p_t };
        let spherical = DMatrix::identity(p, p) * s2;
        let cov_res = ((&cov - &spherical).norm() / spherical.norm()).as_f64();
        let center_res = (&center - ones::<T>(p) * delta).norm().as_f64() / (1.0 + center.norm().as_f64());
        if cov_res > T::STRUCTURAL_TOL.sqrt() || (!degenerate && center_res > T::STRUCTURAL_TOL.sqrt()) {
            return Err(Error::Conditioning(format!(
                "component {i} is not canonical after mapping (covariance residual {cov_res:.2e}, center residual {center_res:.2e})"
            )));
        }
        sigmas2.push(s2);
        deltas.push(delta);
        components.push(Component { center: ones::<T>(p) * delta, covariance: spherical, radial: c.radial });
    }
    let canonical = DmpesModel::new(components, model.weights.clone(), model.groups.clone())?;
    Ok((CanonicalMap { map, sigmas2, deltas, degenerate }, canonical))
}

/// Population mean and covariance of a group, with within-group
/// renormalized weights `α̃`:
/// `mean = Σ α̃_k μ_k`, `cov = Σ α̃_k Σ_k + Σ α̃_k (μ_k − μ̄)(μ_k − μ̄)′`.
pub fn population_group_moments<T: Scalar>(model: &DmpesModel<T>, group: Group) -> (DVector<T>, DMatrix<T>) {
    let p = model.dimension;
    let weights = model.within_group_weights(group);
    let mut mean = DVector::zeros(p);
    for &(k, w) in &weights {
        mean += &model.components[k].center * w;
    }
    let mut cov = DMatrix::zeros(p, p);
    for &(k, w) in &weights {
        let c = &model.components[k];
        let d = &c.center - &mean;
        cov += (&c.covariance + &d * d.transpose()) * w;
    }
    (mean, cov)
}

/// Standardized population discriminant in the model's own coordinates:
/// the pullback of `U/√p` from canonical form, renormalized to unit length.
/// Zero when all centers coincide.
pub fn population_discriminant<T: Scalar>(model: &DmpesModel<T>) -> Result<Direction<T>> {
    let (canon, _) = canonicalize(model)?;
    Ok(discriminant_from_map(&canon))
}

pub(crate) fn discriminant_from_map<T: Scalar>(canon: &CanonicalMap<T>) -> Direction<T> {
    let p = canon.map.dimension();
    if canon.degenerate {
        return Direction::zero(p);
    }
    let u = ones::<T>(p);
    Direction::unit(canon.map.linear.transpose() * u).expect("invertible canonical map")
}

/// JSON schema for model files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub dimension: usize,
    pub components: Vec<ComponentFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentFile {
    pub center: Vec<f64>,
    /// Row-major `p × p` covariance.
    pub covariance: Vec<f64>,
    #[serde(default = "default_radial")]
    pub radial: RadialLaw,
    pub weight: f64,
    pub group: Group,
}

fn default_radial() -> RadialLaw {
    RadialLaw::Normal
}

impl ModelFile {
    /// Builds the model (structural checks only).
    pub fn to_model<T: Scalar>(&self) -> Result<DmpesModel<T>> {
        let p = self.dimension;
        let mut components = Vec::with_capacity(self.components.len());
        let mut weights = Vec::with_capacity(self.components.len());
        let mut labels = Vec::with_capacity(self.components.len());
        for (i, c) in self.components.iter().enumerate() {
            if c.center.len() != p {
                return Err(Error::Structural(format!(
                    "component {i}: center has length {}, expected {p}",
                    c.center.len()
                )));
            }
            if c.covariance.len() != p * p {
                return Err(Error::Structural(format!(
                    "component {i}: covariance has {} entries, expected {}",
                    c.covariance.len(),
                    p * p
                )));
            }
            components.push(Component {
                center: DVector::from_iterator(p, c.center.iter().map(|&x| T::lit(x))),
                covariance: DMatrix::from_row_iterator(p, p, c.covariance.iter().map(|&x| T::lit(x))),
                radial: c.radial,
            });
            weights.push(T::lit(c.weight));
            labels.push(c.group);
        }
        DmpesModel::new(components, weights, GroupAssignment::from_labels(&labels)?)
    }

    /// Builds the model and rejects it unless it satisfies the DMPES conditions.
    pub fn load<T: Scalar>(&self) -> Result<(DmpesModel<T>, ValidationReport)> {
        let model = self.to_model::<T>()?;
        let report = validate_dmpes(&model)?;
        if !report.is_valid() {
            let detail: Vec<_> = report.violations.iter().map(|v| v.detail.clone()).collect();
            return Err(Error::NotDmpes(detail.join("; ")));
        }
        Ok((model, report))
    }

    pub fn from_model<T: Scalar>(model: &DmpesModel<T>) -> Self {
        let components = model
            .components
            .iter()
            .enumerate()
            .map(|(k, c)| ComponentFile {
                center: c.center.iter().map(|x| x.as_f64()).collect(),
                covariance: c.covariance.transpose().iter().map(|x| x.as_f64()).collect(),
                radial: c.radial,
                weight: model.weights[k].as_f64(),
                group: model.groups.group_of(k),
            })
            .collect();
        ModelFile { dimension: model.dimension, components }
    }
}

/// Convenience constructor for models already in canonical form:
/// component `k` is normal with center `δ_k U` and covariance `σ_k² I`.
pub fn canonical_normal_model<T: Scalar>(
    p: usize,
    deltas: &[f64],
    sigmas2: &[f64],
    weights: &[f64],
    groups: &[Group],
) -> Result<DmpesModel<T>> {
    let components =
        deltas.iter().zip(sigmas2).map(|(&d, &s)| Component::spherical(ones::<T>(p) * T::lit(d), T::lit(s))).collect();
    DmpesModel::new(components, weights.iter().map(|&w| T::lit(w)).collect(), GroupAssignment::from_labels(groups)?)
}
