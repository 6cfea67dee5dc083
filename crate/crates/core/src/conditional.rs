//! Special/remainder covariate splits.
//!
//! A conditional model draws the special covariates `s` from a finite
//! support and the remainder as `x_r = B′s + η`, where `η` follows an
//! ellipsoidal component law that does not depend on `s`. The common
//! regression `B` is what makes the conditional covariances proportional.
//! Canonical coordinates list the special columns first, followed by the
//! canonical form of `η`.

use std::collections::HashSet;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::decompose::{fit_exchangeable, Decomposition, StructureFit};
use crate::error::{Error, Result};
use crate::linalg::{self, MAX_CONDITION};
use crate::model::{
    canonicalize, validate_dmpes, CanonicalMap, Component, Direction, DmpesModel, Group, GroupAssignment, RadialLaw,
    ValidationReport,
};
use crate::sampler::{group_counts, sample_component, substream, tag, AllocationRule, Sample, SeedRecord};
use crate::scalar::Scalar;

/// Sorted complement of `special` in `0..p`, after checking the indices.
pub fn remainder_columns(p: usize, special: &[usize]) -> Result<Vec<usize>> {
    let mut seen = HashSet::new();
    for &j in special {
        if j >= p {
            return Err(Error::Config(format!("special column {j} out of range for p = {p}")));
        }
        if !seen.insert(j) {
            return Err(Error::Config(format!("special column {j} listed twice")));
        }
    }
    Ok((0..p).filter(|j| !seen.contains(j)).collect())
}

fn select_columns<T: Scalar>(m: &DMatrix<T>, cols: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

/// Replaces the remainder columns by residuals from the pooled within-group
/// least-squares regression on the special columns. Returns the new sample
/// and the estimated `B` (`s × r`).
///
/// Special columns without within-group variation carry no information and
/// get zero regression rows.
pub fn residualize_remainder<T: Scalar>(sample: &Sample<T>, special: &[usize]) -> Result<(Sample<T>, DMatrix<T>)> {
    let p = sample.dimension();
    let rest = remainder_columns(p, special)?;
    let s = special.len();
    let r = rest.len();
    if s == 0 {
        return Ok((sample.clone(), DMatrix::zeros(0, r)));
    }
    let n = sample.n_treated() + sample.n_control();
    if n <= s + 2 {
        return Err(Error::Config(format!("regression on {s} special columns needs more than {} units", s + 2)));
    }
    let mut cols = special.to_vec();
    cols.extend_from_slice(&rest);
    let scatter = linalg::scatter(&select_columns(&sample.treated, &cols))
        + linalg::scatter(&select_columns(&sample.control, &cols));
    let mut active = Vec::new();
    for i in 0..s {
        let raw: f64 = [&sample.treated, &sample.control]
            .iter()
            .map(|m| m.column(special[i]).iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>())
            .sum();
        if scatter[(i, i)].as_f64() > 1e-12 * raw.max(f64::MIN_POSITIVE) {
            active.push(i);
        }
    }
    let mut b = DMatrix::zeros(s, r);
    if !active.is_empty() {
        let a = active.len();
        let sss = DMatrix::from_fn(a, a, |i, j| scatter[(active[i], active[j])]);
        let ssr = DMatrix::from_fn(a, r, |i, j| scatter[(active[i], s + j)]);
        if linalg::condition_number(&sss) > MAX_CONDITION {
            return Err(Error::Conditioning("special columns are collinear".into()));
        }
        let chol = Cholesky::new(sss).ok_or_else(|| Error::Conditioning("special columns are collinear".into()))?;
        let solved = chol.solve(&ssr);
        for (i, &row) in active.iter().enumerate() {
            b.set_row(row, &solved.row(i));
        }
    }
    let residualize = |m: &DMatrix<T>| -> Result<DMatrix<T>> {
        let fitted = select_columns(m, special) * &b;
        let mut out = m.clone();
        for (j, &c) in rest.iter().enumerate() {
            for i in 0..m.nrows() {
                out[(i, c)] -= fitted[(i, j)];
            }
        }
        Ok(out)
    };
    Ok((sample.map_rows(residualize)?, b))
}

/// Remainder law of one component: `η` ellipsoidal, `s` on the shared support.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalComponent<T: Scalar> {
    /// Probability of each support point.
    pub special_probs: Vec<T>,
    /// Center of `η = x_r − B′s`.
    pub center: DVector<T>,
    /// Covariance of `η` (the conditional covariance of `x_r` given `s`).
    pub covariance: DMatrix<T>,
    pub radial: RadialLaw,
}

/// Conditionally DMPES population.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDmpesModel<T: Scalar> {
    dimension: usize,
    special_columns: Vec<usize>,
    support: Vec<DVector<T>>,
    regression: DMatrix<T>,
    components: Vec<ConditionalComponent<T>>,
    weights: Vec<T>,
    groups: GroupAssignment,
}

impl<T: Scalar> ConditionalDmpesModel<T> {
    /// Structural checks only; see [`validate_conditional`] for the
    /// proportionality and collinearity conditions.
    pub fn new(
        dimension: usize,
        special_columns: Vec<usize>,
        support: Vec<DVector<T>>,
        regression: DMatrix<T>,
        components: Vec<ConditionalComponent<T>>,
        weights: Vec<T>,
        groups: GroupAssignment,
    ) -> Result<Self> {
        let rest = remainder_columns(dimension, &special_columns)?;
        let (s, r) = (special_columns.len(), rest.len());
        if s == 0 || r == 0 {
            return Err(Error::Structural("conditional models need special and remainder columns".into()));
        }
        if support.is_empty() || support.iter().any(|v| v.len() != s) {
            return Err(Error::Structural(format!("special support points must have length {s}")));
        }
        if regression.shape() != (s, r) {
            return Err(Error::Structural(format!(
                "regression must be {s}x{r}, found {}x{}",
                regression.nrows(),
                regression.ncols()
            )));
        }
        for (k, c) in components.iter().enumerate() {
            if c.special_probs.len() != support.len() {
                return Err(Error::Structural(format!("component {k}: one probability per support point is required")));
            }
            let total = c.special_probs.iter().fold(T::zero(), |a, &x| a + x);
            if c.special_probs.iter().any(|x| !(*x >= T::zero())) || (total - T::one()).abs().as_f64() > 1e-9 {
                return Err(Error::Structural(format!("component {k}: special probabilities must be a distribution")));
            }
        }
        let model =
            ConditionalDmpesModel { dimension, special_columns, support, regression, components, weights, groups };
        // the remainder model runs the per-component structural checks
        model.remainder_model()?;
        Ok(model)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn s(&self) -> usize {
        self.special_columns.len()
    }

    pub fn r(&self) -> usize {
        self.dimension - self.s()
    }

    pub fn special_columns(&self) -> &[usize] {
        &self.special_columns
    }

    pub fn remainder_columns(&self) -> Vec<usize> {
        remainder_columns(self.dimension, &self.special_columns).expect("validated at construction")
    }

    pub fn support(&self) -> &[DVector<T>] {
        &self.support
    }

    pub fn regression(&self) -> &DMatrix<T> {
        &self.regression
    }

    pub fn components(&self) -> &[ConditionalComponent<T>] {
        &self.components
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn groups(&self) -> &GroupAssignment {
        &self.groups
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Mixture of the `η` laws, an ordinary `r`-dimensional model.
    pub fn remainder_model(&self) -> Result<DmpesModel<T>> {
        let comps =
            self.components.iter().map(|c| Component::new(c.center.clone(), c.covariance.clone(), c.radial)).collect();
        DmpesModel::new(comps, self.weights.clone(), self.groups.clone())
    }

    /// Mean and covariance of `s` within component `k`.
    pub fn special_moments(&self, k: usize) -> (DVector<T>, DMatrix<T>) {
        let s = self.s();
        let probs = &self.components[k].special_probs;
        let mut mean = DVector::zeros(s);
        for (pt, &w) in self.support.iter().zip(probs) {
            mean += pt * w;
        }
        let mut cov = DMatrix::zeros(s, s);
        for (pt, &w) in self.support.iter().zip(probs) {
            let d = pt - &mean;
            cov += &d * d.transpose() * w;
        }
        (mean, cov)
    }

    /// Mean and covariance of component `k` with the special columns first:
    /// `E x_r = B′E s + μ_η`, `cov(s, x_r) = cov(s)B`, `cov(x_r) = B′cov(s)B + Σ_η`.
    pub fn component_moments(&self, k: usize) -> (DVector<T>, DMatrix<T>) {
        let (s, r) = (self.s(), self.r());
        let (ms, cs) = self.special_moments(k);
        let b = &self.regression;
        let c = &self.components[k];
        let mr = b.transpose() * &ms + &c.center;
        let cross = &cs * b;
        let crr = b.transpose() * &cs * b + &c.covariance;
        let mut mean = DVector::zeros(s + r);
        mean.rows_mut(0, s).copy_from(&ms);
        mean.rows_mut(s, r).copy_from(&mr);
        let mut cov = DMatrix::zeros(s + r, s + r);
        cov.view_mut((0, 0), (s, s)).copy_from(&cs);
        cov.view_mut((0, s), (s, r)).copy_from(&cross);
        cov.view_mut((s, 0), (r, s)).copy_from(&cross.transpose());
        cov.view_mut((s, s), (r, r)).copy_from(&crr);
        (mean, cov)
    }

    /// Rows of component `k`, specials first then remainder.
    fn draw_component(
        &self,
        k: usize,
        n: usize,
        group: Group,
        master_seed: u64,
        replication: u64,
    ) -> Result<DMatrix<T>> {
        let c = &self.components[k];
        let (s, r) = (self.s(), self.r());
        let eta_comp = Component::new(c.center.clone(), c.covariance.clone(), c.radial);
        let mut rows_rng = substream(master_seed, &[replication, group.tag(), tag::ROWS, k as u64]);
        let eta = sample_component(&eta_comp, n, &mut rows_rng)?;
        let probs: Vec<f64> = c.special_probs.iter().map(|x| x.as_f64()).collect();
        let picker = WeightedIndex::new(&probs).map_err(|e| Error::Structural(format!("special law: {e}")))?;
        let mut special_rng = substream(master_seed, &[replication, group.tag(), tag::SPECIAL, k as u64]);
        let mut out = DMatrix::zeros(n, s + r);
        for i in 0..n {
            let pt = &self.support[picker.sample(&mut special_rng)];
            let xr = self.regression.transpose() * pt + eta.row(i).transpose();
            out.view_mut((i, 0), (1, s)).copy_from(&pt.transpose());
            out.view_mut((i, s), (1, r)).copy_from(&xr.transpose());
        }
        Ok(out)
    }

    /// Places special-first rows into the model's column layout.
    fn to_layout(&self, rows: &DMatrix<T>) -> DMatrix<T> {
        let mut order = self.special_columns.clone();
        order.extend(self.remainder_columns());
        let mut out = DMatrix::zeros(rows.nrows(), self.dimension);
        for (j, &c) in order.iter().enumerate() {
            out.set_column(c, &rows.column(j));
        }
        out
    }
}

/// Conditions on the remainder laws: proportional conditional covariances
/// and parallel conditional discriminants.
pub fn validate_conditional<T: Scalar>(model: &ConditionalDmpesModel<T>) -> Result<ValidationReport> {
    validate_dmpes(&model.remainder_model()?)
}

/// Draws a panel from a conditional model, in the model's column layout.
pub fn draw_conditional_panel<T: Scalar>(
    model: &ConditionalDmpesModel<T>,
    n_treated: usize,
    n_control: usize,
    rule: &AllocationRule,
    master_seed: u64,
    replication: u64,
) -> Result<Sample<T>> {
    if n_treated == 0 || n_control == 0 {
        return Err(Error::Config("panel sizes must be at least one".into()));
    }
    let remainder = model.remainder_model()?;
    if let AllocationRule::Fixed(counts) = rule {
        if counts.len() != model.k() {
            return Err(Error::Config(format!(
                "fixed allocation lists {} counts for {} components",
                counts.len(),
                model.k()
            )));
        }
    }
    let mut parts = Vec::with_capacity(2);
    for (group, n) in [(Group::Treated, n_treated), (Group::Control, n_control)] {
        let weighted = remainder.within_group_weights(group);
        let members: Vec<usize> = weighted.iter().map(|w| w.0).collect();
        let weights: Vec<f64> = weighted.iter().map(|w| w.1.as_f64()).collect();
        let counts = group_counts(rule, &members, &weights, n, group, master_seed, replication);
        if counts.iter().sum::<usize>() != n {
            return Err(Error::Config(format!("allocation for the {group} group does not sum to {n}")));
        }
        let mut rows = DMatrix::zeros(n, model.dimension);
        let mut labels = Vec::with_capacity(n);
        let mut at = 0;
        for (&k, &count) in members.iter().zip(&counts) {
            let block = model.draw_component(k, count, group, master_seed, replication)?;
            rows.rows_mut(at, count).copy_from(&block);
            labels.extend(std::iter::repeat_n(k, count));
            at += count;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(master_seed, &[replication, group.tag(), tag::SHUFFLE]));
        let shuffled = model.to_layout(&linalg::select_rows(&rows, &order));
        parts.push((shuffled, order.iter().map(|&i| labels[i]).collect::<Vec<_>>()));
    }
    let (control, control_labels) = parts.pop().expect("two groups");
    let (treated, treated_labels) = parts.pop().expect("two groups");
    Ok(Sample { treated, control, treated_labels, control_labels, seed: Some(SeedRecord { master_seed, replication }) })
}

/// Map from the model's layout to conditional canonical coordinates
/// `(s, A(x_r − B′s) + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalCanonicalMap<T: Scalar> {
    pub special_columns: Vec<usize>,
    pub remainder_columns: Vec<usize>,
    pub regression: DMatrix<T>,
    /// Canonical map of the `η` mixture.
    pub remainder: CanonicalMap<T>,
}

impl<T: Scalar> ConditionalCanonicalMap<T> {
    pub fn s(&self) -> usize {
        self.special_columns.len()
    }

    /// `(σ_k², δ_k)` of the remainder block.
    pub fn invariants(&self) -> Vec<(T, T)> {
        self.remainder.invariants()
    }

    pub fn apply(&self, data: &DMatrix<T>) -> Result<DMatrix<T>> {
        let p = self.special_columns.len() + self.remainder_columns.len();
        if data.ncols() != p {
            return Err(Error::Dimension { expected: p, found: data.ncols() });
        }
        let s = select_columns(data, &self.special_columns);
        let eta = select_columns(data, &self.remainder_columns) - &s * &self.regression;
        let canon = self.remainder.apply(&eta)?;
        let mut out = DMatrix::zeros(data.nrows(), p);
        out.columns_mut(0, s.ncols()).copy_from(&s);
        out.columns_mut(s.ncols(), canon.ncols()).copy_from(&canon);
        Ok(out)
    }
}

/// Conditional canonical form: specials first and unchanged, remainder
/// residualized on the specials and mapped so every `η` law is `σ_k² I`
/// centered at `δ_k U`.
pub fn conditional_canonicalize<T: Scalar>(
    model: &ConditionalDmpesModel<T>,
) -> Result<(ConditionalCanonicalMap<T>, ConditionalDmpesModel<T>)> {
    let (canon, remainder) = canonicalize(&model.remainder_model()?)?;
    let s = model.s();
    let components = model
        .components
        .iter()
        .zip(remainder.components())
        .map(|(c, rc)| ConditionalComponent {
            special_probs: c.special_probs.clone(),
            center: rc.center.clone(),
            covariance: rc.covariance.clone(),
            radial: rc.radial,
        })
        .collect();
    let canonical = ConditionalDmpesModel::new(
        model.dimension,
        (0..s).collect(),
        model.support.clone(),
        DMatrix::zeros(s, model.r()),
        components,
        model.weights.clone(),
        model.groups.clone(),
    )?;
    let map = ConditionalCanonicalMap {
        special_columns: model.special_columns.clone(),
        remainder_columns: model.remainder_columns(),
        regression: model.regression.clone(),
        remainder: canon,
    };
    Ok((map, canonical))
}

/// `Y = ρ·𝒵 + √(1−ρ²)·𝒲` with `𝒵` in the span of the specials and `Z`, and
/// `𝒲` orthogonal to that span. Coefficients refer to canonical conditional
/// coordinates (specials first).
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptDecomposition<T: Scalar> {
    pub s: usize,
    pub rho: T,
    /// Unit coefficients `ψ` of `𝒵` (zero if `Y` has no component in the span).
    pub psi: DVector<T>,
    /// Unit coefficients `γ` of `𝒲` (zero if `Y` lies in the span).
    pub gamma: DVector<T>,
    pub psi_weight: T,
    pub gamma_weight: T,
    /// The remainder discriminant is zero, so `𝒵` uses the specials only.
    pub degenerate_z: bool,
}

impl<T: Scalar> ScriptDecomposition<T> {
    /// As a generic split, for the ratio and bias diagnostics.
    pub fn as_decomposition(&self) -> Decomposition<T> {
        let p = self.psi.len();
        let unit = |v: &DVector<T>| Direction::unit(v.clone()).unwrap_or_else(|| Direction::zero(p));
        Decomposition {
            rho: self.rho,
            z: unit(&self.psi),
            w: unit(&self.gamma),
            z_weight: self.psi_weight,
            w_weight: self.gamma_weight,
            degenerate_z: self.psi_weight == T::zero(),
        }
    }

    /// Same split with `ρ` measured under covariance `m`.
    pub fn in_metric(&self, m: &DMatrix<T>) -> Self {
        let rho = self.as_decomposition().in_metric(m).rho;
        ScriptDecomposition { rho, ..self.clone() }
    }

    /// `(max |γ^(s)|, |γ^(r)′ψ^(r)|, max deviation of ψ^(r) from a multiple of U)`.
    pub fn lemma_residuals(&self) -> (f64, f64, f64) {
        let s = self.s;
        let r = self.psi.len() - s;
        let gs = self.gamma.rows(0, s).amax().as_f64();
        let gr = self.gamma.rows(s, r);
        let pr = self.psi.rows(s, r);
        let cross = gr.dot(&pr).abs().as_f64();
        let level = pr.sum() / T::from_usize_lossy(r);
        let spread = pr.iter().map(|&x| (x - level).abs().as_f64()).fold(0.0, f64::max);
        (gs, cross, spread)
    }
}

/// Splits a unit `y` (canonical conditional coordinates, `s` specials first)
/// along and orthogonal to span(specials, `Z = U′x_r/√r`). When
/// `degenerate_z` the span is that of the specials alone. `ρ` is the
/// Euclidean correlation; use [`ScriptDecomposition::in_metric`] for others.
pub fn script_decompose<T: Scalar>(y: &Direction<T>, s: usize, degenerate_z: bool) -> Result<ScriptDecomposition<T>> {
    let p = y.dimension();
    if s >= p {
        return Err(Error::Config(format!("need 0 <= s < p, got s = {s}, p = {p}")));
    }
    let r = p - s;
    let yc = y.coefficients();
    let mut psi = DVector::zeros(p);
    psi.rows_mut(0, s).copy_from(&yc.rows(0, s));
    let b = yc.rows(s, r).into_owned();
    let u = linalg::ones::<T>(r) / T::from_usize_lossy(r).sqrt();
    let along = if degenerate_z { DVector::zeros(r) } else { &u * u.dot(&b) };
    psi.rows_mut(s, r).copy_from(&along);
    let mut gamma = DVector::zeros(p);
    gamma.rows_mut(s, r).copy_from(&(b - along));
    let psi_weight = psi.norm();
    let gamma_weight = gamma.norm();
    let tiny = T::lit(1e-12);
    let (psi, psi_weight) =
        if psi_weight <= tiny { (DVector::zeros(p), T::zero()) } else { (&psi / psi_weight, psi_weight) };
    let (gamma, gamma_weight) =
        if gamma_weight <= tiny { (DVector::zeros(p), T::zero()) } else { (&gamma / gamma_weight, gamma_weight) };
    Ok(ScriptDecomposition { s, rho: psi_weight, psi, gamma, psi_weight, gamma_weight, degenerate_z })
}

/// Fit of `[[free, CU′], [UC′, k(I + c₀UU′)]]` to a matrix with the special
/// block first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockStructureFit {
    /// Reported as-is; no structure is imposed on it.
    pub special_block: Vec<Vec<f64>>,
    /// Row means `c_i` of the cross block.
    pub cross: Vec<f64>,
    /// `‖cross − CU′‖_F / ‖m‖_F`.
    pub cross_residual: f64,
    pub remainder: StructureFit,
    /// `‖remainder − k(I + c₀UU′)‖_F / ‖m‖_F`.
    pub remainder_residual: f64,
}

pub fn fit_block_structure<T: Scalar>(m: &DMatrix<T>, s: usize, r: usize) -> Result<BlockStructureFit> {
    let p = s + r;
    linalg::check_square(m, p, "block structure fit")?;
    if r == 0 {
        return Err(Error::Config("block structure fit needs a remainder block".into()));
    }
    if linalg::asymmetry(m).as_f64() > T::STRUCTURAL_TOL {
        return Err(Error::Structural("block structure fit needs a symmetric matrix".into()));
    }
    let total = m.norm().as_f64();
    let rel = |x: f64| if total > 0.0 { x / total } else { 0.0 };
    let special_block = (0..s).map(|i| (0..s).map(|j| m[(i, j)].as_f64()).collect()).collect();
    let mut cross = Vec::with_capacity(s);
    let mut cross_err = 0.0;
    for i in 0..s {
        let row: Vec<f64> = (s..p).map(|j| m[(i, j)].as_f64()).collect();
        let c = row.iter().sum::<f64>() / r as f64;
        cross_err += row.iter().map(|x| (x - c) * (x - c)).sum::<f64>();
        cross.push(c);
    }
    let block = m.view((s, s), (r, r)).into_owned();
    let remainder = fit_exchangeable(&block)?;
    let remainder_residual = rel(remainder.residual * block.norm().as_f64());
    Ok(BlockStructureFit { special_block, cross, cross_residual: rel(cross_err.sqrt()), remainder, remainder_residual })
}

/// JSON schema for conditional models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalModelFile {
    pub dimension: usize,
    pub special: SpecialFile,
    pub components: Vec<ConditionalComponentFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecialFile {
    pub columns: Vec<usize>,
    /// Support points, each of length `s`.
    pub support: Vec<Vec<f64>>,
    /// Row-major `s × r` regression of the remainder on the specials.
    #[serde(default)]
    pub regression: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalComponentFile {
    pub special_probs: Vec<f64>,
    /// Conditional center of the remainder given the specials, net of `B′s`.
    pub center: Vec<f64>,
    /// Row-major `r × r` conditional covariance.
    pub covariance: Vec<f64>,
    #[serde(default = "normal")]
    pub radial: RadialLaw,
    pub weight: f64,
    pub group: Group,
}

fn normal() -> RadialLaw {
    RadialLaw::Normal
}

impl ConditionalModelFile {
    pub fn to_model<T: Scalar>(&self) -> Result<ConditionalDmpesModel<T>> {
        let p = self.dimension;
        let s = self.special.columns.len();
        let r = p.checked_sub(s).ok_or_else(|| Error::Structural("more special columns than dimensions".into()))?;
        let support = self
            .special
            .support
            .iter()
            .map(|v| DVector::from_iterator(v.len(), v.iter().map(|&x| T::lit(x))))
            .collect();
        let regression = match &self.special.regression {
            None => DMatrix::zeros(s, r),
            Some(v) if v.len() == s * r => DMatrix::from_row_iterator(s, r, v.iter().map(|&x| T::lit(x))),
            Some(v) => {
                return Err(Error::Structural(format!("regression has {} entries, expected {}", v.len(), s * r)));
            }
        };
        let mut components = Vec::new();
        let mut weights = Vec::new();
        let mut labels = Vec::new();
        for (k, c) in self.components.iter().enumerate() {
            if c.center.len() != r || c.covariance.len() != r * r {
                return Err(Error::Structural(format!(
                    "component {k}: conditional center needs {r} entries and covariance {} entries",
                    r * r
                )));
            }
            components.push(ConditionalComponent {
                special_probs: c.special_probs.iter().map(|&x| T::lit(x)).collect(),
                center: DVector::from_iterator(r, c.center.iter().map(|&x| T::lit(x))),
                covariance: DMatrix::from_row_iterator(r, r, c.covariance.iter().map(|&x| T::lit(x))),
                radial: c.radial,
            });
            weights.push(T::lit(c.weight));
            labels.push(c.group);
        }
        ConditionalDmpesModel::new(
            p,
            self.special.columns.clone(),
            support,
            regression,
            components,
            weights,
            GroupAssignment::from_labels(&labels)?,
        )
    }

    /// Builds the model and rejects it unless the conditional conditions hold.
    pub fn load<T: Scalar>(&self) -> Result<(ConditionalDmpesModel<T>, ValidationReport)> {
        let model = self.to_model::<T>()?;
        let report = validate_conditional(&model)?;
        if !report.is_valid() {
            let detail: Vec<_> = report.violations.iter().map(|v| v.detail.clone()).collect();
            return Err(Error::NotDmpes(detail.join("; ")));
        }
        Ok((model, report))
    }
}
