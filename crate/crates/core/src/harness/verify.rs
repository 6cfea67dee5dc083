//! Claims checked against replication statistics.
//!
//! Every claim in [`REGISTRY`] yields exactly one record per run (per
//! matcher for matcher-scoped claims), whether it passes, fails, does not
//! apply to the configured model, or belongs to a suite that was not run.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Population, TolerancePolicy};
use super::run::{InvarianceKind, InvarianceResult, ReplicationStats};
use super::stats::{Aggregates, RepRow, Target};
use crate::conditional::{fit_block_structure, script_decompose};
use crate::decompose::{
    decompose_direction, fit_exchangeable, pbr, percent_bias_reduction, ratio_decomposition, BiasCase, Decomposition,
    GapMoments,
};
use crate::error::{Error, Result};
use crate::matching::Method;
use crate::mcstats::{self, BootstrapPlan};
use crate::model::{Direction, Group};
use crate::sampler::{largest_remainder, substream, tag, AllocationRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    All,
    Invariance,
    Thm31,
    Epbr,
    Variance,
    Conditional,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::All => "all",
            Suite::Invariance => "invariance",
            Suite::Thm31 => "thm31",
            Suite::Epbr => "epbr",
            Suite::Variance => "variance",
            Suite::Conditional => "conditional",
        }
    }

    pub fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }

    pub fn needs_replications(self) -> bool {
        self != Suite::Invariance
    }

    pub fn needs_invariance(self) -> bool {
        self.includes(Suite::Invariance) || self.includes(Suite::Conditional)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    /// The claim's quantities vanish; reported without a pass/fail judgement.
    Degenerate,
    NotApplicable,
    Skipped,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Degenerate => "DEGENERATE",
            Verdict::NotApplicable => "N/A",
            Verdict::Skipped => "SKIPPED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// One record per configured matcher.
    PerMatcher,
    /// One record per run.
    Global,
    /// One record per affinely invariant matcher.
    PerInvariantMethod,
}

#[derive(Debug, Clone, Copy)]
pub struct ClaimDef {
    pub id: &'static str,
    pub suite: Suite,
    pub scope: Scope,
    pub summary: &'static str,
}

const fn def(id: &'static str, suite: Suite, scope: Scope, summary: &'static str) -> ClaimDef {
    ClaimDef { id, suite, scope, summary }
}

/// Matchers whose selections must not change under affine maps.
pub const INVARIANT_METHODS: [Method; 3] =
    [Method::MahalanobisGreedy, Method::MahalanobisOptimal, Method::DiscriminantCaliper];

use Scope::{Global, PerInvariantMethod, PerMatcher};

/// The fixed list of claims, in report order.
pub const REGISTRY: &[ClaimDef] = &[
    def("affine-invariance", Suite::Invariance, PerInvariantMethod, "selections unchanged under affine maps"),
    def("coordinate-negative-control", Suite::Invariance, Global, "single-coordinate matching changes under some map"),
    def("exclusion-rate", Suite::All, PerMatcher, "infeasible replications stay under the cap"),
    def("mean-along-ones", Suite::Thm31, PerMatcher, "matched mean vectors have equal coordinates"),
    def("exchangeable-structure", Suite::Thm31, PerMatcher, "matched second moments are k(I + cUU')"),
    def("component-structure", Suite::Thm31, PerMatcher, "the same structure within each component"),
    def("zero-discriminant-structure", Suite::Thm31, PerMatcher, "c is zero when the discriminant vanishes"),
    def("w-constancy", Suite::Thm31, PerMatcher, "quadratic forms agree across directions orthogonal to Z"),
    def("epbr", Suite::Epbr, PerMatcher, "percent bias reduction is the same in every direction"),
    def("epbr-zero-discriminant", Suite::Epbr, PerMatcher, "Z is zero: bias reduction is undefined"),
    def("epbr-zero-z-gap", Suite::Epbr, PerMatcher, "random Z gap is zero: only rho times the Z gap is reported"),
    def("epbr-sign-safety", Suite::Epbr, PerMatcher, "matching never reverses a significant random-design bias"),
    def("variance-ratio", Suite::Variance, PerMatcher, "gap variance ratio splits into Z and W ratios"),
    def("w-ratio-constancy", Suite::Variance, PerMatcher, "gap variance ratio is the same along every W"),
    def("component-variance-ratio", Suite::Variance, PerMatcher, "within-component covariance ratio splits"),
    def("pooled-variance-ratio-failure", Suite::Variance, PerMatcher, "the pooled-group analogue breaks"),
    def("block-structure", Suite::Conditional, PerMatcher, "conditional second moments have the block form"),
    def("script-w-constancy", Suite::Conditional, PerMatcher, "quadratic forms agree along remainder W directions"),
    def("script-epbr", Suite::Conditional, PerMatcher, "bias reduction along Y equals that along its span part"),
    def("script-variance-ratio", Suite::Conditional, PerMatcher, "gap variance ratio splits over the span"),
    def("script-component-variance-ratio", Suite::Conditional, PerMatcher, "component ratio splits over the span"),
    def("script-lemma", Suite::Conditional, Global, "span split has no special part in W and U-parallel remainder"),
    def("conditional-invariance", Suite::Conditional, Global, "remainder-only maps leave selections unchanged"),
    def("mixing-negative-control", Suite::Conditional, Global, "mixing remainder into specials changes selections"),
];

/// The worst sub-check of a claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub label: String,
    pub estimate: f64,
    pub reference: f64,
    pub se: f64,
    /// Largest deviation accepted (or, for expected failures, the smallest required).
    pub allowed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub claim: String,
    pub method: Option<String>,
    pub verdict: Verdict,
    pub checks: usize,
    pub failed: usize,
    pub worst: Option<Check>,
    pub note: String,
}

impl ClaimRecord {
    fn bare(claim: &str, method: Option<&str>, verdict: Verdict, note: impl Into<String>) -> Self {
        ClaimRecord {
            claim: claim.to_string(),
            method: method.map(str::to_string),
            verdict,
            checks: 0,
            failed: 0,
            worst: None,
            note: note.into(),
        }
    }
}

/// Per-direction bias and ratio diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionRecord {
    pub method: String,
    pub direction: String,
    pub case: BiasCase,
    pub rho: f64,
    pub pbr_y: Option<f64>,
    pub pbr_z: Option<f64>,
    pub pbr_y_se: f64,
    /// Bootstrap SE of `pbr_y − pbr_z`.
    pub pbr_diff_se: f64,
    pub matched_gap: f64,
    pub matched_gap_se: f64,
    pub random_gap: f64,
    pub random_gap_se: f64,
    pub rho_times_z_gap: f64,
    pub lhs: Option<f64>,
    pub rhs: Option<f64>,
    /// Bootstrap SE of `lhs − rhs`.
    pub ratio_diff_se: f64,
    pub z_ratio: Option<f64>,
    pub w_ratio: Option<f64>,
}

/// Within-component covariance ratio along one direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRatioRecord {
    pub method: String,
    pub direction: String,
    pub component: usize,
    pub group: Group,
    pub rho: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub diff_se: f64,
    pub z_ratio: Option<f64>,
    pub w_ratio: Option<f64>,
}

/// Structure fit of one matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub method: String,
    pub target: String,
    pub component: Option<usize>,
    pub k: f64,
    pub c: f64,
    pub residual: f64,
    /// Frobenius norm of the bootstrap SEs of the fitted block, relative to the matrix norm.
    pub noise_floor: f64,
    pub c_below_bound: bool,
    pub cross_residual: Option<f64>,
    pub cross_floor: Option<f64>,
}

/// Accumulates sub-checks into one claim record.
#[derive(Default)]
struct Tally {
    checks: usize,
    failed: usize,
    worst: Option<(f64, Check)>,
    notes: Vec<String>,
}

impl Tally {
    fn record(&mut self, check: Check, pass: bool, score: f64) {
        self.checks += 1;
        if !pass {
            self.failed += 1;
        }
        let score = if score.is_nan() { f64::INFINITY } else { score };
        if self.worst.as_ref().is_none_or(|w| score > w.0) {
            self.worst = Some((score, check));
        }
    }

    /// `|estimate − reference| < max(multiplier·se, floor)`.
    fn within(&mut self, label: String, estimate: f64, reference: f64, se: f64, tol: &TolerancePolicy) {
        let allowed = (tol.se_multiplier * se).max(tol.exact_floor);
        let dev = (estimate - reference).abs();
        self.record(Check { label, estimate, reference, se, allowed }, dev < allowed, dev / allowed);
    }

    /// `|estimate − reference| ≤ floor` for identities that hold exactly.
    fn exact(&mut self, label: String, estimate: f64, reference: f64, tol: &TolerancePolicy) {
        let allowed = tol.exact_floor;
        let dev = (estimate - reference).abs();
        self.record(Check { label, estimate, reference, se: 0.0, allowed }, dev <= allowed, dev / allowed);
    }

    /// The deviation must exceed `multiplier·se` (an expected failure).
    fn beyond(&mut self, label: String, estimate: f64, reference: f64, se: f64, tol: &TolerancePolicy) {
        let allowed = tol.se_multiplier * se;
        let dev = (estimate - reference).abs();
        self.record(Check { label, estimate, reference, se, allowed }, dev > allowed, allowed / dev);
    }

    fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    fn finish(self, claim: &str, method: Option<&str>, empty_note: &str) -> ClaimRecord {
        let mut notes = self.notes;
        let verdict = if self.checks == 0 {
            notes.insert(0, empty_note.to_string());
            Verdict::NotApplicable
        } else if self.failed == 0 {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        ClaimRecord {
            claim: claim.to_string(),
            method: method.map(str::to_string),
            verdict,
            checks: self.checks,
            failed: self.failed,
            worst: self.worst.map(|w| w.1),
            note: notes.join("; "),
        }
    }
}

fn quad(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (v.transpose() * m * v)[(0, 0)]
}

fn finite_sd(xs: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.filter(|x| x.is_finite()).collect();
    if xs.len() < 2 {
        f64::NAN
    } else {
        mcstats::sd(&xs)
    }
}

/// Population-level inputs shared by every matcher of a run.
#[derive(Debug, Clone)]
pub struct Setting {
    pub pop: Population,
    pub tol: TolerancePolicy,
    /// Test directions in canonical coordinates: random ones, then named.
    pub directions: Vec<(String, Direction<f64>)>,
    /// Random unit directions orthogonal to `Z` (and to the specials).
    pub w_directions: Vec<(String, Direction<f64>)>,
    /// `Z` in canonical coordinates, or zero when the discriminant vanishes.
    pub z: Direction<f64>,
    /// Population covariance of the random-design mean gap (conditional
    /// models with fixed allocation).
    pub random_gap_cov: Option<DMatrix<f64>>,
    pub expect_pooled_failure: bool,
}

fn gaussian<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

impl Setting {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let pop = config.population()?;
        let p = pop.dimension();
        let s = pop.s();
        let r = p - s;
        let z = if pop.degenerate() {
            Direction::zero(p)
        } else {
            let mut v = DVector::zeros(p);
            v.rows_mut(s, r).fill(1.0 / (r as f64).sqrt());
            Direction::unit(v).expect("nonzero")
        };
        let mut rng = substream(config.seed, &[tag::DIRECTIONS, 0]);
        let mut directions = Vec::new();
        while directions.len() < config.directions.random {
            if let Some(d) = Direction::unit(gaussian(p, &mut rng)) {
                directions.push((format!("r{:02}", directions.len()), d));
            }
        }
        if !z.is_zero() {
            directions.push(("Z".to_string(), z.clone()));
        }
        for named in &config.directions.named {
            if let Some(d) = Direction::unit(DVector::from_column_slice(&named.coefficients)) {
                directions.push((named.name.clone(), d));
            }
        }
        let mut rng = substream(config.seed, &[tag::DIRECTIONS, 1]);
        let mut w_directions = Vec::new();
        while w_directions.len() < config.w_directions {
            let mut v = DVector::zeros(p);
            v.rows_mut(s, r).copy_from(&gaussian(r, &mut rng));
            if !z.is_zero() {
                let zc = z.coefficients();
                v -= zc * v.dot(zc);
            }
            if v.norm() > 1e-8 {
                let d = Direction::unit(v).expect("nonzero");
                w_directions.push((format!("w{:02}", w_directions.len()), d));
            }
        }
        let random_gap_cov = if pop.is_conditional() { population_random_gap_cov(config, &pop)? } else { None };
        Ok(Setting {
            pop,
            tol: config.tolerance,
            directions,
            w_directions,
            z,
            random_gap_cov,
            expect_pooled_failure: config.expect_pooled_failure,
        })
    }

    fn s(&self) -> usize {
        self.pop.s()
    }

    /// Split of `y` used by the bias and gap-variance diagnostics: Euclidean
    /// for plain models, the span split under `metric` for conditional ones.
    fn decomposition(&self, y: &Direction<f64>, metric: &DMatrix<f64>) -> Result<Decomposition<f64>> {
        if self.pop.is_conditional() {
            Ok(script_decompose(y, self.s(), self.pop.degenerate())?.in_metric(metric).as_decomposition())
        } else {
            Ok(decompose_direction(y, &self.z))
        }
    }
}

/// `Σ_k n_k Cov_k / n²` per group for stratified random subsamples of a
/// fixed allocation; `None` under proportional allocation.
fn population_random_gap_cov(config: &ExperimentConfig, pop: &Population) -> Result<Option<DMatrix<f64>>> {
    let AllocationRule::Fixed(counts) = config.allocation_rule(pop)? else {
        return Ok(None);
    };
    let model = pop.allocation_model()?;
    let p = pop.dimension();
    let mut total = DMatrix::zeros(p, p);
    let sizes = &config.sizes;
    for (group, n) in [(Group::Treated, sizes.n_matched_treated), (Group::Control, sizes.n_matched_control)] {
        let present: Vec<(usize, f64)> =
            model.groups().members(group).iter().filter(|&&k| counts[k] > 0).map(|&k| (k, counts[k] as f64)).collect();
        for (k, nk) in largest_remainder(&present, n) {
            let (_, cov) = pop.canonical_component_moments(k);
            total += cov * (nk as f64 / (n * n) as f64);
        }
    }
    Ok(Some(total))
}

/// Completed replications of one matcher with their bootstrap aggregates.
#[derive(Debug, Clone)]
pub struct Evidence {
    pub label: String,
    pub rows: Vec<RepRow>,
    pub excluded: usize,
    pub total: usize,
    pub agg: Aggregates,
    pub boots: Vec<Aggregates>,
}

impl Evidence {
    pub fn build(config: &ExperimentConfig, stats: &ReplicationStats, index: usize) -> Result<Self> {
        let run = &stats.matchers[index];
        let rows = run.rows(&stats.random);
        if rows.len() < 2 {
            return Err(Error::Config(format!("{}: fewer than two completed replications", run.label)));
        }
        let agg = Aggregates::all(&rows);
        let plan = BootstrapPlan::new(rows.len(), config.bootstrap, config.seed, &[index as u64]);
        let boots = plan.replicate(|idx| Aggregates::of(&rows, idx));
        Ok(Evidence {
            label: run.label.clone(),
            excluded: run.excluded.len(),
            total: stats.random.len(),
            rows,
            agg,
            boots,
        })
    }

    fn boot_sd(&self, f: impl Fn(&Aggregates) -> Option<f64>) -> f64 {
        finite_sd(self.boots.iter().filter_map(f))
    }

    /// Elementwise bootstrap SEs of a matrix statistic.
    fn boot_sd_matrix(&self, f: impl Fn(&Aggregates) -> Option<DMatrix<f64>>) -> Option<DMatrix<f64>> {
        let ms: Vec<DMatrix<f64>> =
            self.boots.iter().filter_map(f).filter(|m| m.iter().all(|x| x.is_finite())).collect();
        if ms.len() < 2 {
            return None;
        }
        let (r, c) = ms[0].shape();
        Some(DMatrix::from_fn(r, c, |i, j| mcstats::sd(&ms.iter().map(|m| m[(i, j)]).collect::<Vec<_>>())))
    }

    fn per_rep(&self, f: impl Fn(&RepRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    fn label(&self) -> Option<&str> {
        Some(&self.label)
    }
}

fn target_of(agg: &Aggregates, t: Target) -> Option<DMatrix<f64>> {
    let m = agg.target(t);
    m.iter().all(|x| x.is_finite()).then(|| m.clone())
}

/// Bias and gap-variance diagnostics for every test direction.
pub fn direction_table(setting: &Setting, ev: &Evidence) -> Result<Vec<DirectionRecord>> {
    let agg = &ev.agg;
    let metric = setting.random_gap_cov.clone().unwrap_or_else(|| agg.v_r.clone());
    let n = ev.rows.len() as f64;
    let gaps = GapMoments { matched: agg.gap_m.clone(), random: agg.gap_r.clone(), random_cov: &agg.v_r / n };
    let mut out = Vec::with_capacity(setting.directions.len());
    for (name, y) in &setting.directions {
        let dec = setting.decomposition(y, &metric)?;
        let br = percent_bias_reduction(&gaps, &dec, setting.tol.se_multiplier);
        let yv = dec.reconstruct();
        let zv = dec.z.coefficients().clone();
        let ratio_case = br.case == BiasCase::Ratio;
        let gap_se = |f: &dyn Fn(&RepRow) -> DVector<f64>| mcstats::se_of_mean(&ev.per_rep(|r| yv.dot(&f(r))));
        let rd = ratio_decomposition(&agg.v_m, &agg.v_r, &dec).ok();
        out.push(DirectionRecord {
            method: ev.label.clone(),
            direction: name.clone(),
            case: br.case,
            rho: dec.rho,
            pbr_y: br.pbr_y,
            pbr_z: br.pbr_z,
            pbr_y_se: if ratio_case { ev.boot_sd(|b| Some(pbr(yv.dot(&b.gap_m), yv.dot(&b.gap_r)))) } else { f64::NAN },
            pbr_diff_se: if ratio_case {
                ev.boot_sd(|b| Some(pbr(yv.dot(&b.gap_m), yv.dot(&b.gap_r)) - pbr(zv.dot(&b.gap_m), zv.dot(&b.gap_r))))
            } else {
                f64::NAN
            },
            matched_gap: br.matched_y_gap,
            matched_gap_se: gap_se(&|r| r.matched.gap()),
            random_gap: yv.dot(&agg.gap_r),
            random_gap_se: gap_se(&|r| r.random.gap()),
            rho_times_z_gap: br.rho_times_z_gap,
            lhs: rd.map(|r| r.lhs),
            rhs: rd.map(|r| r.rhs),
            ratio_diff_se: ev.boot_sd(|b| ratio_decomposition(&b.v_m, &b.v_r, &dec).ok().map(|r| r.lhs - r.rhs)),
            z_ratio: rd.and_then(|r| r.z_ratio),
            w_ratio: rd.and_then(|r| r.w_ratio),
        });
    }
    Ok(out)
}

/// Within-component covariance ratios for components matched often enough.
pub fn component_table(setting: &Setting, ev: &Evidence) -> Result<(Vec<ComponentRatioRecord>, Vec<String>)> {
    let mut out = Vec::new();
    let mut notes = Vec::new();
    for (k, ca) in ev.agg.components.iter().enumerate() {
        let (Some(mnu), Some(rnu)) = (&ca.matched_nu, &ca.random_nu) else {
            notes.push(format!("component {k} has no covariance estimate"));
            continue;
        };
        if ca.nu_reps < setting.tol.min_component_reps {
            notes.push(format!("component {k} has two or more matched units in only {} replications", ca.nu_reps));
            continue;
        }
        let (_, cov_k) = setting.pop.canonical_component_moments(k);
        for (name, y) in &setting.directions {
            let dec = setting.decomposition(y, &cov_k)?;
            let Ok(rd) = ratio_decomposition(mnu, rnu, &dec) else {
                notes.push(format!("component {k}, direction {name}: zero random-design variance"));
                continue;
            };
            let diff_se = ev.boot_sd(|b| {
                let c = b.component(k);
                ratio_decomposition(c.matched_nu.as_ref()?, c.random_nu.as_ref()?, &dec).ok().map(|r| r.lhs - r.rhs)
            });
            out.push(ComponentRatioRecord {
                method: ev.label.clone(),
                direction: name.clone(),
                component: k,
                group: ca.group,
                rho: dec.rho,
                lhs: rd.lhs,
                rhs: rd.rhs,
                diff_se,
                z_ratio: rd.z_ratio,
                w_ratio: rd.w_ratio,
            });
        }
    }
    Ok((out, notes))
}

fn exclusion_rate(setting: &Setting, ev: &Evidence) -> ClaimRecord {
    let cap = setting.tol.max_exclusion_rate;
    let rate = ev.excluded as f64 / ev.total as f64;
    let mut t = Tally::default();
    let check = Check {
        label: format!("{} of {} excluded", ev.excluded, ev.total),
        estimate: rate,
        reference: 0.0,
        se: 0.0,
        allowed: cap,
    };
    t.record(check, rate <= cap, rate / cap);
    t.finish("exclusion-rate", ev.label(), "")
}

fn plain_only(claim: &str, setting: &Setting, ev: &Evidence) -> Option<ClaimRecord> {
    setting.pop.is_conditional().then(|| {
        ClaimRecord::bare(claim, ev.label(), Verdict::NotApplicable, "conditional model; see the script-* claims")
    })
}

fn conditional_only(claim: &str, setting: &Setting, method: Option<&str>) -> Option<ClaimRecord> {
    (!setting.pop.is_conditional()).then(|| ClaimRecord::bare(claim, method, Verdict::NotApplicable, "plain model"))
}

/// Pairwise coordinate differences of a per-replication mean vector.
fn coordinate_equality(t: &mut Tally, what: &str, vectors: &[&[f64]], tol: &TolerancePolicy) {
    let p = vectors.first().map_or(0, |v| v.len());
    for i in 0..p {
        for j in i + 1..p {
            let d: Vec<f64> = vectors.iter().map(|v| v[i] - v[j]).collect();
            t.within(format!("{what} x{}-x{}", i + 1, j + 1), mcstats::mean(&d), 0.0, mcstats::se_of_mean(&d), tol);
        }
    }
}

fn mean_along_ones(setting: &Setting, ev: &Evidence) -> ClaimRecord {
    if let Some(r) = plain_only("mean-along-ones", setting, ev) {
        return r;
    }
    let mut t = Tally::default();
    let mt: Vec<&[f64]> = ev.rows.iter().map(|r| r.matched.mean_t.as_slice()).collect();
    let mc: Vec<&[f64]> = ev.rows.iter().map(|r| r.matched.mean_c.as_slice()).collect();
    coordinate_equality(&mut t, "treated mean", &mt, &setting.tol);
    coordinate_equality(&mut t, "control mean", &mc, &setting.tol);
    t.finish("mean-along-ones", ev.label(), "one-dimensional model")
}

/// Relative noise floor `‖SE‖_F / ‖M‖_F` of a matrix statistic.
fn noise_floor(se: Option<DMatrix<f64>>, m: &DMatrix<f64>) -> f64 {
    match se {
        Some(se) if m.norm() > 0.0 => se.norm() / m.norm(),
        _ => f64::NAN,
    }
}

fn fit_check(
    t: &mut Tally,
    fits: &mut Vec<FitRecord>,
    ev: &Evidence,
    setting: &Setting,
    label: String,
    component: Option<usize>,
    m: &DMatrix<f64>,
    se: Option<DMatrix<f64>>,
) -> Result<()> {
    let fit = fit_exchangeable(m)?;
    let floor = noise_floor(se, m);
    let allowed = (setting.tol.se_multiplier * floor).max(setting.tol.exact_floor);
    if fit.c_below_bound {
        t.note(format!("{label}: fitted c below -1/p"));
    }
    t.record(
        Check { label: label.clone(), estimate: fit.residual, reference: 0.0, se: floor, allowed },
        fit.residual < allowed,
        fit.residual / allowed,
    );
    fits.push(FitRecord {
        method: ev.label.clone(),
        target: label,
        component,
        k: fit.k,
        c: fit.c,
        residual: fit.residual,
        noise_floor: floor,
        c_below_bound: fit.c_below_bound,
        cross_residual: None,
        cross_floor: None,
    });
    Ok(())
}

fn exchangeable_structure(setting: &Setting, ev: &Evidence, fits: &mut Vec<FitRecord>) -> Result<ClaimRecord> {
    if let Some(r) = plain_only("exchangeable-structure", setting, ev) {
        return Ok(r);
    }
    let mut t = Tally::default();
    for target in Target::ALL {
        let Some(m) = target_of(&ev.agg, target) else {
            t.note(format!("{} unavailable", target.name()));
            continue;
        };
        let se = ev.boot_sd_matrix(|b| target_of(b, target));
        fit_check(&mut t, fits, ev, setting, target.name().to_string(), None, &m, se)?;
    }
    Ok(t.finish("exchangeable-structure", ev.label(), "no target available"))
}

fn component_structure(setting: &Setting, ev: &Evidence, fits: &mut Vec<FitRecord>) -> Result<ClaimRecord> {
    if let Some(r) = plain_only("component-structure", setting, ev) {
        return Ok(r);
    }
    let min = setting.tol.min_component_reps;
    let mut t = Tally::default();
    for (k, ca) in ev.agg.components.iter().enumerate() {
        if ca.mean_reps >= min {
            let means: Vec<&[f64]> = ev
                .rows
                .iter()
                .map(|r| &r.matched.components[k])
                .filter(|c| c.n > 0)
                .map(|c| c.mean.as_slice())
                .collect();
            coordinate_equality(&mut t, &format!("component {k} mean"), &means, &setting.tol);
        } else {
            t.note(format!("component {k} matched in {} replications", ca.mean_reps));
        }
        match &ca.matched_nu {
            Some(m) if ca.nu_reps >= min => {
                let se = ev.boot_sd_matrix(|b| b.component(k).matched_nu.clone());
                fit_check(&mut t, fits, ev, setting, format!("component {k} covariance"), Some(k), m, se)?;
            }
            _ => t.note(format!("component {k} covariance available in {} replications", ca.nu_reps)),
        }
    }
    Ok(t.finish("component-structure", ev.label(), "no component matched often enough"))
}

fn zero_discriminant_structure(setting: &Setting, ev: &Evidence) -> Result<ClaimRecord> {
    if let Some(r) = plain_only("zero-discriminant-structure", setting, ev) {
        return Ok(r);
    }
    if !setting.pop.degenerate() {
        return Ok(ClaimRecord::bare(
            "zero-discriminant-structure",
            ev.label(),
            Verdict::NotApplicable,
            "population discriminant is nonzero",
        ));
    }
    let mut t = Tally::default();
    for target in Target::ALL {
        let Some(m) = target_of(&ev.agg, target) else { continue };
        let c = fit_exchangeable(&m)?.c;
        let se = ev.boot_sd(|b| target_of(b, target).and_then(|m| fit_exchangeable(&m).ok()).map(|f| f.c));
        t.within(format!("{} c", target.name()), c, 0.0, se, &setting.tol);
    }
    Ok(t.finish("zero-discriminant-structure", ev.label(), "no target available"))
}

/// Quadratic forms along the W directions compared with their mean.
fn w_constancy(claim: &str, setting: &Setting, ev: &Evidence) -> ClaimRecord {
    let mut t = Tally::default();
    let ws: Vec<&DVector<f64>> = setting.w_directions.iter().map(|w| w.1.coefficients()).collect();
    if ws.len() < 2 {
        return t.finish(claim, ev.label(), "fewer than two W directions");
    }
    let forms = |m: &DMatrix<f64>| -> Vec<f64> { ws.iter().map(|w| quad(m, w)).collect() };
    for target in Target::ALL {
        let Some(m) = target_of(&ev.agg, target) else { continue };
        let q = forms(&m);
        let qbar = mcstats::mean(&q);
        for (i, (name, _)) in setting.w_directions.iter().enumerate() {
            let se = ev.boot_sd(|b| {
                let qb = forms(&target_of(b, target)?);
                Some(qb[i] - mcstats::mean(&qb))
            });
            t.within(format!("{} along {name}", target.name()), q[i] - qbar, 0.0, se, &setting.tol);
        }
    }
    t.finish(claim, ev.label(), "no target available")
}

fn epbr(setting: &Setting, ev: &Evidence, table: &[DirectionRecord]) -> ClaimRecord {
    if let Some(r) = plain_only("epbr", setting, ev) {
        return r;
    }
    let mut t = Tally::default();
    match table.first().map(|d| d.case) {
        Some(BiasCase::Ratio) => {}
        Some(case) => {
            let note = format!("case {case:?}: ratio undefined, see the matching degenerate claim");
            return ClaimRecord::bare("epbr", ev.label(), Verdict::NotApplicable, note);
        }
        None => return t.finish("epbr", ev.label(), "no directions"),
    }
    let with_pbr: Vec<(&DirectionRecord, f64)> = table.iter().filter_map(|d| d.pbr_y.map(|v| (d, v))).collect();
    for (i, (a, pa)) in with_pbr.iter().enumerate() {
        for (b, pb) in &with_pbr[i + 1..] {
            let se = (a.pbr_y_se * a.pbr_y_se + b.pbr_y_se * b.pbr_y_se).sqrt();
            t.within(format!("{} vs {}", a.direction, b.direction), pa - pb, 0.0, se, &setting.tol);
        }
    }
    if let Some(z) = table.iter().find(|d| d.direction == "Z") {
        if let (Some(py), Some(pz)) = (z.pbr_y, z.pbr_z) {
            t.exact("Z against itself".into(), py, pz, &setting.tol);
        }
    }
    t.finish("epbr", ev.label(), "no direction with a defined ratio")
}

fn epbr_zero_discriminant(setting: &Setting, ev: &Evidence, table: &[DirectionRecord]) -> ClaimRecord {
    if let Some(r) = plain_only("epbr-zero-discriminant", setting, ev) {
        return r;
    }
    if !setting.pop.degenerate() {
        return ClaimRecord::bare(
            "epbr-zero-discriminant",
            ev.label(),
            Verdict::NotApplicable,
            "discriminant is nonzero",
        );
    }
    let worst = table.iter().max_by(|a, b| a.matched_gap.abs().total_cmp(&b.matched_gap.abs()));
    let mut rec = ClaimRecord::bare(
        "epbr-zero-discriminant",
        ev.label(),
        Verdict::Degenerate,
        "Z is the zero direction: matched and random Z gaps vanish and the ratio is undefined",
    );
    rec.checks = table.len();
    rec.worst = worst.map(|d| Check {
        label: format!("matched gap along {}", d.direction),
        estimate: d.matched_gap,
        reference: 0.0,
        se: d.matched_gap_se,
        allowed: setting.tol.se_multiplier * d.matched_gap_se,
    });
    rec
}

fn epbr_zero_z_gap(setting: &Setting, ev: &Evidence, table: &[DirectionRecord]) -> ClaimRecord {
    if let Some(r) = plain_only("epbr-zero-z-gap", setting, ev) {
        return r;
    }
    if table.first().map(|d| d.case) != Some(BiasCase::ZeroZGap) {
        return ClaimRecord::bare("epbr-zero-z-gap", ev.label(), Verdict::NotApplicable, "random Z gap is nonzero");
    }
    let worst = table
        .iter()
        .max_by(|a, b| (a.matched_gap - a.rho_times_z_gap).abs().total_cmp(&(b.matched_gap - b.rho_times_z_gap).abs()));
    let mut rec = ClaimRecord::bare(
        "epbr-zero-z-gap",
        ev.label(),
        Verdict::Degenerate,
        "random Z gap is statistically zero; matched Y gap compared with rho times the matched Z gap",
    );
    rec.checks = table.len();
    rec.worst = worst.map(|d| Check {
        label: format!("matched gap along {}", d.direction),
        estimate: d.matched_gap,
        reference: d.rho_times_z_gap,
        se: d.matched_gap_se,
        allowed: setting.tol.se_multiplier * d.matched_gap_se,
    });
    rec
}

fn epbr_sign_safety(setting: &Setting, ev: &Evidence, table: &[DirectionRecord]) -> ClaimRecord {
    let mult = setting.tol.se_multiplier;
    let mut t = Tally::default();
    for d in table {
        if !(d.random_gap.abs() > mult * d.random_gap_se) {
            continue;
        }
        let reversed = d.matched_gap * d.random_gap < 0.0 && d.matched_gap.abs() > mult * d.matched_gap_se;
        let check = Check {
            label: format!("direction {}", d.direction),
            estimate: d.matched_gap,
            reference: 0.0,
            se: d.matched_gap_se,
            allowed: mult * d.matched_gap_se,
        };
        let score =
            if d.matched_gap * d.random_gap < 0.0 { d.matched_gap.abs() / (mult * d.matched_gap_se) } else { 0.0 };
        t.record(check, !reversed, score);
    }
    t.finish("epbr-sign-safety", ev.label(), "no direction with a significant random-design gap")
}

fn ratio_identity(claim: &str, setting: &Setting, ev: &Evidence, table: &[DirectionRecord]) -> ClaimRecord {
    let mut t = Tally::default();
    for d in table {
        match (d.lhs, d.rhs) {
            (Some(l), Some(r)) => t.within(format!("direction {}", d.direction), l, r, d.ratio_diff_se, &setting.tol),
            _ => t.note(format!("direction {}: zero random-design variance", d.direction)),
        }
    }
    t.finish(claim, ev.label(), "no direction with a defined ratio")
}

fn w_ratio_constancy(setting: &Setting, ev: &Evidence) -> ClaimRecord {
    if let Some(r) = plain_only("w-ratio-constancy", setting, ev) {
        return r;
    }
    let mut t = Tally::default();
    let ws: Vec<&DVector<f64>> = setting.w_directions.iter().map(|w| w.1.coefficients()).collect();
    let ratios = |a: &Aggregates| -> Vec<f64> { ws.iter().map(|w| quad(&a.v_m, w) / quad(&a.v_r, w)).collect() };
    let q = ratios(&ev.agg);
    if q.len() >= 2 {
        let qbar = mcstats::mean(&q);
        for (i, (name, _)) in setting.w_directions.iter().enumerate() {
            let se = ev.boot_sd(|b| {
                let qb = ratios(b);
                Some(qb[i] - mcstats::mean(&qb))
            });
            t.within(format!("ratio along {name}"), q[i] - qbar, 0.0, se, &setting.tol);
        }
    }
    t.finish("w-ratio-constancy", ev.label(), "fewer than two W directions")
}

fn component_ratio_claim(
    claim: &str,
    setting: &Setting,
    ev: &Evidence,
    table: &[ComponentRatioRecord],
    notes: &[String],
) -> ClaimRecord {
    let mut t = Tally::default();
    for n in notes {
        t.note(n.clone());
    }
    for d in table {
        t.within(format!("component {} along {}", d.component, d.direction), d.lhs, d.rhs, d.diff_se, &setting.tol);
    }
    t.finish(claim, ev.label(), "no component matched often enough")
}

fn pooled_failure(setting: &Setting, ev: &Evidence) -> Result<ClaimRecord> {
    const CLAIM: &str = "pooled-variance-ratio-failure";
    if let Some(r) = plain_only(CLAIM, setting, ev) {
        return Ok(r);
    }
    let Some((_, w)) = setting.w_directions.first() else {
        return Ok(ClaimRecord::bare(CLAIM, ev.label(), Verdict::NotApplicable, "no W direction"));
    };
    if setting.z.is_zero() {
        return Ok(ClaimRecord::bare(CLAIM, ev.label(), Verdict::NotApplicable, "discriminant is zero"));
    }
    let y = Direction::unit(setting.z.coefficients() + w.coefficients()).expect("orthogonal unit vectors");
    let dec = decompose_direction(&y, &setting.z);
    let rd = ratio_decomposition(&ev.agg.nu_mc, &ev.agg.nu_rc, &dec)?;
    let se = ev.boot_sd(|b| ratio_decomposition(&b.nu_mc, &b.nu_rc, &dec).ok().map(|r| r.lhs - r.rhs));
    let mut t = Tally::default();
    let label = "control group along (Z + W)/sqrt(2)".to_string();
    if setting.expect_pooled_failure {
        t.beyond(label, rd.lhs, rd.rhs, se, &setting.tol);
        Ok(t.finish(CLAIM, ev.label(), ""))
    } else {
        let mut rec = ClaimRecord::bare(
            CLAIM,
            ev.label(),
            Verdict::NotApplicable,
            "informational: no failure expected for this model",
        );
        rec.worst =
            Some(Check { label, estimate: rd.lhs, reference: rd.rhs, se, allowed: setting.tol.se_multiplier * se });
        Ok(rec)
    }
}

fn block_structure(setting: &Setting, ev: &Evidence, fits: &mut Vec<FitRecord>) -> Result<ClaimRecord> {
    const CLAIM: &str = "block-structure";
    if let Some(r) = conditional_only(CLAIM, setting, ev.label()) {
        return Ok(r);
    }
    let s = setting.s();
    let r = setting.pop.dimension() - s;
    let tol = &setting.tol;
    let mut t = Tally::default();
    for target in Target::ALL {
        let Some(m) = target_of(&ev.agg, target) else { continue };
        let fit = fit_block_structure(&m, s, r)?;
        let se = ev.boot_sd_matrix(|b| target_of(b, target));
        let total = m.norm();
        let block_floor = |rows: (usize, usize), cols: (usize, usize)| match &se {
            Some(se) if total > 0.0 => se.view((rows.0, cols.0), (rows.1, cols.1)).norm() / total,
            _ => f64::NAN,
        };
        let cross_floor = block_floor((0, s), (s, r));
        let rem_floor = block_floor((s, r), (s, r));
        for (what, residual, floor) in
            [("cross", fit.cross_residual, cross_floor), ("remainder", fit.remainder_residual, rem_floor)]
        {
            let allowed = (tol.se_multiplier * floor).max(tol.exact_floor);
            let check = Check {
                label: format!("{} {what} block", target.name()),
                estimate: residual,
                reference: 0.0,
                se: floor,
                allowed,
            };
            t.record(check, residual < allowed, residual / allowed);
        }
        t.note(format!("{} special block {:?}", target.name(), fit.special_block));
        fits.push(FitRecord {
            method: ev.label.clone(),
            target: target.name().to_string(),
            component: None,
            k: fit.remainder.k,
            c: fit.remainder.c,
            residual: fit.remainder_residual,
            noise_floor: rem_floor,
            c_below_bound: fit.remainder.c_below_bound,
            cross_residual: Some(fit.cross_residual),
            cross_floor: Some(cross_floor),
        });
    }
    Ok(t.finish(CLAIM, ev.label(), "no target available"))
}

fn script_epbr(setting: &Setting, ev: &Evidence, table: &[DirectionRecord]) -> ClaimRecord {
    const CLAIM: &str = "script-epbr";
    if let Some(r) = conditional_only(CLAIM, setting, ev.label()) {
        return r;
    }
    let mut t = Tally::default();
    for d in table {
        match (d.pbr_y, d.pbr_z) {
            (Some(py), Some(pz)) => t.within(format!("direction {}", d.direction), py, pz, d.pbr_diff_se, &setting.tol),
            _ => t.note(format!("direction {}: case {:?}", d.direction, d.case)),
        }
    }
    t.finish(CLAIM, ev.label(), "no direction with a defined ratio")
}

fn script_lemma(setting: &Setting) -> Result<ClaimRecord> {
    const CLAIM: &str = "script-lemma";
    if let Some(r) = conditional_only(CLAIM, setting, None) {
        return Ok(r);
    }
    let mut t = Tally::default();
    for (name, y) in setting.directions.iter().chain(&setting.w_directions) {
        let dec = script_decompose(y, setting.s(), setting.pop.degenerate())?;
        let (gs, cross, spread) = dec.lemma_residuals();
        t.exact(format!("{name} special part of W"), gs, 0.0, &setting.tol);
        t.exact(format!("{name} W against span"), cross, 0.0, &setting.tol);
        t.exact(format!("{name} span remainder off U"), spread, 0.0, &setting.tol);
    }
    Ok(t.finish(CLAIM, None, "no directions"))
}

fn invariance_claim(claim: &str, method: Option<&str>, result: Option<&InvarianceResult>) -> ClaimRecord {
    let Some(r) = result else {
        return ClaimRecord::bare(claim, method, Verdict::NotApplicable, "no invariance result recorded");
    };
    let mut t = Tally::default();
    let label = format!("{} panels x {} maps, max condition {:.3e}", r.panels, r.maps, r.max_condition);
    let changed = (r.checked - r.identical) as f64;
    let (reference, allowed) = if r.kind.expects_invariance() { (0.0, 0.0) } else { (1.0, 1.0) };
    let check = Check { label, estimate: changed, reference, se: 0.0, allowed };
    t.record(check, r.passed(), if r.passed() { 0.0 } else { 1.0 });
    if let Some((p, m)) = r.first_change {
        t.note(format!("first change at panel {p}, map {m}"));
    }
    t.finish(claim, method, "")
}

fn find_invariance(results: &[InvarianceResult], kind: InvarianceKind, method: Method) -> Option<&InvarianceResult> {
    results.iter().find(|r| r.kind == kind && r.method == method)
}

/// Claims of one suite-filtered run.
#[derive(Debug, Clone, Default)]
struct Collected {
    claims: Vec<ClaimRecord>,
    directions: Vec<DirectionRecord>,
    components: Vec<ComponentRatioRecord>,
    fits: Vec<FitRecord>,
}

struct MatcherTables {
    ev: Evidence,
    directions: Vec<DirectionRecord>,
    components: Vec<ComponentRatioRecord>,
    component_notes: Vec<String>,
}

fn matcher_claim(id: &str, setting: &Setting, m: &MatcherTables, fits: &mut Vec<FitRecord>) -> Result<ClaimRecord> {
    let ev = &m.ev;
    let cond = setting.pop.is_conditional();
    Ok(match id {
        "exclusion-rate" => exclusion_rate(setting, ev),
        "mean-along-ones" => mean_along_ones(setting, ev),
        "exchangeable-structure" => exchangeable_structure(setting, ev, fits)?,
        "component-structure" => component_structure(setting, ev, fits)?,
        "zero-discriminant-structure" => zero_discriminant_structure(setting, ev)?,
        "w-constancy" => match plain_only(id, setting, ev) {
            Some(r) => r,
            None => w_constancy(id, setting, ev),
        },
        "epbr" => epbr(setting, ev, &m.directions),
        "epbr-zero-discriminant" => epbr_zero_discriminant(setting, ev, &m.directions),
        "epbr-zero-z-gap" => epbr_zero_z_gap(setting, ev, &m.directions),
        "epbr-sign-safety" => epbr_sign_safety(setting, ev, &m.directions),
        "variance-ratio" => match plain_only(id, setting, ev) {
            Some(r) => r,
            None => ratio_identity(id, setting, ev, &m.directions),
        },
        "w-ratio-constancy" => w_ratio_constancy(setting, ev),
        "component-variance-ratio" => match plain_only(id, setting, ev) {
            Some(r) => r,
            None => component_ratio_claim(id, setting, ev, &m.components, &m.component_notes),
        },
        "pooled-variance-ratio-failure" => pooled_failure(setting, ev)?,
        "block-structure" => block_structure(setting, ev, fits)?,
        "script-w-constancy" if cond => w_constancy(id, setting, ev),
        "script-epbr" => script_epbr(setting, ev, &m.directions),
        "script-variance-ratio" if cond => ratio_identity(id, setting, ev, &m.directions),
        "script-component-variance-ratio" if cond => {
            component_ratio_claim(id, setting, ev, &m.components, &m.component_notes)
        }
        "script-w-constancy" | "script-variance-ratio" | "script-component-variance-ratio" => {
            ClaimRecord::bare(id, ev.label(), Verdict::NotApplicable, "plain model")
        }
        other => return Err(Error::Config(format!("unknown matcher claim {other}"))),
    })
}

fn collect(
    config: &ExperimentConfig,
    suite: Suite,
    stats: &ReplicationStats,
    invariance: &[InvarianceResult],
) -> Result<Collected> {
    let setting = Setting::new(config)?;
    let mut out = Collected::default();
    let mut tables = Vec::new();
    if suite.needs_replications() {
        if stats.matchers.len() != config.matchers.len() {
            return Err(Error::Config("replication statistics do not match the configured matchers".into()));
        }
        for i in 0..stats.matchers.len() {
            let ev = Evidence::build(config, stats, i)?;
            let directions = direction_table(&setting, &ev)?;
            let (components, component_notes) = component_table(&setting, &ev)?;
            tables.push(MatcherTables { ev, directions, components, component_notes });
        }
    }
    let labels: Vec<String> = config.matchers.iter().map(|m| m.label()).collect();
    for d in REGISTRY {
        let selected = if d.suite == Suite::All { suite.needs_replications() } else { suite.includes(d.suite) };
        let run = selected && (d.scope != PerMatcher || suite.needs_replications());
        let skipped = |method: Option<&str>| {
            ClaimRecord::bare(d.id, method, Verdict::Skipped, format!("suite {} not selected", suite.name()))
        };
        match d.scope {
            PerMatcher => {
                for (i, label) in labels.iter().enumerate() {
                    out.claims.push(if run {
                        matcher_claim(d.id, &setting, &tables[i], &mut out.fits)?
                    } else {
                        skipped(Some(label))
                    });
                }
            }
            PerInvariantMethod => {
                for method in INVARIANT_METHODS {
                    out.claims.push(if run {
                        invariance_claim(
                            d.id,
                            Some(method.name()),
                            find_invariance(invariance, InvarianceKind::Affine, method),
                        )
                    } else {
                        skipped(Some(method.name()))
                    });
                }
            }
            Global => {
                let rec = if !run {
                    skipped(global_method(d.id))
                } else {
                    match d.id {
                        "coordinate-negative-control" => invariance_claim(
                            d.id,
                            Some(Method::Coordinate.name()),
                            find_invariance(invariance, InvarianceKind::CoordinateControl, Method::Coordinate),
                        ),
                        "script-lemma" => script_lemma(&setting)?,
                        "conditional-invariance" | "mixing-negative-control" => {
                            match conditional_only(d.id, &setting, Some(Method::Conditional.name())) {
                                Some(r) => r,
                                None => {
                                    let kind = if d.id == "conditional-invariance" {
                                        InvarianceKind::ConditionalRemainder
                                    } else {
                                        InvarianceKind::ConditionalMixing
                                    };
                                    invariance_claim(
                                        d.id,
                                        Some(Method::Conditional.name()),
                                        find_invariance(invariance, kind, Method::Conditional),
                                    )
                                }
                            }
                        }
                        other => return Err(Error::Config(format!("unknown global claim {other}"))),
                    }
                };
                out.claims.push(rec);
            }
        }
    }
    if suite.includes(Suite::Epbr) || suite.includes(Suite::Variance) || suite.includes(Suite::Conditional) {
        for t in tables {
            out.directions.extend(t.directions);
            out.components.extend(t.components);
        }
    }
    Ok(out)
}

/// Claims, diagnostics and invariance outcomes of one verification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub name: String,
    pub seed: u64,
    pub replications: usize,
    pub bootstrap: usize,
    pub suite: Suite,
    pub tolerance: TolerancePolicy,
    pub claims: Vec<ClaimRecord>,
    pub directions: Vec<DirectionRecord>,
    pub components: Vec<ComponentRatioRecord>,
    pub fits: Vec<FitRecord>,
    pub invariance: Vec<InvarianceResult>,
}

impl VerificationReport {
    /// No claim failed.
    pub fn passed(&self) -> bool {
        self.claims.iter().all(|c| c.verdict != Verdict::Fail)
    }

    pub fn claim(&self, id: &str, method: Option<&str>) -> Option<&ClaimRecord> {
        self.claims.iter().find(|c| c.claim == id && c.method.as_deref() == method)
    }

    pub fn claims_named(&self, id: &str) -> impl Iterator<Item = &ClaimRecord> {
        let id = id.to_string();
        self.claims.iter().filter(move |c| c.claim == id)
    }
}

/// Method a global claim is about, if any.
fn global_method(id: &str) -> Option<&'static str> {
    match id {
        "coordinate-negative-control" => Some(Method::Coordinate.name()),
        "conditional-invariance" | "mixing-negative-control" => Some(Method::Conditional.name()),
        _ => None,
    }
}

/// Expected `(claim, method)` pairs for a config, in report order.
pub fn expected_claims(config: &ExperimentConfig) -> Vec<(String, Option<String>)> {
    let mut out = Vec::new();
    for d in REGISTRY {
        match d.scope {
            PerMatcher => out.extend(config.matchers.iter().map(|m| (d.id.to_string(), Some(m.label())))),
            PerInvariantMethod => {
                out.extend(INVARIANT_METHODS.iter().map(|m| (d.id.to_string(), Some(m.name().to_string()))))
            }
            Global => out.push((d.id.to_string(), global_method(d.id).map(str::to_string))),
        }
    }
    out
}

/// Fails unless every registry entry appears exactly once, in order.
pub fn check_registry(config: &ExperimentConfig, report: &VerificationReport) -> Result<()> {
    let expected = expected_claims(config);
    let found: Vec<(String, Option<String>)> =
        report.claims.iter().map(|c| (c.claim.clone(), c.method.clone())).collect();
    if expected != found {
        return Err(Error::Config(format!(
            "claim registry mismatch: expected {} records, found {}",
            expected.len(),
            found.len()
        )));
    }
    Ok(())
}

/// Evaluates every registry claim from recorded statistics.
pub fn verify_all(
    config: &ExperimentConfig,
    suite: Suite,
    stats: &ReplicationStats,
    invariance: &[InvarianceResult],
) -> Result<VerificationReport> {
    let c = collect(config, suite, stats, invariance)?;
    let report = VerificationReport {
        name: config.name.clone(),
        seed: config.seed,
        replications: config.replications,
        bootstrap: config.bootstrap,
        suite,
        tolerance: config.tolerance,
        claims: c.claims,
        directions: c.directions,
        components: c.components,
        fits: c.fits,
        invariance: invariance.to_vec(),
    };
    check_registry(config, &report)?;
    Ok(report)
}

fn suite_claims(
    config: &ExperimentConfig,
    suite: Suite,
    stats: &ReplicationStats,
    inv: &[InvarianceResult],
) -> Result<Vec<ClaimRecord>> {
    let all = collect(config, suite, stats, inv)?;
    Ok(all.claims.into_iter().filter(|c| c.verdict != Verdict::Skipped).collect())
}

/// Mean-structure, second-moment structure and W-constancy claims.
pub fn verify_theorem_3_1(config: &ExperimentConfig, stats: &ReplicationStats) -> Result<Vec<ClaimRecord>> {
    suite_claims(config, Suite::Thm31, stats, &[])
}

/// Equal percent bias reduction and its degenerate cases.
pub fn verify_epbr(config: &ExperimentConfig, stats: &ReplicationStats) -> Result<Vec<ClaimRecord>> {
    suite_claims(config, Suite::Epbr, stats, &[])
}

/// Gap-variance and within-component covariance ratio identities.
pub fn verify_variance_decompositions(config: &ExperimentConfig, stats: &ReplicationStats) -> Result<Vec<ClaimRecord>> {
    suite_claims(config, Suite::Variance, stats, &[])
}

/// Conditional block structure, span split identities and conditional invariance.
pub fn verify_conditional(
    config: &ExperimentConfig,
    stats: &ReplicationStats,
    invariance: &[InvarianceResult],
) -> Result<Vec<ClaimRecord>> {
    suite_claims(config, Suite::Conditional, stats, invariance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_ids_are_unique() {
        let mut ids: Vec<&str> = REGISTRY.iter().map(|d| d.id).collect();
        ids.sort_unstable();
        let n = ids.len();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn tally_verdicts() {
        let tol = TolerancePolicy::default();
        let mut t = Tally::default();
        t.within("a".into(), 1.0, 1.2, 0.1, &tol);
        t.within("b".into(), 1.0, 2.0, 0.1, &tol);
        let rec = t.finish("x", None, "");
        assert_eq!(rec.verdict, Verdict::Fail);
        assert_eq!((rec.checks, rec.failed), (2, 1));
        assert_eq!(rec.worst.unwrap().label, "b");
        let mut t = Tally::default();
        t.exact("z".into(), 1.0, 1.0 + 1e-12, &tol);
        t.beyond("f".into(), 0.0, 1.0, 0.1, &tol);
        assert_eq!(t.finish("y", None, "").verdict, Verdict::Pass);
        assert_eq!(Tally::default().finish("e", None, "none").verdict, Verdict::NotApplicable);
    }

    #[test]
    fn nan_standard_error_falls_back_to_the_exact_floor() {
        let tol = TolerancePolicy::default();
        let mut t = Tally::default();
        t.within("n".into(), 1.0, 1.5, f64::NAN, &tol);
        assert_eq!(t.finish("n", None, "").verdict, Verdict::Fail);
    }
}
