//! Replication loop and exact invariance experiments.
//!
//! Replications run in parallel but each one is a pure function of
//! `(seed, replication)`, and results are collected in replication order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{oracle_metric, ExperimentConfig, MatcherConfig, Population};
use super::stats::{DesignRow, RepRow};
use crate::decompose::matched_moments;
use crate::error::{Error, Result};
use crate::linalg;
use crate::matching::{run_match, MatchSpec, Method, MetricSource, OracleMetric};
use crate::model::{apply_affine, AffineMap, Group};
use crate::sampler::{substream, tag, AllocationRule, Sample};

/// A replication dropped for one matcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub replication: u64,
    pub reason: String,
}

/// Matched-design rows of one matcher; `None` marks an excluded replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherRun {
    pub label: String,
    pub matcher: MatcherConfig,
    pub matched: Vec<Option<DesignRow>>,
    pub excluded: Vec<Exclusion>,
}

impl MatcherRun {
    /// Rows of the replications this matcher completed.
    pub fn rows(&self, random: &[DesignRow]) -> Vec<RepRow> {
        self.matched
            .iter()
            .zip(random)
            .enumerate()
            .filter_map(|(i, (m, r))| {
                m.as_ref().map(|m| RepRow { replication: i as u64, matched: m.clone(), random: r.clone() })
            })
            .collect()
    }
}

/// Everything recorded by the replication loop, in canonical coordinates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReplicationStats {
    /// Random-subsample design, shared by every matcher.
    pub random: Vec<DesignRow>,
    pub matchers: Vec<MatcherRun>,
}

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool.
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn is_exclusion(e: &Error) -> bool {
    matches!(e, Error::Infeasible { .. } | Error::Conditioning(_))
}

fn oracle_for(pop: &Population, config: &ExperimentConfig) -> Result<Option<OracleMetric<f64>>> {
    if !config.matchers.iter().any(|m| m.metric_source == MetricSource::Oracle) {
        return Ok(None);
    }
    match pop {
        Population::Plain { model, .. } => Ok(Some(oracle_metric(model, &config.sizes)?)),
        Population::Conditional { .. } => {
            Err(Error::Config("oracle metrics are only available for plain models".into()))
        }
    }
}

struct Replication {
    random: DesignRow,
    matched: Vec<std::result::Result<DesignRow, String>>,
}

fn replicate(
    config: &ExperimentConfig,
    pop: &Population,
    rule: &AllocationRule,
    specs: &[MatchSpec],
    oracle: Option<&OracleMetric<f64>>,
    groups: &[Group],
    rep: u64,
) -> Result<Replication> {
    let s = &config.sizes;
    let panel = pop.draw(s.n_treated, s.n_control, rule, config.seed, rep)?;
    let canon = panel.map_rows(|m| pop.to_canonical(m))?;
    let mut rng = substream(config.seed, &[rep, tag::SUBSAMPLE, 0]);
    let subsample =
        crate::matching::random_subsample(&panel, s.n_matched_treated, s.n_matched_control, rule.is_fixed(), &mut rng)?;
    let random = DesignRow::from_summary(&matched_moments(&canon, &subsample)?, groups);
    let mut matched = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let mut rng = substream(config.seed, &[rep, tag::SUBSAMPLE, 1 + i as u64]);
        match run_match(&panel, spec, oracle, &mut rng) {
            Ok(result) => matched.push(Ok(DesignRow::from_summary(&matched_moments(&canon, &result)?, groups))),
            Err(e) if is_exclusion(&e) => matched.push(Err(e.to_string())),
            Err(e) => return Err(e),
        }
    }
    Ok(Replication { random, matched })
}

/// Draws `replications` panels, matches each with every configured matcher
/// and records matched and random-design moments.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ReplicationStats> {
    config.validate()?;
    let pop = config.population()?;
    let rule = config.allocation_rule(&pop)?;
    let specs = config.match_specs();
    let oracle = oracle_for(&pop, config)?;
    let groups: Vec<Group> = (0..pop.k()).map(|k| pop.group_of(k)).collect();
    let reps: Vec<Replication> = (0..config.replications as u64)
        .into_par_iter()
        .map(|rep| replicate(config, &pop, &rule, &specs, oracle.as_ref(), &groups, rep))
        .collect::<Result<_>>()?;
    let mut matchers: Vec<MatcherRun> = config
        .matchers
        .iter()
        .map(|m| MatcherRun { label: m.label(), matcher: m.clone(), matched: Vec::new(), excluded: Vec::new() })
        .collect();
    let mut random = Vec::with_capacity(reps.len());
    for (rep, r) in reps.into_iter().enumerate() {
        random.push(r.random);
        for (run, m) in matchers.iter_mut().zip(r.matched) {
            match m {
                Ok(row) => run.matched.push(Some(row)),
                Err(reason) => {
                    run.matched.push(None);
                    run.excluded.push(Exclusion { replication: rep as u64, reason });
                }
            }
        }
    }
    Ok(ReplicationStats { random, matchers })
}

/// What an invariance experiment tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvarianceKind {
    /// Full affine maps; selections must be identical.
    Affine,
    /// Full affine maps on the single-coordinate matcher; some selection must change.
    CoordinateControl,
    /// Affine maps of the remainder columns only; selections must be identical.
    ConditionalRemainder,
    /// Maps that mix remainder columns into the special ones; some selection must change.
    ConditionalMixing,
}

impl InvarianceKind {
    /// Invariance is expected (as opposed to a negative control).
    pub fn expects_invariance(&self) -> bool {
        matches!(self, InvarianceKind::Affine | InvarianceKind::ConditionalRemainder)
    }
}

/// Outcome of matching original and mapped panels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceResult {
    pub kind: InvarianceKind,
    pub method: Method,
    pub panels: usize,
    pub maps: usize,
    /// Panel-map pairs compared.
    pub checked: usize,
    /// Pairs whose selected `(T, C)` index sets were identical.
    pub identical: usize,
    /// Largest condition number among the linear parts used.
    pub max_condition: f64,
    /// First `(panel, map)` whose selection changed.
    pub first_change: Option<(usize, usize)>,
}

impl InvarianceResult {
    pub fn passed(&self) -> bool {
        if self.kind.expects_invariance() {
            self.checked > 0 && self.identical == self.checked
        } else {
            self.identical < self.checked
        }
    }
}

/// Random `p × p` orthogonal matrix from the QR factorization of a Gaussian matrix.
fn random_orthogonal<R: Rng + ?Sized>(p: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // fix column signs so the draw is Haar distributed
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Random linear map `Q₁ D Q₂` with log-uniform singular values in
/// `[1, max_condition]`, plus a Gaussian offset of scale 10.
pub fn random_affine_map<R: Rng + ?Sized>(p: usize, max_condition: f64, rng: &mut R) -> AffineMap<f64> {
    let q1 = random_orthogonal(p, rng);
    let q2 = random_orthogonal(p, rng);
    let d = DMatrix::from_diagonal(&DVector::from_fn(p, |_, _| max_condition.powf(rng.random::<f64>())));
    let offset = DVector::from_fn(p, |_, _| 10.0 * rng.sample::<f64, _>(StandardNormal));
    AffineMap { linear: q1 * d * q2, offset }
}

fn invariance_rule(config: &ExperimentConfig, pop: &Population) -> Result<AllocationRule> {
    let inv = &config.invariance;
    Ok(match config.allocation_rule(pop)? {
        AllocationRule::Proportional => AllocationRule::Proportional,
        AllocationRule::Fixed(_) => {
            AllocationRule::fixed_from_weights(&pop.allocation_model()?, inv.n_treated, inv.n_control)
        }
    })
}

fn invariance_panels(config: &ExperimentConfig, pop: &Population) -> Result<Vec<Sample<f64>>> {
    let inv = &config.invariance;
    let rule = invariance_rule(config, pop)?;
    let master = substream(config.seed, &[tag::AFFINE_MAPS]).random::<u64>();
    (0..inv.panels as u64).map(|i| pop.draw(inv.n_treated, inv.n_control, &rule, master, i)).collect()
}

fn compare_under_maps(
    config: &ExperimentConfig,
    kind: InvarianceKind,
    spec: &MatchSpec,
    n_maps: usize,
    make_map: &(dyn Fn(&mut rand_chacha::ChaCha8Rng) -> AffineMap<f64> + Sync),
) -> Result<InvarianceResult> {
    let pop = config.population()?;
    let panels = invariance_panels(config, &pop)?;
    let outcomes: Vec<Vec<(bool, f64)>> = panels
        .par_iter()
        .enumerate()
        .map(|(pi, panel)| -> Result<Vec<(bool, f64)>> {
            let mut rng = substream(config.seed, &[tag::AFFINE_MAPS, pi as u64]);
            let base = run_match(panel, spec, None, &mut rng.clone());
            (0..n_maps)
                .map(|_| {
                    let map = make_map(&mut rng);
                    let cond = linalg::condition_number(&map.linear);
                    let mapped = panel.map_rows(|m| apply_affine(&map, m))?;
                    let other = run_match(&mapped, spec, None, &mut rng.clone());
                    let same = match (&base, other) {
                        (Ok(a), Ok(b)) => a.same_sets(&b),
                        (Err(_), Err(_)) => true,
                        _ => false,
                    };
                    Ok((same, cond))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut result = InvarianceResult {
        kind,
        method: spec.method,
        panels: panels.len(),
        maps: n_maps,
        checked: 0,
        identical: 0,
        max_condition: 0.0,
        first_change: None,
    };
    for (pi, row) in outcomes.iter().enumerate() {
        for (mi, &(same, cond)) in row.iter().enumerate() {
            result.checked += 1;
            result.max_condition = result.max_condition.max(cond);
            if same {
                result.identical += 1;
            } else if result.first_change.is_none() {
                result.first_change = Some((pi, mi));
            }
        }
    }
    Ok(result)
}

fn invariance_spec(config: &ExperimentConfig, method: Method) -> MatchSpec {
    let n = config.invariance.n_treated;
    MatchSpec::new(method, n, n)
}

/// Matches each invariance panel before and after `n_maps` random affine
/// maps and counts identical selections. For [`Method::Coordinate`] the
/// result is a negative control that should record changes.
pub fn verify_affine_invariance(method: Method, config: &ExperimentConfig, n_maps: usize) -> Result<InvarianceResult> {
    if method == Method::Conditional {
        return verify_conditional_invariance(config, n_maps, false);
    }
    let p = config.population()?.dimension();
    let kind = if method == Method::Coordinate { InvarianceKind::CoordinateControl } else { InvarianceKind::Affine };
    let bound = config.invariance.max_condition;
    compare_under_maps(config, kind, &invariance_spec(config, method), n_maps, &|rng| random_affine_map(p, bound, rng))
}

/// Conditional matching under remainder-only maps, or (with `mixing`) under
/// maps that add a remainder column to every special column.
pub fn verify_conditional_invariance(
    config: &ExperimentConfig,
    n_maps: usize,
    mixing: bool,
) -> Result<InvarianceResult> {
    let pop = config.population()?;
    let Population::Conditional { model, .. } = &pop else {
        return Err(Error::Config("conditional invariance needs a conditional model".into()));
    };
    let special = model.special_columns().to_vec();
    let remainder = model.remainder_columns();
    let p = model.dimension();
    let base = config
        .matchers
        .iter()
        .find(|m| m.method == Method::Conditional)
        .map(|m| m.spec(&config.sizes))
        .unwrap_or_else(|| MatchSpec::new(Method::Conditional, 0, 0).with_special_columns(special.clone()));
    let n = config.invariance.n_treated;
    // with mixing the strata dissolve, so backfill keeps both runs feasible
    let spec = MatchSpec { n_matched_treated: n, n_matched_control: n, backfill: base.backfill || mixing, ..base };
    let bound = config.invariance.max_condition;
    let r = remainder.len();
    let embed = move |inner: &AffineMap<f64>| {
        let mut linear = DMatrix::identity(p, p);
        let mut offset = DVector::zeros(p);
        for (a, &ra) in remainder.iter().enumerate() {
            offset[ra] = inner.offset[a];
            for (b, &rb) in remainder.iter().enumerate() {
                linear[(ra, rb)] = inner.linear[(a, b)];
            }
        }
        AffineMap { linear, offset }
    };
    let first_remainder = model.remainder_columns()[0];
    let make = move |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut map = embed(&random_affine_map(r, bound, rng));
        if mixing {
            for &sc in &special {
                map.linear[(sc, first_remainder)] = 0.37;
            }
        }
        map
    };
    let kind = if mixing { InvarianceKind::ConditionalMixing } else { InvarianceKind::ConditionalRemainder };
    compare_under_maps(config, kind, &spec, n_maps, &make)
}

/// The invariance section: every invariant matcher, the coordinate control
/// and, for conditional models, the conditional pair.
pub fn invariance_section(config: &ExperimentConfig) -> Result<Vec<InvarianceResult>> {
    let maps = config.invariance.maps;
    let mut out = Vec::new();
    for method in
        [Method::MahalanobisGreedy, Method::MahalanobisOptimal, Method::DiscriminantCaliper, Method::Coordinate]
    {
        out.push(verify_affine_invariance(method, config, maps)?);
    }
    if config.population()?.is_conditional() {
        out.push(verify_conditional_invariance(config, maps, false)?);
        out.push(verify_conditional_invariance(config, maps, true)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"{
        "name": "tiny",
        "model": {"dimension": 3, "components": [
            {"center": [0.5, 0.5, 0.5], "covariance": [1, 0, 0, 0, 1, 0, 0, 0, 1], "weight": 1, "group": "treated"},
            {"center": [0, 0, 0], "covariance": [1, 0, 0, 0, 1, 0, 0, 0, 1], "weight": 1, "group": "control"}]},
        "sizes": {"n_treated": 20, "n_control": 60, "n_matched_treated": 20, "n_matched_control": 20},
        "matchers": [{"method": "mahalanobis-greedy"}, {"method": "discriminant-caliper", "caliper_width": 0.25}],
        "replications": 12,
        "seed": 11,
        "invariance": {"panels": 2, "maps": 3, "n_treated": 15, "n_control": 45}
    }"#;

    #[test]
    fn replications_are_schedule_independent() {
        let config = ExperimentConfig::from_json(CONFIG).unwrap();
        let one = with_workers(Some(1), || run_experiment(&config)).unwrap().unwrap();
        let four = with_workers(Some(4), || run_experiment(&config)).unwrap().unwrap();
        assert_eq!(one, four);
        assert_eq!(one.random.len(), 12);
        assert_eq!(one.matchers.len(), 2);
        assert!(one.matchers[0].excluded.is_empty());
        assert_eq!(one.matchers[0].rows(&one.random).len(), 12);
    }

    #[test]
    fn random_maps_respect_condition_bound() {
        let mut rng = substream(1, &[9]);
        for _ in 0..50 {
            let m = random_affine_map(4, 1e4, &mut rng);
            let c = linalg::condition_number(&m.linear);
            assert!(c <= 1e4 * (1.0 + 1e-9), "condition {c}");
        }
    }

    #[test]
    fn small_invariance_section() {
        let config = ExperimentConfig::from_json(CONFIG).unwrap();
        let results = invariance_section(&config).unwrap();
        assert_eq!(results.len(), 4);
        for r in &results {
            assert_eq!(r.checked, 6);
            assert!(r.passed(), "{r:?}");
        }
    }
}
