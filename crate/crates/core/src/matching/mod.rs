//! Matching methods: selection of index sets `(T, C)` from a treated/control
//! sample.
//!
//! All methods except [`coordinate_match`] are affinely invariant: they
//! depend on the covariates only through the pooled within-group
//! Mahalanobis metric and the estimated discriminant score, both of which
//! transform equivariantly. [`conditional_match`] is invariant to affine
//! maps of the remainder columns only.

mod assignment;
mod conditional;
mod greedy;
mod metric;
mod random;

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Direction;
use crate::sampler::Sample;
use crate::scalar::Scalar;

pub use assignment::{assignment_cost, brute_force_assignment, mahalanobis_optimal_match, solve_assignment};
pub use conditional::conditional_match;
pub use greedy::{caliper_eligible, coordinate_match, discriminant_caliper_match, mahalanobis_greedy_match};
pub use metric::{estimate_metric, MatchMetric, OracleMetric};
pub use random::random_subsample;

/// Default caliper width in pooled standard deviations of the discriminant score.
pub const DEFAULT_CALIPER: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MahalanobisGreedy,
    MahalanobisOptimal,
    DiscriminantCaliper,
    Conditional,
    Random,
    /// Nearest neighbour on one raw coordinate; not affinely invariant.
    Coordinate,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::MahalanobisGreedy => "mahalanobis-greedy",
            Method::MahalanobisOptimal => "mahalanobis-optimal",
            Method::DiscriminantCaliper => "discriminant-caliper",
            Method::Conditional => "conditional",
            Method::Random => "random",
            Method::Coordinate => "coordinate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricSource {
    /// Pooled sample covariance and sample discriminant.
    #[default]
    Estimated,
    /// Population covariance and discriminant supplied by the caller.
    Oracle,
}

/// What to match and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub method: Method,
    pub n_matched_treated: usize,
    pub n_matched_control: usize,
    /// Caliper width in pooled-SD units of the discriminant score.
    #[serde(default)]
    pub caliper_width: Option<f64>,
    /// Under calipers: fail instead of backfilling treated units with no eligible control.
    #[serde(default)]
    pub strict_caliper: bool,
    #[serde(default)]
    pub metric_source: MetricSource,
    /// Special (exactly matched) columns for the conditional method.
    #[serde(default)]
    pub special_columns: Vec<usize>,
    /// Conditional method: match treated units from strata without controls
    /// to the nearest control anywhere instead of failing.
    #[serde(default)]
    pub backfill: bool,
    /// Column used by the coordinate method.
    #[serde(default)]
    pub coordinate: usize,
}

impl MatchSpec {
    pub fn new(method: Method, n_matched_treated: usize, n_matched_control: usize) -> Self {
        MatchSpec {
            method,
            n_matched_treated,
            n_matched_control,
            caliper_width: None,
            strict_caliper: false,
            metric_source: MetricSource::Estimated,
            special_columns: Vec::new(),
            backfill: false,
            coordinate: 0,
        }
    }

    pub fn with_caliper(mut self, width: f64) -> Self {
        self.caliper_width = Some(width);
        self
    }

    pub fn with_special_columns(mut self, columns: Vec<usize>) -> Self {
        self.special_columns = columns;
        self
    }

    pub fn with_backfill(mut self, backfill: bool) -> Self {
        self.backfill = backfill;
        self
    }

    pub fn with_oracle(mut self) -> Self {
        self.metric_source = MetricSource::Oracle;
        self
    }

    pub fn with_coordinate(mut self, column: usize) -> Self {
        self.coordinate = column;
        self
    }

    /// Checks the target sizes against a sample.
    pub fn check_sizes(&self, n_treated: usize, n_control: usize) -> Result<()> {
        if self.n_matched_treated == 0 || self.n_matched_treated > n_treated {
            return Err(Error::Config(format!("N_mt = {} must be in 1..={n_treated}", self.n_matched_treated)));
        }
        if self.n_matched_control > n_control {
            return Err(Error::Config(format!(
                "N_mc = {} exceeds the {n_control} available controls",
                self.n_matched_control
            )));
        }
        if let Some(w) = self.caliper_width {
            if !(w > 0.0) {
                return Err(Error::Config(format!("caliper width must be positive, got {w}")));
            }
        }
        Ok(())
    }

    /// 1:1 methods need as many controls as treated units.
    fn check_one_to_one(&self) -> Result<()> {
        if self.n_matched_control < self.n_matched_treated {
            return Err(Error::Config(format!(
                "1:1 matching needs N_mc >= N_mt, got N_mc = {} < N_mt = {}",
                self.n_matched_control, self.n_matched_treated
            )));
        }
        if self.n_matched_control > self.n_matched_treated {
            return Err(Error::Config(format!(
                "variable-ratio matching is not supported (N_mc = {} > N_mt = {})",
                self.n_matched_control, self.n_matched_treated
            )));
        }
        Ok(())
    }
}

/// Selected units. For pair-matching methods `treated[i]` is paired with
/// `control[i]` at `distances[i]`; random subsamples carry no pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult<T: Scalar> {
    pub treated: Vec<usize>,
    pub control: Vec<usize>,
    pub distances: Vec<T>,
    /// Treated rows that found no eligible control (before any backfill).
    pub unmatched_treated: Vec<usize>,
    /// Treated rows matched by the backfill step.
    pub backfilled: Vec<usize>,
}

impl<T: Scalar> MatchResult<T> {
    pub fn treated_set(&self) -> BTreeSet<usize> {
        self.treated.iter().copied().collect()
    }

    pub fn control_set(&self) -> BTreeSet<usize> {
        self.control.iter().copied().collect()
    }

    /// Exact equality of the selected `(T, C)` index sets.
    pub fn same_sets(&self, other: &MatchResult<T>) -> bool {
        self.treated_set() == other.treated_set() && self.control_set() == other.control_set()
    }

    pub fn total_distance(&self) -> T {
        self.distances.iter().fold(T::zero(), |a, &d| a + d)
    }

    /// No index appears twice within a group.
    pub fn is_without_replacement(&self) -> bool {
        self.treated_set().len() == self.treated.len() && self.control_set().len() == self.control.len()
    }
}

/// Runs the method named by `spec`. `oracle` is required when
/// `spec.metric_source` is [`MetricSource::Oracle`]; `rng` is used only by
/// the random method.
pub fn run_match<T: Scalar, R: rand::Rng + ?Sized>(
    sample: &Sample<T>,
    spec: &MatchSpec,
    oracle: Option<&OracleMetric<T>>,
    rng: &mut R,
) -> Result<MatchResult<T>> {
    let metric = || -> Result<MatchMetric<T>> {
        match spec.metric_source {
            MetricSource::Estimated => estimate_metric(sample),
            MetricSource::Oracle => oracle
                .ok_or_else(|| Error::Config("oracle metric requested but no model metric supplied".into()))?
                .to_metric(),
        }
    };
    match spec.method {
        Method::MahalanobisGreedy => mahalanobis_greedy_match(sample, spec, &metric()?),
        Method::MahalanobisOptimal => mahalanobis_optimal_match(sample, spec, &metric()?),
        Method::DiscriminantCaliper => discriminant_caliper_match(sample, spec, &metric()?),
        Method::Conditional => conditional_match(sample, spec),
        Method::Random => random_subsample(sample, spec.n_matched_treated, spec.n_matched_control, false, rng),
        Method::Coordinate => coordinate_match(sample, spec),
    }
}

/// Writes `pair_id, treated_row, control_row, distance`.
pub fn write_match_csv<T: Scalar, W: Write>(result: &MatchResult<T>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pair_id", "treated_row", "control_row", "distance"])?;
    for (i, (&t, &c)) in result.treated.iter().zip(&result.control).enumerate() {
        let d = result.distances.get(i).map(|d| format!("{:?}", d.as_f64())).unwrap_or_default();
        w.write_record([i.to_string(), t.to_string(), c.to_string(), d])?;
    }
    w.flush()?;
    Ok(())
}

/// Discriminant direction used for processing order, in sample coordinates.
pub(crate) fn scores<T: Scalar>(rows: &nalgebra::DMatrix<T>, direction: &Direction<T>) -> Vec<T> {
    rows.row_iter().map(|r| r.transpose().dot(direction.coefficients())).collect()
}

/// Chooses `n` treated rows (lowest scores when truncating) and returns them in
/// processing order: decreasing score, ties by lowest index.
pub(crate) fn treated_processing_order<T: Scalar>(scores: &[T], n: usize) -> Vec<usize> {
    let mut by_score: Vec<usize> = (0..scores.len()).collect();
    by_score.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores").then(a.cmp(&b)));
    let mut kept: Vec<usize> = by_score.into_iter().take(n).collect();
    kept.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b)));
    kept
}
