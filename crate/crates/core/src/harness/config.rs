//! Experiment configuration files.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conditional::{
    conditional_canonicalize, draw_conditional_panel, ConditionalCanonicalMap, ConditionalDmpesModel,
    ConditionalModelFile,
};
use crate::error::{Error, Result};
use crate::matching::{MatchSpec, Method, MetricSource, OracleMetric};
use crate::model::{
    canonicalize, population_discriminant, population_group_moments, CanonicalMap, DmpesModel, Group, ModelFile,
};
use crate::sampler::{draw_panel, AllocationRule, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sizes {
    pub n_treated: usize,
    pub n_control: usize,
    pub n_matched_treated: usize,
    pub n_matched_control: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationSpec {
    /// Per-component counts closest to the weights, the same in every panel.
    #[default]
    Fixed,
    /// Multinomial counts drawn per panel.
    Proportional,
    /// Explicit per-component counts.
    Counts(Vec<usize>),
}

/// One matcher of an experiment; sizes come from [`Sizes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatcherConfig {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caliper_width: Option<f64>,
    #[serde(default)]
    pub metric_source: MetricSource,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub special_columns: Vec<usize>,
    #[serde(default)]
    pub strict_caliper: bool,
    #[serde(default)]
    pub backfill: bool,
    #[serde(default)]
    pub coordinate: usize,
}

impl MatcherConfig {
    pub fn new(method: Method) -> Self {
        MatcherConfig {
            method,
            caliper_width: None,
            metric_source: MetricSource::Estimated,
            special_columns: Vec::new(),
            strict_caliper: false,
            backfill: false,
            coordinate: 0,
        }
    }

    pub fn spec(&self, sizes: &Sizes) -> MatchSpec {
        MatchSpec {
            method: self.method,
            n_matched_treated: sizes.n_matched_treated,
            n_matched_control: sizes.n_matched_control,
            caliper_width: self.caliper_width,
            strict_caliper: self.strict_caliper,
            metric_source: self.metric_source,
            special_columns: self.special_columns.clone(),
            backfill: self.backfill,
            coordinate: self.coordinate,
        }
    }

    /// Label used in reports, e.g. `discriminant-caliper(0.25)`.
    pub fn label(&self) -> String {
        match (self.method, self.caliper_width) {
            (Method::DiscriminantCaliper, Some(w)) => format!("{}({w})", self.method.name()),
            _ => self.method.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedDirection {
    pub name: String,
    /// Coefficients in canonical coordinates (normalized on use).
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionSpec {
    /// Number of uniformly random unit directions.
    #[serde(default = "default_random_directions")]
    pub random: usize,
    #[serde(default)]
    pub named: Vec<NamedDirection>,
}

impl Default for DirectionSpec {
    fn default() -> Self {
        DirectionSpec { random: default_random_directions(), named: Vec::new() }
    }
}

fn default_random_directions() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TolerancePolicy {
    #[serde(default = "default_multiplier")]
    pub se_multiplier: f64,
    /// Absolute tolerance for identities that hold exactly.
    #[serde(default = "default_exact_floor")]
    pub exact_floor: f64,
    /// Largest tolerated share of replications dropped as infeasible.
    #[serde(default = "default_exclusion_cap")]
    pub max_exclusion_rate: f64,
    /// Components matched in fewer replications are not tested.
    #[serde(default = "default_min_component_reps")]
    pub min_component_reps: usize,
}

impl Default for TolerancePolicy {
    fn default() -> Self {
        TolerancePolicy {
            se_multiplier: default_multiplier(),
            exact_floor: default_exact_floor(),
            max_exclusion_rate: default_exclusion_cap(),
            min_component_reps: default_min_component_reps(),
        }
    }
}

fn default_multiplier() -> f64 {
    3.0
}
fn default_exact_floor() -> f64 {
    1e-10
}
fn default_exclusion_cap() -> f64 {
    0.01
}
fn default_min_component_reps() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvarianceSpec {
    #[serde(default = "default_panels")]
    pub panels: usize,
    #[serde(default = "default_maps")]
    pub maps: usize,
    #[serde(default = "default_inv_treated")]
    pub n_treated: usize,
    #[serde(default = "default_inv_control")]
    pub n_control: usize,
    /// Largest condition number of the random linear parts.
    #[serde(default = "default_max_condition")]
    pub max_condition: f64,
}

impl Default for InvarianceSpec {
    fn default() -> Self {
        InvarianceSpec {
            panels: default_panels(),
            maps: default_maps(),
            n_treated: default_inv_treated(),
            n_control: default_inv_control(),
            max_condition: default_max_condition(),
        }
    }
}

fn default_panels() -> usize {
    10
}
fn default_maps() -> usize {
    25
}
fn default_inv_treated() -> usize {
    50
}
fn default_inv_control() -> usize {
    150
}
fn default_max_condition() -> f64 {
    1e4
}

fn default_w_directions() -> usize {
    10
}

fn default_bootstrap() -> usize {
    200
}

/// A full Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Plain model file, or conditional model file when it has a `special` block.
    pub model: serde_json::Value,
    pub sizes: Sizes,
    #[serde(default)]
    pub allocation: AllocationSpec,
    pub matchers: Vec<MatcherConfig>,
    #[serde(default)]
    pub directions: DirectionSpec,
    /// Number of random directions orthogonal to the discriminant.
    #[serde(default = "default_w_directions")]
    pub w_directions: usize,
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub tolerance: TolerancePolicy,
    #[serde(default)]
    pub invariance: InvarianceSpec,
    /// The pooled-group variance-ratio analogue is expected to fail on this model.
    #[serde(default)]
    pub expect_pooled_failure: bool,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
}

/// Model of an experiment together with its canonical map.
#[derive(Debug, Clone)]
pub enum Population {
    Plain {
        model: DmpesModel<f64>,
        canon: CanonicalMap<f64>,
        canonical: DmpesModel<f64>,
    },
    Conditional {
        model: ConditionalDmpesModel<f64>,
        canon: ConditionalCanonicalMap<f64>,
        canonical: ConditionalDmpesModel<f64>,
    },
}

impl Population {
    pub fn dimension(&self) -> usize {
        match self {
            Population::Plain { model, .. } => model.dimension(),
            Population::Conditional { model, .. } => model.dimension(),
        }
    }

    /// Number of special columns (zero for plain models).
    pub fn s(&self) -> usize {
        match self {
            Population::Plain { .. } => 0,
            Population::Conditional { model, .. } => model.s(),
        }
    }

    pub fn k(&self) -> usize {
        match self {
            Population::Plain { model, .. } => model.k(),
            Population::Conditional { model, .. } => model.k(),
        }
    }

    pub fn group_of(&self, k: usize) -> Group {
        match self {
            Population::Plain { model, .. } => model.groups().group_of(k),
            Population::Conditional { model, .. } => model.groups().group_of(k),
        }
    }

    /// The population discriminant is zero.
    pub fn degenerate(&self) -> bool {
        match self {
            Population::Plain { canon, .. } => canon.degenerate,
            Population::Conditional { canon, .. } => canon.remainder.degenerate,
        }
    }

    /// Mean and covariance of component `k` in canonical coordinates
    /// (specials first for conditional models).
    pub fn canonical_component_moments(&self, k: usize) -> (DVector<f64>, DMatrix<f64>) {
        match self {
            Population::Plain { canonical, .. } => {
                let c = canonical.component(k);
                (c.center.clone(), c.covariance.clone())
            }
            Population::Conditional { canonical, .. } => canonical.component_moments(k),
        }
    }

    /// Rows mapped to canonical coordinates.
    pub fn to_canonical(&self, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Population::Plain { canon, .. } => canon.apply(rows),
            Population::Conditional { canon, .. } => canon.apply(rows),
        }
    }

    /// Draws one panel in the model's own coordinates.
    pub fn draw(
        &self,
        n_treated: usize,
        n_control: usize,
        rule: &AllocationRule,
        seed: u64,
        rep: u64,
    ) -> Result<Sample<f64>> {
        match self {
            Population::Plain { model, .. } => draw_panel(model, n_treated, n_control, rule, seed, rep),
            Population::Conditional { model, .. } => {
                draw_conditional_panel(model, n_treated, n_control, rule, seed, rep)
            }
        }
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self, Population::Conditional { .. })
    }

    /// Plain model seen by the sampler's allocation rules.
    pub fn allocation_model(&self) -> Result<DmpesModel<f64>> {
        match self {
            Population::Plain { model, .. } => Ok(model.clone()),
            Population::Conditional { model, .. } => model.remainder_model(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config; syntax errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(Error::Config(format!("need at least 2 replications, got {}", self.replications)));
        }
        if self.directions.random + self.directions.named.len() == 0 {
            return Err(Error::Config("at least one direction is required".into()));
        }
        if self.matchers.is_empty() {
            return Err(Error::Config("at least one matcher is required".into()));
        }
        if self.bootstrap < 2 {
            return Err(Error::Config("bootstrap needs at least 2 resamples".into()));
        }
        let s = &self.sizes;
        for m in &self.matchers {
            m.spec(s).check_sizes(s.n_treated, s.n_control)?;
            if m.method == Method::Coordinate {
                return Err(Error::Config(
                    "the coordinate matcher is a negative control, not an experiment matcher".into(),
                ));
            }
        }
        let pop = self.population()?;
        let p = pop.dimension();
        for d in &self.directions.named {
            if d.coefficients.len() != p {
                return Err(Error::Config(format!(
                    "direction {} has {} coefficients, expected {p}",
                    d.name,
                    d.coefficients.len()
                )));
            }
        }
        self.allocation_rule(&pop)?;
        Ok(())
    }

    /// Builds and validates the population and its canonical map.
    pub fn population(&self) -> Result<Population> {
        let is_conditional = self.model.get("special").is_some();
        if is_conditional {
            let file: ConditionalModelFile = serde_json::from_value(self.model.clone())?;
            let (model, _) = file.load::<f64>()?;
            let (canon, canonical) = conditional_canonicalize(&model)?;
            Ok(Population::Conditional { model, canon, canonical })
        } else {
            let file: ModelFile = serde_json::from_value(self.model.clone())?;
            let (model, _) = file.load::<f64>()?;
            let (canon, canonical) = canonicalize(&model)?;
            Ok(Population::Plain { model, canon, canonical })
        }
    }

    pub fn allocation_rule(&self, pop: &Population) -> Result<AllocationRule> {
        let model = pop.allocation_model()?;
        let rule = match &self.allocation {
            AllocationSpec::Fixed => {
                AllocationRule::fixed_from_weights(&model, self.sizes.n_treated, self.sizes.n_control)
            }
            AllocationSpec::Proportional => AllocationRule::Proportional,
            AllocationSpec::Counts(c) => AllocationRule::Fixed(c.clone()),
        };
        if let AllocationRule::Fixed(counts) = &rule {
            if counts.len() != model.k() {
                return Err(Error::Config(format!(
                    "allocation lists {} counts for {} components",
                    counts.len(),
                    model.k()
                )));
            }
            for (group, n) in [(Group::Treated, self.sizes.n_treated), (Group::Control, self.sizes.n_control)] {
                let total: usize = model.groups().members(group).iter().map(|&k| counts[k]).sum();
                if total != n {
                    return Err(Error::Config(format!(
                        "allocation for the {group} group sums to {total}, expected {n}"
                    )));
                }
            }
        }
        Ok(rule)
    }

    pub fn match_specs(&self) -> Vec<MatchSpec> {
        self.matchers.iter().map(|m| m.spec(&self.sizes)).collect()
    }
}

/// Population pooled within-group covariance and discriminant of a plain model.
pub fn oracle_metric(model: &DmpesModel<f64>, sizes: &Sizes) -> Result<OracleMetric<f64>> {
    let (_, ct) = population_group_moments(model, Group::Treated);
    let (_, cc) = population_group_moments(model, Group::Control);
    let (nt, nc) = (sizes.n_treated as f64, sizes.n_control as f64);
    let covariance = (ct * nt + cc * nc) / (nt + nc);
    Ok(OracleMetric { covariance, discriminant: population_discriminant(model)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "tiny",
        "model": {"dimension": 2, "components": [
            {"center": [0.5, 0.5], "covariance": [1, 0, 0, 1], "weight": 1, "group": "treated"},
            {"center": [0, 0], "covariance": [1, 0, 0, 1], "weight": 1, "group": "control"}]},
        "sizes": {"n_treated": 10, "n_control": 30, "n_matched_treated": 10, "n_matched_control": 10},
        "matchers": [{"method": "mahalanobis-greedy"}],
        "replications": 4,
        "seed": 1
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.allocation, AllocationSpec::Fixed);
        assert_eq!(c.directions.random, 20);
        assert_eq!(c.tolerance.se_multiplier, 3.0);
        assert_eq!(c.bootstrap, 200);
        assert!(!c.population().unwrap().is_conditional());
        let again = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn syntax_errors_report_position() {
        let err = ExperimentConfig::from_json("{\n  \"name\": ,\n}").unwrap_err();
        match err {
            Error::Json(e) => assert_eq!(e.line(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_sizes_are_rejected() {
        let bad = MINIMAL.replace("\"n_matched_control\": 10", "\"n_matched_control\": 40");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Config(_))));
        let unknown = MINIMAL.replace("\"seed\": 1", "\"seed\": 1, \"bogus\": 2");
        assert!(ExperimentConfig::from_json(&unknown).is_err());
    }
}
