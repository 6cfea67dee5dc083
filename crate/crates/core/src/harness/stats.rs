//! Per-replication moments and their Monte Carlo aggregates.
//!
//! Everything here is in canonical coordinates. Matrices are stored
//! row-major so that raw statistics serialize as plain arrays.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::decompose::{MomentSummary, RowMoments};
use crate::mcstats;
use crate::model::Group;

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn unflat(v: &[f64], p: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(p, p, v)
}

/// Moments of one component's selected units in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRow {
    pub component: usize,
    pub group: Group,
    pub n: usize,
    /// Empty when `n` is zero.
    pub mean: Vec<f64>,
    /// Row-major sample covariance when `n ≥ 2`.
    pub nu: Option<Vec<f64>>,
}

/// Moments of one design (matched or random) in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRow {
    pub mean_t: Vec<f64>,
    pub mean_c: Vec<f64>,
    pub nu_t: Option<Vec<f64>>,
    pub nu_c: Option<Vec<f64>>,
    /// One entry per model component, in component order.
    pub components: Vec<ComponentRow>,
}

impl DesignRow {
    /// Row for a moment summary; `groups[k]` is the group of component `k`.
    pub fn from_summary(summary: &MomentSummary<f64>, groups: &[Group]) -> Self {
        let p = summary.treated.mean.len();
        let components = groups
            .iter()
            .enumerate()
            .map(|(k, &group)| match summary.components.iter().find(|c| c.0 == k) {
                Some((_, _, m)) => ComponentRow {
                    component: k,
                    group,
                    n: m.n,
                    mean: m.mean.as_slice().to_vec(),
                    nu: m.covariance.as_ref().map(flat),
                },
                None => ComponentRow { component: k, group, n: 0, mean: Vec::new(), nu: None },
            })
            .collect();
        let nu = |m: &RowMoments<f64>| m.covariance.as_ref().map(flat);
        debug_assert_eq!(summary.control.mean.len(), p);
        DesignRow {
            mean_t: summary.treated.mean.as_slice().to_vec(),
            mean_c: summary.control.mean.as_slice().to_vec(),
            nu_t: nu(&summary.treated),
            nu_c: nu(&summary.control),
            components,
        }
    }

    pub fn gap(&self) -> DVector<f64> {
        DVector::from_iterator(self.mean_t.len(), self.mean_t.iter().zip(&self.mean_c).map(|(a, b)| a - b))
    }
}

/// Both designs of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRow {
    pub replication: u64,
    pub matched: DesignRow,
    pub random: DesignRow,
}

/// Aggregates of one component over replications.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentAggregate {
    pub component: usize,
    pub group: Group,
    /// Mean over replications with at least one matched unit.
    pub matched_mean: Option<DVector<f64>>,
    /// Replications contributing to `matched_mean`.
    pub mean_reps: usize,
    /// Mean sample covariance over replications with at least two matched units.
    pub matched_nu: Option<DMatrix<f64>>,
    pub nu_reps: usize,
    pub random_nu: Option<DMatrix<f64>>,
    pub random_nu_reps: usize,
}

/// Monte Carlo estimates of the expectations the claims are about.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregates {
    pub reps: usize,
    pub mean_mt: DVector<f64>,
    pub mean_mc: DVector<f64>,
    /// `E(X̄_mt − X̄_mc)` and `E(X̄_rt − X̄_rc)`.
    pub gap_m: DVector<f64>,
    pub gap_r: DVector<f64>,
    /// Covariances of the matched and random mean gaps over replications.
    pub v_m: DMatrix<f64>,
    pub v_r: DMatrix<f64>,
    pub nu_mt: DMatrix<f64>,
    pub nu_mc: DMatrix<f64>,
    pub nu_rt: DMatrix<f64>,
    pub nu_rc: DMatrix<f64>,
    pub components: Vec<ComponentAggregate>,
}

fn mean_of_flat<'a>(items: impl Iterator<Item = &'a Vec<f64>>, p: usize) -> (Option<DMatrix<f64>>, usize) {
    let mut acc = vec![0.0; p * p];
    let mut n = 0usize;
    for v in items {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        n += 1;
    }
    if n == 0 {
        return (None, 0);
    }
    (Some(unflat(&acc, p) / n as f64), n)
}

impl Aggregates {
    /// Aggregates of the rows picked by `idx` (a bootstrap resample or all rows).
    pub fn of(rows: &[RepRow], idx: &[usize]) -> Self {
        let p = rows[idx[0]].matched.mean_t.len();
        let picked: Vec<&RepRow> = idx.iter().map(|&i| &rows[i]).collect();
        let vec = |f: &dyn Fn(&RepRow) -> DVector<f64>| picked.iter().map(|r| f(r)).collect::<Vec<_>>();
        let mt = vec(&|r| DVector::from_column_slice(&r.matched.mean_t));
        let mc = vec(&|r| DVector::from_column_slice(&r.matched.mean_c));
        let gm = vec(&|r| r.matched.gap());
        let gr = vec(&|r| r.random.gap());
        let nu = |f: &dyn Fn(&RepRow) -> Option<&Vec<f64>>| {
            mean_of_flat(picked.iter().filter_map(|r| f(r)), p)
                .0
                .unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN))
        };
        let k = rows[idx[0]].matched.components.len();
        let components = (0..k)
            .map(|c| {
                let first = &rows[idx[0]].matched.components[c];
                let with_units: Vec<DVector<f64>> = picked
                    .iter()
                    .map(|r| &r.matched.components[c])
                    .filter(|row| row.n > 0)
                    .map(|row| DVector::from_column_slice(&row.mean))
                    .collect();
                let mean_reps = with_units.len();
                let (matched_nu, nu_reps) =
                    mean_of_flat(picked.iter().filter_map(|r| r.matched.components[c].nu.as_ref()), p);
                let (random_nu, random_nu_reps) =
                    mean_of_flat(picked.iter().filter_map(|r| r.random.components[c].nu.as_ref()), p);
                ComponentAggregate {
                    component: first.component,
                    group: first.group,
                    matched_mean: (mean_reps > 0).then(|| mcstats::mean_vector(&with_units)),
                    mean_reps,
                    matched_nu,
                    nu_reps,
                    random_nu,
                    random_nu_reps,
                }
            })
            .collect();
        Aggregates {
            reps: idx.len(),
            mean_mt: mcstats::mean_vector(&mt),
            mean_mc: mcstats::mean_vector(&mc),
            gap_m: mcstats::mean_vector(&gm),
            gap_r: mcstats::mean_vector(&gr),
            v_m: mcstats::covariance_matrix(&gm),
            v_r: mcstats::covariance_matrix(&gr),
            nu_mt: nu(&|r| r.matched.nu_t.as_ref()),
            nu_mc: nu(&|r| r.matched.nu_c.as_ref()),
            nu_rt: nu(&|r| r.random.nu_t.as_ref()),
            nu_rc: nu(&|r| r.random.nu_c.as_ref()),
            components,
        }
    }

    pub fn all(rows: &[RepRow]) -> Self {
        let idx: Vec<usize> = (0..rows.len()).collect();
        Self::of(rows, &idx)
    }

    pub fn component(&self, k: usize) -> &ComponentAggregate {
        &self.components[k]
    }

    /// A named second-moment target.
    pub fn target(&self, t: Target) -> &DMatrix<f64> {
        match t {
            Target::GapCovariance => &self.v_m,
            Target::TreatedCovariance => &self.nu_mt,
            Target::ControlCovariance => &self.nu_mc,
        }
    }
}

/// Matched second-moment matrices whose structure the claims describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    /// `var(X̄_mt − X̄_mc)`.
    GapCovariance,
    /// `E ν_mt`.
    TreatedCovariance,
    /// `E ν_mc`.
    ControlCovariance,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::GapCovariance, Target::TreatedCovariance, Target::ControlCovariance];

    pub fn name(self) -> &'static str {
        match self {
            Target::GapCovariance => "gap-covariance",
            Target::TreatedCovariance => "treated-covariance",
            Target::ControlCovariance => "control-covariance",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(mt: [f64; 2], mc: [f64; 2]) -> DesignRow {
        DesignRow {
            mean_t: mt.to_vec(),
            mean_c: mc.to_vec(),
            nu_t: Some(vec![1.0, 0.0, 0.0, 1.0]),
            nu_c: Some(vec![2.0, 0.5, 0.5, 2.0]),
            components: vec![ComponentRow { component: 0, group: Group::Treated, n: 1, mean: mt.to_vec(), nu: None }],
        }
    }

    #[test]
    fn aggregates_match_hand_computation() {
        let rows = vec![
            RepRow { replication: 0, matched: design([1.0, 0.0], [0.0, 0.0]), random: design([2.0, 0.0], [0.0, 0.0]) },
            RepRow { replication: 1, matched: design([3.0, 2.0], [0.0, 0.0]), random: design([2.0, 2.0], [0.0, 0.0]) },
        ];
        let a = Aggregates::all(&rows);
        assert_eq!(a.gap_m.as_slice(), &[2.0, 1.0]);
        assert_eq!(a.v_m, DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]));
        assert_eq!(a.nu_mc, DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 2.0]));
        assert_eq!(a.component(0).mean_reps, 2);
        assert!(a.component(0).matched_nu.is_none());
        let again = Aggregates::of(&rows, &[1, 1]);
        assert_eq!(again.gap_m.as_slice(), &[3.0, 2.0]);
    }

    #[test]
    fn flat_round_trip_is_row_major() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flat(&m), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(unflat(&flat(&m), 2), m);
    }
}
