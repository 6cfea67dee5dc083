//! Exact matching on special columns followed by greedy Mahalanobis matching
//! on the residualized remainder.

use std::collections::HashMap;

use super::greedy::{greedy_pass, into_result, squared_distance};
use super::metric::estimate_metric;
use super::{scores, treated_processing_order, MatchResult, MatchSpec};
use crate::conditional::{remainder_columns, residualize_remainder};
use crate::error::{Error, Result};
use crate::linalg;
use crate::sampler::Sample;
use crate::scalar::Scalar;

/// Exact-equality key of a row's special values (`-0.0` and `0.0` agree).
fn stratum_key<T: Scalar>(rows: &nalgebra::DMatrix<T>, i: usize, special: &[usize]) -> Vec<u64> {
    special.iter().map(|&j| (rows[(i, j)].as_f64() + 0.0).to_bits()).collect()
}

/// Conditional matching: a treated unit may only take a control with
/// identical special values; within that restriction the nearest unused
/// control in the pooled Mahalanobis metric of the residualized remainder is
/// chosen, processing treated units by decreasing remainder discriminant score.
///
/// Treated units left without a same-stratum control make the match
/// infeasible unless `spec.backfill` is set, in which case they take the
/// nearest unused control from any stratum.
pub fn conditional_match<T: Scalar>(sample: &Sample<T>, spec: &MatchSpec) -> Result<MatchResult<T>> {
    spec.check_sizes(sample.n_treated(), sample.n_control())?;
    spec.check_one_to_one()?;
    let special = &spec.special_columns;
    if special.is_empty() {
        return Err(Error::Config("conditional matching needs at least one special column".into()));
    }
    let (residualized, _) = residualize_remainder(sample, special)?;
    let rest = remainder_columns(sample.dimension(), special)?;
    if rest.is_empty() {
        return Err(Error::Config("conditional matching needs at least one remainder column".into()));
    }
    let remainder = residualized.map_rows(|m| Ok(select_columns(m, &rest)))?;
    let metric = estimate_metric(&remainder)?;

    let mut strata: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut stratum_of = |rows: &nalgebra::DMatrix<T>, i: usize| {
        let next = strata.len();
        *strata.entry(stratum_key(rows, i, special)).or_insert(next)
    };
    let st: Vec<usize> = (0..sample.n_treated()).map(|i| stratum_of(&sample.treated, i)).collect();
    let sc: Vec<usize> = (0..sample.n_control()).map(|i| stratum_of(&sample.control, i)).collect();

    let order = treated_processing_order(&scores(&remainder.treated, &metric.discriminant), spec.n_matched_treated);
    let wt = metric.whiten(&remainder.treated);
    let wc = metric.whiten(&remainder.control);
    let mut used = vec![false; sample.n_control()];
    let pass = greedy_pass(&order, sample.n_control(), &mut used, |t, c| {
        (st[t] == sc[c]).then(|| squared_distance(&wt, t, &wc, c))
    });
    let mut pairs: Vec<(usize, usize, T)> = pass.pairs.into_iter().map(|(t, c, d2)| (t, c, d2.sqrt())).collect();
    if pass.unmatched.is_empty() {
        return Ok(into_result(pairs, Vec::new(), Vec::new()));
    }
    if !spec.backfill {
        return Err(Error::Infeasible {
            reason: format!("{} treated units have no unused control in their exact stratum", pass.unmatched.len()),
            unmatched: pass.unmatched,
        });
    }
    let fill =
        greedy_pass(&pass.unmatched, sample.n_control(), &mut used, |t, c| Some(squared_distance(&wt, t, &wc, c)));
    pairs.extend(fill.pairs.into_iter().map(|(t, c, d2)| (t, c, d2.sqrt())));
    let backfilled = pass.unmatched.clone();
    Ok(into_result(pairs, pass.unmatched, backfilled))
}

fn select_columns<T: Scalar>(m: &nalgebra::DMatrix<T>, cols: &[usize]) -> nalgebra::DMatrix<T> {
    linalg::select_rows(&m.transpose(), cols).transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{mahalanobis_greedy_match, Method};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn panel(seed: u64, constant_special: bool) -> Sample<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |n: usize, shift: f64| {
            DMatrix::from_fn(n, 3, |_, j| {
                if j == 0 {
                    if constant_special {
                        1.0
                    } else {
                        f64::from(u8::from(rng.random_bool(0.5)))
                    }
                } else {
                    rng.random::<f64>() + shift
                }
            })
        };
        let t = gen(12, 0.3);
        let c = gen(30, 0.0);
        Sample::unlabelled(t, c).unwrap()
    }

    #[test]
    fn pairs_share_the_special_value() {
        let s = panel(1, false);
        let spec = MatchSpec::new(Method::Conditional, 12, 12).with_special_columns(vec![0]);
        let r = conditional_match(&s, &spec).unwrap();
        for (&t, &c) in r.treated.iter().zip(&r.control) {
            assert_eq!(s.treated[(t, 0)], s.control[(c, 0)]);
        }
        assert!(r.is_without_replacement());
    }

    #[test]
    fn constant_special_reduces_to_greedy_on_remainder() {
        let s = panel(2, true);
        let spec = MatchSpec::new(Method::Conditional, 12, 12).with_special_columns(vec![0]);
        let r = conditional_match(&s, &spec).unwrap();
        let rem = s.map_rows(|m| Ok(m.columns(1, 2).into_owned())).unwrap();
        let g = mahalanobis_greedy_match(
            &rem,
            &MatchSpec::new(Method::MahalanobisGreedy, 12, 12),
            &estimate_metric(&rem).unwrap(),
        )
        .unwrap();
        assert_eq!(r.treated, g.treated);
        assert_eq!(r.control, g.control);
    }

    #[test]
    fn empty_stratum_is_infeasible_without_backfill() {
        let t = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 2.0, 0.1]);
        let c = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.3, 1.0, 0.9, 1.0, -0.4]);
        let s = Sample::unlabelled(t, c).unwrap();
        let spec = MatchSpec::new(Method::Conditional, 2, 2).with_special_columns(vec![0]);
        match conditional_match(&s, &spec) {
            Err(Error::Infeasible { unmatched, .. }) => assert_eq!(unmatched, vec![1]),
            other => panic!("expected infeasible, got {other:?}"),
        }
        let r = conditional_match(&s, &spec.with_backfill(true)).unwrap();
        assert_eq!(r.backfilled, vec![1]);
    }
}
