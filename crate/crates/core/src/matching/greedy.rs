//! Greedy nearest-neighbour matching: Mahalanobis, discriminant caliper,
//! and the single-coordinate negative control.

use nalgebra::DMatrix;

use super::metric::MatchMetric;
use super::{scores, treated_processing_order, MatchResult, MatchSpec, DEFAULT_CALIPER};
use crate::error::{Error, Result};
use crate::sampler::Sample;
use crate::scalar::Scalar;

/// Pairs produced by one greedy pass.
pub(crate) struct Pass<T> {
    pub pairs: Vec<(usize, usize, T)>,
    pub unmatched: Vec<usize>,
}

/// Each treated unit in `order` takes the unused control with the smallest
/// `cost(t, c)`; `None` marks an ineligible control. Ties go to the lowest
/// control index.
pub(crate) fn greedy_pass<T: Scalar>(
    order: &[usize],
    n_control: usize,
    used: &mut [bool],
    mut cost: impl FnMut(usize, usize) -> Option<T>,
) -> Pass<T> {
    let mut pairs = Vec::with_capacity(order.len());
    let mut unmatched = Vec::new();
    for &t in order {
        let mut best: Option<(usize, T)> = None;
        for c in 0..n_control {
            if used[c] {
                continue;
            }
            if let Some(d) = cost(t, c) {
                if best.is_none_or(|(_, b)| d < b) {
                    best = Some((c, d));
                }
            }
        }
        match best {
            Some((c, d)) => {
                used[c] = true;
                pairs.push((t, c, d));
            }
            None => unmatched.push(t),
        }
    }
    Pass { pairs, unmatched }
}

pub(crate) fn squared_distance<T: Scalar>(a: &DMatrix<T>, i: usize, b: &DMatrix<T>, j: usize) -> T {
    let mut s = T::zero();
    for k in 0..a.ncols() {
        let d = a[(i, k)] - b[(j, k)];
        s += d * d;
    }
    s
}

pub(crate) fn into_result<T: Scalar>(
    pairs: Vec<(usize, usize, T)>,
    unmatched: Vec<usize>,
    backfilled: Vec<usize>,
) -> MatchResult<T> {
    let mut result = MatchResult {
        treated: Vec::with_capacity(pairs.len()),
        control: Vec::with_capacity(pairs.len()),
        distances: Vec::with_capacity(pairs.len()),
        unmatched_treated: unmatched,
        backfilled,
    };
    for (t, c, d) in pairs {
        result.treated.push(t);
        result.control.push(c);
        result.distances.push(d);
    }
    result
}

/// Greedy 1:1 Mahalanobis matching in decreasing discriminant-score order.
pub fn mahalanobis_greedy_match<T: Scalar>(
    sample: &Sample<T>,
    spec: &MatchSpec,
    metric: &MatchMetric<T>,
) -> Result<MatchResult<T>> {
    spec.check_sizes(sample.n_treated(), sample.n_control())?;
    spec.check_one_to_one()?;
    let order = treated_processing_order(&scores(&sample.treated, &metric.discriminant), spec.n_matched_treated);
    let wt = metric.whiten(&sample.treated);
    let wc = metric.whiten(&sample.control);
    let mut used = vec![false; sample.n_control()];
    let pass = greedy_pass(&order, sample.n_control(), &mut used, |t, c| Some(squared_distance(&wt, t, &wc, c)));
    let pairs = pass.pairs.into_iter().map(|(t, c, d2)| (t, c, d2.sqrt())).collect();
    Ok(into_result(pairs, pass.unmatched, Vec::new()))
}

/// Whether a control score lies within `width` pooled SDs of a treated score.
pub fn caliper_eligible<T: Scalar>(treated_score: T, control_score: T, width: f64, score_sd: T) -> bool {
    if width.is_infinite() {
        return true;
    }
    (treated_score - control_score).abs() <= T::lit(width) * score_sd
}

/// Greedy Mahalanobis matching restricted to a discriminant-score caliper.
///
/// Treated units with no eligible control are listed in
/// `unmatched_treated`; they are then either backfilled with the unused
/// control nearest in score (default) or, under `strict_caliper`, reported as
/// infeasible.
pub fn discriminant_caliper_match<T: Scalar>(
    sample: &Sample<T>,
    spec: &MatchSpec,
    metric: &MatchMetric<T>,
) -> Result<MatchResult<T>> {
    spec.check_sizes(sample.n_treated(), sample.n_control())?;
    spec.check_one_to_one()?;
    let width = spec.caliper_width.unwrap_or(DEFAULT_CALIPER);
    let st = scores(&sample.treated, &metric.discriminant);
    let sc = scores(&sample.control, &metric.discriminant);
    let order = treated_processing_order(&st, spec.n_matched_treated);
    let wt = metric.whiten(&sample.treated);
    let wc = metric.whiten(&sample.control);
    let mut used = vec![false; sample.n_control()];
    let pass = greedy_pass(&order, sample.n_control(), &mut used, |t, c| {
        caliper_eligible(st[t], sc[c], width, metric.score_sd).then(|| squared_distance(&wt, t, &wc, c))
    });
    let mut pairs: Vec<(usize, usize, T)> = pass.pairs.into_iter().map(|(t, c, d2)| (t, c, d2.sqrt())).collect();
    if !pass.unmatched.is_empty() {
        if spec.strict_caliper {
            return Err(Error::Infeasible {
                reason: format!(
                    "{} treated units have no control within a caliper of {width} SD",
                    pass.unmatched.len()
                ),
                unmatched: pass.unmatched,
            });
        }
        let fill = greedy_pass(&pass.unmatched, sample.n_control(), &mut used, |t, c| Some((st[t] - sc[c]).abs()));
        for (t, c, _) in fill.pairs {
            pairs.push((t, c, squared_distance(&wt, t, &wc, c).sqrt()));
        }
        let backfilled = pass.unmatched.clone();
        return Ok(into_result(pairs, pass.unmatched, backfilled));
    }
    Ok(into_result(pairs, Vec::new(), Vec::new()))
}

/// Nearest-neighbour matching on one raw column. Treated units are
/// processed in decreasing order of the column, oriented so the treated mean
/// is larger; with one covariate this coincides with Mahalanobis matching.
/// Deliberately not affinely invariant.
pub fn coordinate_match<T: Scalar>(sample: &Sample<T>, spec: &MatchSpec) -> Result<MatchResult<T>> {
    spec.check_sizes(sample.n_treated(), sample.n_control())?;
    spec.check_one_to_one()?;
    let col = spec.coordinate;
    if col >= sample.dimension() {
        return Err(Error::Config(format!("column {col} out of range for p = {}", sample.dimension())));
    }
    let mean = |m: &DMatrix<T>| m.column(col).sum() / T::from_usize_lossy(m.nrows().max(1));
    let sign = if mean(&sample.treated) >= mean(&sample.control) { T::one() } else { -T::one() };
    let st: Vec<T> = sample.treated.column(col).iter().map(|&x| sign * x).collect();
    let order = treated_processing_order(&st, spec.n_matched_treated);
    let mut used = vec![false; sample.n_control()];
    let pass = greedy_pass(&order, sample.n_control(), &mut used, |t, c| {
        Some((sample.treated[(t, col)] - sample.control[(c, col)]).abs())
    });
    Ok(into_result(pass.pairs, pass.unmatched, Vec::new()))
}
