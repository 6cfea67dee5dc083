//! Minimum-cost rectangular assignment (Hungarian method with potentials)
//! and the optimal 1:1 Mahalanobis matcher built on it.

use nalgebra::DMatrix;

use super::greedy::{into_result, squared_distance};
use super::metric::MatchMetric;
use super::{scores, treated_processing_order, MatchResult, MatchSpec};
use crate::error::{Error, Result};
use crate::sampler::Sample;
use crate::scalar::Scalar;

/// Solves `min Σ_i cost[i, σ(i)]` over injective `σ` from rows to columns
/// (`rows ≤ cols`). Returns `σ` as a column index per row.
///
/// Columns are scanned in increasing index order and only strict
/// improvements are taken, so the result is deterministic.
pub fn solve_assignment<T: Scalar>(cost: &DMatrix<T>) -> Result<Vec<usize>> {
    let (n, m) = cost.shape();
    if n > m {
        return Err(Error::Config(format!("assignment needs rows <= columns, got {n}x{m}")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Config("assignment costs must be finite".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let inf = T::huge();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); m + 1];
    // row (1-based) currently assigned to column j; 0 = free
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![usize::MAX; n];
    for j in 1..=m {
        if owner[j] != 0 {
            sigma[owner[j] - 1] = j - 1;
        }
    }
    Ok(sigma)
}

/// `Σ_i cost[i, σ(i)]`, summed in row order.
pub fn assignment_cost<T: Scalar>(cost: &DMatrix<T>, sigma: &[usize]) -> T {
    sigma.iter().enumerate().fold(T::zero(), |acc, (i, &j)| acc + cost[(i, j)])
}

/// Exhaustive search over all injective assignments; returns the
/// lexicographically first minimizer. Intended for small test instances.
pub fn brute_force_assignment<T: Scalar>(cost: &DMatrix<T>) -> (T, Vec<usize>) {
    fn go<T: Scalar>(
        cost: &DMatrix<T>,
        row: usize,
        used: &mut [bool],
        current: &mut Vec<usize>,
        best: &mut Option<(T, Vec<usize>)>,
    ) {
        if row == cost.nrows() {
            let c = assignment_cost(cost, current);
            if best.as_ref().is_none_or(|(b, _)| c < *b) {
                *best = Some((c, current.clone()));
            }
            return;
        }
        for j in 0..cost.ncols() {
            if !used[j] {
                used[j] = true;
                current.push(j);
                go(cost, row + 1, used, current, best);
                current.pop();
                used[j] = false;
            }
        }
    }
    let mut best = None;
    go(cost, 0, &mut vec![false; cost.ncols()], &mut Vec::new(), &mut best);
    best.unwrap_or((T::zero(), Vec::new()))
}

/// 1:1 matching minimizing the total pooled-Mahalanobis pair distance.
/// The selected treated units follow the same score-based truncation as the
/// greedy matcher; pairs are listed in treated processing order.
pub fn mahalanobis_optimal_match<T: Scalar>(
    sample: &Sample<T>,
    spec: &MatchSpec,
    metric: &MatchMetric<T>,
) -> Result<MatchResult<T>> {
    spec.check_sizes(sample.n_treated(), sample.n_control())?;
    spec.check_one_to_one()?;
    let order = treated_processing_order(&scores(&sample.treated, &metric.discriminant), spec.n_matched_treated);
    let wt = metric.whiten(&sample.treated);
    let wc = metric.whiten(&sample.control);
    let cost = DMatrix::from_fn(order.len(), sample.n_control(), |i, c| squared_distance(&wt, order[i], &wc, c).sqrt());
    let sigma = solve_assignment(&cost)?;
    let pairs = order.iter().zip(&sigma).enumerate().map(|(i, (&t, &c))| (t, c, cost[(i, c)])).collect();
    Ok(into_result(pairs, Vec::new(), Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{mahalanobis_greedy_match, Method, OracleMetric};
    use crate::model::Direction;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_line_example() {
        let s = Sample::unlabelled(
            DMatrix::from_column_slice(2, 1, &[5.0, 6.0]),
            DMatrix::from_column_slice(2, 1, &[5.5, 0.0]),
        )
        .unwrap();
        let metric = OracleMetric {
            covariance: DMatrix::identity(1, 1),
            discriminant: Direction::unit(DVector::from_element(1, 1.0)).unwrap(),
        }
        .to_metric()
        .unwrap();
        let r = mahalanobis_optimal_match(&s, &MatchSpec::new(Method::MahalanobisOptimal, 2, 2), &metric).unwrap();
        let mut pairs: Vec<(usize, usize)> = r.treated.iter().copied().zip(r.control.iter().copied()).collect();
        pairs.sort();
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(r.total_distance(), 5.5);
        // greedy starting from 5 would take 5.5 first and pay 0.5 + 6
        let forced = DMatrix::from_row_slice(2, 2, &[0.5, 5.0, 0.5, 6.0]);
        assert_eq!(assignment_cost(&forced, &[0, 1]), 6.5);
    }

    #[test]
    fn single_pair() {
        let cost = DMatrix::from_element(1, 1, 3.0);
        assert_eq!(solve_assignment(&cost).unwrap(), vec![0]);
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.random_range(1..=5);
            let m = rng.random_range(n..=7);
            let cost = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>() * 10.0);
            let sigma = solve_assignment(&cost).unwrap();
            let (best, _) = brute_force_assignment(&cost);
            assert_eq!(assignment_cost(&cost, &sigma), best);
        }
    }

    #[test]
    fn optimal_never_worse_than_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = DMatrix::from_fn(8, 3, |_, _| rng.random::<f64>() + 0.3);
            let c = DMatrix::from_fn(14, 3, |_, _| rng.random::<f64>());
            let s = Sample::unlabelled(t, c).unwrap();
            let m = crate::matching::estimate_metric(&s).unwrap();
            let g = mahalanobis_greedy_match(&s, &MatchSpec::new(Method::MahalanobisGreedy, 8, 8), &m).unwrap();
            let o = mahalanobis_optimal_match(&s, &MatchSpec::new(Method::MahalanobisOptimal, 8, 8), &m).unwrap();
            assert!(o.total_distance() <= g.total_distance() + 1e-12);
            assert!(o.is_without_replacement());
        }
    }

    #[test]
    fn rejects_tall_cost() {
        assert!(solve_assignment(&DMatrix::from_element(3, 2, 1.0)).is_err());
    }
}
