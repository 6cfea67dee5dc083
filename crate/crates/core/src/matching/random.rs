//! Random subsampling baseline.

use std::collections::BTreeMap;

use rand::Rng;

use super::MatchResult;
use crate::error::{Error, Result};
use crate::sampler::{largest_remainder, Sample};
use crate::scalar::Scalar;

fn pick<R: Rng + ?Sized>(rows: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    rand::seq::index::sample(rng, rows.len(), k).into_iter().map(|i| rows[i]).collect()
}

fn subsample_group<R: Rng + ?Sized>(labels: &[usize], k: usize, stratified: bool, rng: &mut R) -> Vec<usize> {
    let mut chosen = if stratified {
        let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            strata.entry(l).or_default().push(i);
        }
        let weights: Vec<(usize, f64)> = strata.iter().map(|(&l, rows)| (l, rows.len() as f64)).collect();
        let mut out = Vec::with_capacity(k);
        for (label, count) in largest_remainder(&weights, k) {
            out.extend(pick(&strata[&label], count, rng));
        }
        out
    } else {
        pick(&(0..labels.len()).collect::<Vec<_>>(), k, rng)
    };
    chosen.sort_unstable();
    chosen
}

/// Uniform random subsets of sizes `n_rt` and `n_rc`, independent of the
/// covariates. With `stratified`, each group is sampled within component
/// labels in proportion to their counts, mirroring a fixed allocation.
pub fn random_subsample<T: Scalar, R: Rng + ?Sized>(
    sample: &Sample<T>,
    n_rt: usize,
    n_rc: usize,
    stratified: bool,
    rng: &mut R,
) -> Result<MatchResult<T>> {
    if n_rt > sample.n_treated() || n_rc > sample.n_control() {
        return Err(Error::Config(format!(
            "random subsample of ({n_rt}, {n_rc}) exceeds the panel ({}, {})",
            sample.n_treated(),
            sample.n_control()
        )));
    }
    let treated = subsample_group(&sample.treated_labels, n_rt, stratified, rng);
    let control = subsample_group(&sample.control_labels, n_rc, stratified, rng);
    Ok(MatchResult { treated, control, distances: Vec::new(), unmatched_treated: Vec::new(), backfilled: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn panel() -> Sample<f64> {
        Sample::new(
            DMatrix::from_fn(10, 2, |i, j| (i + j) as f64),
            DMatrix::from_fn(30, 2, |i, j| (i * j) as f64),
            vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1],
            vec![2; 30],
        )
        .unwrap()
    }

    #[test]
    fn full_size_returns_everything() {
        let s = panel();
        let r = random_subsample(&s, 10, 30, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(r.treated, (0..10).collect::<Vec<_>>());
        assert_eq!(r.control, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let s = panel();
        let a = random_subsample(&s, 4, 7, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = random_subsample(&s, 4, 7, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.is_without_replacement());
    }

    #[test]
    fn stratified_keeps_component_shares() {
        let s = panel();
        let r = random_subsample(&s, 5, 10, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let zeros = r.treated.iter().filter(|&&i| s.treated_labels[i] == 0).count();
        assert_eq!(zeros, 3);
        assert_eq!(r.treated.len(), 5);
    }

    #[test]
    fn oversize_is_rejected() {
        assert!(random_subsample(&panel(), 11, 1, false, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
