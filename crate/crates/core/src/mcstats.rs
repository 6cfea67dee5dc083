//! Monte Carlo summaries over replications.
//!
//! All reductions run sequentially in replication order so that results do
//! not depend on how replications were scheduled. Bootstrap resamples are
//! drawn once per plan and shared by every statistic evaluated on it.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::sampler::{substream, tag};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().fold(0.0, |a, &x| a + x) / xs.len() as f64
}

/// Sample variance with denominator `n − 1`.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().fold(0.0, |a, &x| a + (x - m) * (x - m)) / (xs.len() - 1) as f64
}

pub fn sd(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Standard error of the mean.
pub fn se_of_mean(xs: &[f64]) -> f64 {
    sd(xs) / (xs.len() as f64).sqrt()
}

pub fn mean_vector(rows: &[DVector<f64>]) -> DVector<f64> {
    let p = rows.first().map_or(0, |r| r.len());
    let mut acc = DVector::zeros(p);
    for r in rows {
        acc += r;
    }
    acc / rows.len() as f64
}

/// Sample covariance (denominator `n − 1`) of a list of vectors.
pub fn covariance_matrix(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let p = rows.first().map_or(0, |r| r.len());
    let m = mean_vector(rows);
    let mut acc = DMatrix::zeros(p, p);
    for r in rows {
        let d = r - &m;
        acc += &d * d.transpose();
    }
    acc / (rows.len().max(2) - 1) as f64
}

pub fn mean_matrix(items: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (r, c) = items.first().map_or((0, 0), |m| m.shape());
    let mut acc = DMatrix::zeros(r, c);
    for m in items {
        acc += m;
    }
    acc / items.len() as f64
}

/// Bootstrap resamples of replication indices.
#[derive(Debug, Clone)]
pub struct BootstrapPlan {
    n: usize,
    resamples: Vec<Vec<usize>>,
}

impl BootstrapPlan {
    /// `b` resamples with replacement of `0..n`, from the stream keyed by
    /// `(seed, BOOTSTRAP, key...)`.
    pub fn new(n: usize, b: usize, seed: u64, key: &[u64]) -> Self {
        let mut full = vec![tag::BOOTSTRAP];
        full.extend_from_slice(key);
        let mut rng = substream(seed, &full);
        let resamples = (0..b).map(|_| (0..n).map(|_| rng.random_range(0..n)).collect()).collect();
        BootstrapPlan { n, resamples }
    }

    pub fn len(&self) -> usize {
        self.resamples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resamples.is_empty()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn resamples(&self) -> &[Vec<usize>] {
        &self.resamples
    }

    /// Statistic evaluated on every resample, in resample order.
    pub fn replicate<S: Send>(&self, stat: impl Fn(&[usize]) -> S + Sync) -> Vec<S> {
        self.resamples.par_iter().map(|idx| stat(idx)).collect()
    }

    /// Bootstrap standard error of a scalar statistic.
    pub fn se(&self, stat: impl Fn(&[usize]) -> f64 + Sync) -> f64 {
        sd(&self.replicate(stat))
    }

    /// Elementwise bootstrap standard errors of a matrix statistic.
    pub fn se_matrix(&self, stat: impl Fn(&[usize]) -> DMatrix<f64> + Sync) -> DMatrix<f64> {
        let reps = self.replicate(stat);
        let (r, c) = reps[0].shape();
        DMatrix::from_fn(r, c, |i, j| sd(&reps.iter().map(|m| m[(i, j)]).collect::<Vec<_>>()))
    }
}

/// Items picked by a resample.
pub fn pick<'a, X>(items: &'a [X], idx: &'a [usize]) -> impl Iterator<Item = &'a X> + 'a {
    idx.iter().map(move |&i| &items[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scalar_summaries() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert_relative_eq!(variance(&xs), 5.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(se_of_mean(&xs), (5.0f64 / 12.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn covariance_of_vectors() {
        let rows = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![3.0, 2.0]),
            DVector::from_vec(vec![2.0, 1.0]),
        ];
        let c = covariance_matrix(&rows);
        assert_relative_eq!(c, DMatrix::from_element(2, 2, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn plan_is_reproducible_and_se_is_sane() {
        let a = BootstrapPlan::new(500, 200, 3, &[1]);
        let b = BootstrapPlan::new(500, 200, 3, &[1]);
        assert_eq!(a.resamples(), b.resamples());
        let xs: Vec<f64> = (0..500).map(|i| ((i * 37) % 101) as f64).collect();
        let se = a.se(|idx| mean(&pick(&xs, idx).copied().collect::<Vec<_>>()));
        let analytic = se_of_mean(&xs);
        assert!((se / analytic - 1.0).abs() < 0.25, "bootstrap {se} vs analytic {analytic}");
    }
}
