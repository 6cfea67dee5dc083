//! Reproducible treated/control panels drawn from a DMPES model.
//!
//! Every random draw comes from a ChaCha substream keyed by
//! `(master_seed, replication, group, purpose, component)`, so a panel is a
//! pure function of its key no matter which thread produces it.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Component, DmpesModel, Group, RadialLaw};
use crate::scalar::Scalar;

/// Purpose tags mixed into substream keys.
pub mod tag {
    pub const ALLOCATION: u64 = 1;
    pub const ROWS: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SUBSAMPLE: u64 = 4;
    pub const BOOTSTRAP: u64 = 5;
    pub const AFFINE_MAPS: u64 = 6;
    pub const DIRECTIONS: u64 = 7;
    pub const SPECIAL: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent random stream for `(master_seed, key...)`.
pub fn substream(master_seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(master_seed);
    for &k in key {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Draws a spherical vector with identity covariance under the given radial law.
fn spherical_draw<R: Rng + ?Sized>(radial: RadialLaw, p: usize, rng: &mut R, out: &mut [f64]) {
    for x in out.iter_mut() {
        *x = StandardNormal.sample(rng);
    }
    match radial {
        RadialLaw::Normal => {}
        RadialLaw::StudentT { df } => {
            let w: f64 = ChiSquared::new(df).expect("df validated").sample(rng);
            let scale = ((df - 2.0) / w).sqrt();
            out.iter_mut().for_each(|x| *x *= scale);
        }
        RadialLaw::UniformBall => {
            let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            let u: f64 = rng.random();
            let radius = ((p + 2) as f64).sqrt() * u.powf(1.0 / p as f64);
            out.iter_mut().for_each(|x| *x *= radius / norm);
        }
    }
}

/// `n` i.i.d. rows from an ellipsoidal component with mean `μ` and covariance `Σ`.
pub fn sample_component<T: Scalar, R: Rng + ?Sized>(
    component: &Component<T>,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<T>> {
    let p = component.center.len();
    component.radial.validate()?;
    let cov: DMatrix<f64> = linalg::cast_matrix(&component.covariance);
    let chol = linalg::spd_cholesky(&cov, "component covariance")?;
    let l = chol.l();
    let mu: DVector<f64> = linalg::cast_vector(&component.center);
    let mut out = DMatrix::zeros(n, p);
    let mut s = vec![0.0; p];
    for i in 0..n {
        spherical_draw(component.radial, p, rng, &mut s);
        for r in 0..p {
            let mut acc = mu[r];
            for c in 0..=r {
                acc += l[(r, c)] * s[c];
            }
            out[(i, r)] = T::lit(acc);
        }
    }
    Ok(out)
}

/// How per-component counts are chosen inside each group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationRule {
    /// Multinomial counts from the within-group weights.
    Proportional,
    /// Fixed per-component counts, indexed by component.
    Fixed(Vec<usize>),
}

impl AllocationRule {
    /// Fixed counts closest to the within-group weights (largest remainder).
    pub fn fixed_from_weights<T: Scalar>(model: &DmpesModel<T>, n_treated: usize, n_control: usize) -> Self {
        let mut counts = vec![0; model.k()];
        for (group, n) in [(Group::Treated, n_treated), (Group::Control, n_control)] {
            let weights: Vec<(usize, f64)> =
                model.within_group_weights(group).into_iter().map(|(k, w)| (k, w.as_f64())).collect();
            for (k, c) in largest_remainder(&weights, n) {
                counts[k] = c;
            }
        }
        AllocationRule::Fixed(counts)
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, AllocationRule::Fixed(_))
    }

    fn check<T: Scalar>(&self, model: &DmpesModel<T>, n_treated: usize, n_control: usize) -> Result<()> {
        if let AllocationRule::Fixed(counts) = self {
            if counts.len() != model.k() {
                return Err(Error::Config(format!(
                    "fixed allocation lists {} counts for {} components",
                    counts.len(),
                    model.k()
                )));
            }
            for (group, n) in [(Group::Treated, n_treated), (Group::Control, n_control)] {
                let total: usize = model.groups().members(group).iter().map(|&k| counts[k]).sum();
                if total != n {
                    return Err(Error::Config(format!(
                        "fixed allocation for the {group} group sums to {total}, expected {n}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Integer counts summing to `n` proportional to `weights` (ties to lower index).
pub fn largest_remainder(weights: &[(usize, f64)], n: usize) -> Vec<(usize, usize)> {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let mut out: Vec<(usize, usize, f64)> = weights
        .iter()
        .map(|&(k, w)| {
            let exact = n as f64 * w / total;
            (k, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = out.iter().map(|o| o.1).sum();
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| out[b].2.total_cmp(&out[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        out[i].1 += 1;
    }
    out.into_iter().map(|(k, c, _)| (k, c)).collect()
}

/// Multinomial counts by sequential binomials.
fn multinomial<R: Rng + ?Sized>(n: usize, weights: &[f64], rng: &mut R) -> Vec<usize> {
    let mut remaining_n = n as u64;
    let mut remaining_mass: f64 = weights.iter().sum();
    let mut counts = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        if i + 1 == weights.len() {
            counts.push(remaining_n as usize);
            break;
        }
        let prob = if remaining_mass > 0.0 { (w / remaining_mass).clamp(0.0, 1.0) } else { 0.0 };
        let c =
            if remaining_n == 0 { 0 } else { Binomial::new(remaining_n, prob).expect("valid binomial").sample(rng) };
        counts.push(c as usize);
        remaining_n -= c;
        remaining_mass -= w;
    }
    counts
}

/// Where a panel came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub master_seed: u64,
    pub replication: u64,
}

/// Treated and control covariate matrices with component-of-origin labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T: Scalar> {
    pub treated: DMatrix<T>,
    pub control: DMatrix<T>,
    pub treated_labels: Vec<usize>,
    pub control_labels: Vec<usize>,
    pub seed: Option<SeedRecord>,
}

impl<T: Scalar> Sample<T> {
    pub fn new(
        treated: DMatrix<T>,
        control: DMatrix<T>,
        treated_labels: Vec<usize>,
        control_labels: Vec<usize>,
    ) -> Result<Self> {
        if treated.ncols() != control.ncols() {
            return Err(Error::Dimension { expected: treated.ncols(), found: control.ncols() });
        }
        if treated_labels.len() != treated.nrows() {
            return Err(Error::Dimension { expected: treated.nrows(), found: treated_labels.len() });
        }
        if control_labels.len() != control.nrows() {
            return Err(Error::Dimension { expected: control.nrows(), found: control_labels.len() });
        }
        Ok(Sample { treated, control, treated_labels, control_labels, seed: None })
    }

    /// Unlabelled sample: every treated row gets label 0, every control row label 1.
    pub fn unlabelled(treated: DMatrix<T>, control: DMatrix<T>) -> Result<Self> {
        let (nt, nc) = (treated.nrows(), control.nrows());
        Self::new(treated, control, vec![0; nt], vec![1; nc])
    }

    pub fn dimension(&self) -> usize {
        self.treated.ncols()
    }

    pub fn n_treated(&self) -> usize {
        self.treated.nrows()
    }

    pub fn n_control(&self) -> usize {
        self.control.nrows()
    }

    pub fn rows(&self, group: Group) -> &DMatrix<T> {
        match group {
            Group::Treated => &self.treated,
            Group::Control => &self.control,
        }
    }

    pub fn labels(&self, group: Group) -> &[usize] {
        match group {
            Group::Treated => &self.treated_labels,
            Group::Control => &self.control_labels,
        }
    }

    /// Applies the same transformation to both groups, keeping labels.
    pub fn map_rows(&self, f: impl Fn(&DMatrix<T>) -> Result<DMatrix<T>>) -> Result<Self> {
        Ok(Sample {
            treated: f(&self.treated)?,
            control: f(&self.control)?,
            treated_labels: self.treated_labels.clone(),
            control_labels: self.control_labels.clone(),
            seed: self.seed,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample {
            treated: linalg::cast_matrix(&self.treated),
            control: linalg::cast_matrix(&self.control),
            treated_labels: self.treated_labels.clone(),
            control_labels: self.control_labels.clone(),
            seed: self.seed,
        }
    }
}

/// Draws one group's rows: counts per component, rows per component, then a
/// within-group shuffle.
pub(crate) fn draw_group<T: Scalar>(
    components: &[(usize, &Component<T>)],
    counts: &[usize],
    group: Group,
    master_seed: u64,
    replication: u64,
) -> Result<(DMatrix<T>, Vec<usize>)> {
    let p = components[0].1.center.len();
    let n: usize = counts.iter().sum();
    let mut rows = DMatrix::zeros(n, p);
    let mut labels = Vec::with_capacity(n);
    let mut at = 0;
    for (&(k, comp), &count) in components.iter().zip(counts) {
        let mut rng = substream(master_seed, &[replication, group.tag(), tag::ROWS, k as u64]);
        let block = sample_component(comp, count, &mut rng)?;
        rows.rows_mut(at, count).copy_from(&block);
        labels.extend(std::iter::repeat_n(k, count));
        at += count;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(master_seed, &[replication, group.tag(), tag::SHUFFLE]));
    let shuffled = linalg::select_rows(&rows, &order);
    let labels = order.iter().map(|&i| labels[i]).collect();
    Ok((shuffled, labels))
}

pub(crate) fn group_counts(
    rule: &AllocationRule,
    members: &[usize],
    weights: &[f64],
    n: usize,
    group: Group,
    master_seed: u64,
    replication: u64,
) -> Vec<usize> {
    match rule {
        AllocationRule::Fixed(counts) => members.iter().map(|&k| counts[k]).collect(),
        AllocationRule::Proportional => {
            let mut rng = substream(master_seed, &[replication, group.tag(), tag::ALLOCATION]);
            multinomial(n, weights, &mut rng)
        }
    }
}

/// Draws a treated/control panel. Bitwise deterministic in
/// `(master_seed, replication)`.
pub fn draw_panel<T: Scalar>(
    model: &DmpesModel<T>,
    n_treated: usize,
    n_control: usize,
    rule: &AllocationRule,
    master_seed: u64,
    replication: u64,
) -> Result<Sample<T>> {
    if n_treated == 0 || n_control == 0 {
        return Err(Error::Config("panel sizes must be at least one".into()));
    }
    rule.check(model, n_treated, n_control)?;
    let mut parts = Vec::with_capacity(2);
    for (group, n) in [(Group::Treated, n_treated), (Group::Control, n_control)] {
        let weighted = model.within_group_weights(group);
        let members: Vec<usize> = weighted.iter().map(|w| w.0).collect();
        let weights: Vec<f64> = weighted.iter().map(|w| w.1.as_f64()).collect();
        let counts = group_counts(rule, &members, &weights, n, group, master_seed, replication);
        let comps: Vec<(usize, &Component<T>)> = members.iter().map(|&k| (k, model.component(k))).collect();
        parts.push(draw_group(&comps, &counts, group, master_seed, replication)?);
    }
    let (control, control_labels) = parts.pop().expect("two groups");
    let (treated, treated_labels) = parts.pop().expect("two groups");
    Ok(Sample { treated, control, treated_labels, control_labels, seed: Some(SeedRecord { master_seed, replication }) })
}

/// Writes a panel as CSV with columns `group, component, x1..xp`.
pub fn write_panel_csv<T: Scalar, W: Write>(sample: &Sample<T>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let p = sample.dimension();
    let mut header = vec!["group".to_string(), "component".to_string()];
    header.extend((1..=p).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for group in [Group::Treated, Group::Control] {
        let rows = sample.rows(group);
        for (i, &label) in sample.labels(group).iter().enumerate() {
            let mut rec = vec![group.as_str().to_string(), label.to_string()];
            rec.extend((0..p).map(|j| format!("{:?}", rows[(i, j)].as_f64())));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a panel written by [`write_panel_csv`]. Rows keep their file order
/// within each group.
pub fn read_panel_csv<R: Read>(input: R) -> Result<Sample<f64>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "group" || &headers[1] != "component" {
        return Err(Error::Config("panel CSV must start with columns group,component,x1..".into()));
    }
    let p = headers.len() - 2;
    let mut data = [Vec::new(), Vec::new()];
    let mut labels = [Vec::new(), Vec::new()];
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let g = match &rec[0] {
            "treated" => 0,
            "control" => 1,
            other => return Err(Error::Config(format!("row {}: unknown group {other:?}", line + 2))),
        };
        let label: usize =
            rec[1].trim().parse().map_err(|_| Error::Config(format!("row {}: bad component label", line + 2)))?;
        labels[g].push(label);
        for j in 0..p {
            let x: f64 = rec[j + 2]
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("row {}: bad value in column x{}", line + 2, j + 1)))?;
            data[g].push(x);
        }
    }
    let [dt, dc] = data;
    let [lt, lc] = labels;
    let treated = DMatrix::from_row_slice(lt.len(), p, &dt);
    let control = DMatrix::from_row_slice(lc.len(), p, &dc);
    Sample::new(treated, control, lt, lc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{canonical_normal_model, GroupAssignment};
    use Group::{Control, Treated};

    #[test]
    fn zero_rows_is_empty() {
        let c = Component::<f64>::spherical(DVector::zeros(3), 1.0);
        let m = sample_component(&c, 0, &mut substream(1, &[])).unwrap();
        assert_eq!(m.shape(), (0, 3));
    }

    #[test]
    fn substreams_differ_by_key() {
        let a: u64 = substream(42, &[0, 1]).random();
        let b: u64 = substream(42, &[1, 0]).random();
        let c: u64 = substream(42, &[0, 1]).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn panel_is_deterministic_and_labels_respect_groups() {
        let m = canonical_normal_model::<f64>(
            2,
            &[1.0, 0.5, 0.0],
            &[1.0, 1.0, 2.0],
            &[1.0, 1.0, 1.0],
            &[Treated, Control, Control],
        )
        .unwrap();
        let a = draw_panel(&m, 20, 30, &AllocationRule::Proportional, 9, 3).unwrap();
        let b = draw_panel(&m, 20, 30, &AllocationRule::Proportional, 9, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.treated_labels.iter().all(|&k| k == 0));
        assert!(a.control_labels.iter().all(|&k| k == 1 || k == 2));
        assert_eq!((a.n_treated(), a.n_control()), (20, 30));
        let c = draw_panel(&m, 20, 30, &AllocationRule::Proportional, 9, 4).unwrap();
        assert_ne!(a.treated, c.treated);
    }

    #[test]
    fn fixed_allocation_counts_are_checked() {
        let m = canonical_normal_model::<f64>(2, &[1.0, 0.0], &[1.0, 1.0], &[1.0, 1.0], &[Treated, Control]).unwrap();
        assert!(draw_panel(&m, 5, 5, &AllocationRule::Fixed(vec![4, 5]), 1, 0).is_err());
        let s = draw_panel(&m, 5, 5, &AllocationRule::Fixed(vec![5, 5]), 1, 0).unwrap();
        assert_eq!(s.n_treated(), 5);
    }

    #[test]
    fn largest_remainder_sums_to_n() {
        let c = largest_remainder(&[(0, 1.0), (1, 1.0), (2, 1.0)], 100);
        assert_eq!(c, vec![(0, 34), (1, 33), (2, 33)]);
    }

    #[test]
    fn csv_round_trip() {
        let comps =
            vec![Component::<f64>::spherical(DVector::zeros(2), 1.0), Component::spherical(DVector::zeros(2), 1.0)];
        let m = DmpesModel::new(comps, vec![1.0, 1.0], GroupAssignment::new(2, vec![0], vec![1]).unwrap()).unwrap();
        let s = draw_panel(&m, 3, 4, &AllocationRule::Proportional, 5, 0).unwrap();
        let mut buf = Vec::new();
        write_panel_csv(&s, &mut buf).unwrap();
        let back = read_panel_csv(buf.as_slice()).unwrap();
        assert_eq!(back.treated, s.treated);
        assert_eq!(back.control_labels, s.control_labels);
    }
}
