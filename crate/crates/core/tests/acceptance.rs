//! Acceptance criteria, one printed line per criterion.
//!
//! Every criterion is a list of sub-checks. A sub-check is either exact
//! (deterministic given the seed: set equality, exhaustive optima, identities
//! at 1e-10, byte equality) or Monte Carlo (a verdict of the 3-SE rule).
//! The line reads PASS only when all sub-checks pass. The test panics when an
//! exact sub-check fails; Monte Carlo failures are printed and left to the
//! reader, since each run makes hundreds of 3-SE comparisons.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dmpes::decompose::BiasCase;
use dmpes::harness::{
    render_json, render_text, verify_affine_invariance, with_workers, ExperimentConfig, RawStats, Suite, Verdict,
    VerificationReport,
};
use dmpes::matching::{
    assignment_cost, brute_force_assignment, estimate_metric, mahalanobis_optimal_match, solve_assignment, MatchSpec,
    Method,
};
use dmpes::model::{Component, RadialLaw};
use dmpes::sampler::{sample_component, substream, Sample};

/// Per-coordinate mean tolerance in standard errors for the sampler check.
const MEAN_SES: f64 = 4.0;
/// Relative Frobenius tolerance on sampler covariances.
const COV_REL: f64 = 0.05;
const SAMPLER_N: usize = 100_000;
const ORACLE_INSTANCES: usize = 200;
const AFFINE_MAPS: usize = 25;

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Exact,
    MonteCarlo,
}

struct Sub {
    what: String,
    kind: Kind,
    ok: bool,
}

#[derive(Default)]
struct Criterion {
    subs: Vec<Sub>,
}

impl Criterion {
    fn check(&mut self, kind: Kind, what: impl Into<String>, ok: bool) {
        self.subs.push(Sub { what: what.into(), kind, ok });
    }

    fn passed(&self) -> bool {
        self.subs.iter().all(|s| s.ok)
    }

    fn exact_failures(&self) -> Vec<&str> {
        self.subs.iter().filter(|s| !s.ok && s.kind == Kind::Exact).map(|s| s.what.as_str()).collect()
    }

    fn report(&self, number: usize, title: &str, started: Instant) -> bool {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        println!("criterion {number} {verdict}: {title} ({:.1}s)", started.elapsed().as_secs_f64());
        for s in self.subs.iter().filter(|s| !s.ok) {
            let kind = if s.kind == Kind::Exact { "exact" } else { "monte carlo" };
            println!("    failed ({kind}): {}", s.what);
        }
        self.exact_failures().is_empty()
    }
}

fn config(name: &str) -> ExperimentConfig {
    let path: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn verdict_is(c: &mut Criterion, report: &VerificationReport, claim: &str, want: Verdict) {
    let records: Vec<_> = report.claims_named(claim).collect();
    c.check(Kind::Exact, format!("{}: claim {claim} present", report.name), !records.is_empty());
    for r in records {
        c.check(
            Kind::MonteCarlo,
            format!(
                "{}: {claim} [{}] is {} ({} of {} checks failed)",
                report.name,
                r.method.as_deref().unwrap_or("-"),
                r.verdict.name(),
                r.failed,
                r.checks
            ),
            r.verdict == want,
        );
    }
}

fn exact_verdict_is(c: &mut Criterion, report: &VerificationReport, claim: &str, want: Verdict) {
    let records: Vec<_> = report.claims_named(claim).collect();
    c.check(Kind::Exact, format!("{}: claim {claim} present", report.name), !records.is_empty());
    for r in records {
        c.check(
            Kind::Exact,
            format!("{}: {claim} [{}] is {}", report.name, r.method.as_deref().unwrap_or("-"), r.verdict.name()),
            r.verdict == want,
        );
    }
}

fn criterion_1() -> Criterion {
    let mut c = Criterion::default();
    let cfg = config("invariance_p4.json");
    let inv = &cfg.invariance;
    c.check(
        Kind::Exact,
        "panel shape p=4, N_t=50, N_c=150, 10 panels",
        cfg.population().unwrap().dimension() == 4 && inv.n_treated == 50 && inv.n_control == 150 && inv.panels == 10,
    );
    for method in [Method::MahalanobisGreedy, Method::MahalanobisOptimal, Method::DiscriminantCaliper] {
        let r = verify_affine_invariance(method, &cfg, AFFINE_MAPS).unwrap();
        c.check(
            Kind::Exact,
            format!("{}: {} of {} selections identical", method.name(), r.identical, r.checked),
            r.checked == 10 * AFFINE_MAPS && r.identical == r.checked,
        );
    }
    let r = verify_affine_invariance(Method::Coordinate, &cfg, AFFINE_MAPS).unwrap();
    c.check(
        Kind::Exact,
        format!("coordinate control changed {} selections", r.checked - r.identical),
        r.identical < r.checked,
    );
    c
}

fn criterion_2() -> Criterion {
    let mut c = Criterion::default();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut mismatched = 0;
    for instance in 0..ORACLE_INSTANCES {
        // one-dimensional costs |a - c| tie across nested pairings; p >= 2 keeps
        // instances in general position so the minimizer is unique
        let p: usize = rng.random_range(2..=3);
        let nt: usize = rng.random_range(1..=6);
        // the metric needs N_t + N_c > p + 2
        let nc = rng.random_range(nt.max((p + 3).saturating_sub(nt))..=8);
        let draw = |n: usize, shift: f64, rng: &mut ChaCha8Rng| {
            DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 2.0 - 1.0 + shift)
        };
        let treated = draw(nt, 0.5, &mut rng);
        let control = draw(nc, 0.0, &mut rng);
        let sample = Sample::unlabelled(treated, control).unwrap();
        let metric = estimate_metric(&sample).unwrap();
        let cost = DMatrix::from_fn(nt, nc, |i, j| {
            metric.distance(&sample.treated.row(i).transpose(), &sample.control.row(j).transpose())
        });
        let (best, best_sigma) = brute_force_assignment(&cost);
        let sigma = solve_assignment(&cost).unwrap();
        let matched =
            mahalanobis_optimal_match(&sample, &MatchSpec::new(Method::MahalanobisOptimal, nt, nt), &metric).unwrap();
        let mut pairs: Vec<(usize, usize)> =
            matched.treated.iter().copied().zip(matched.control.iter().copied()).collect();
        pairs.sort_unstable();
        let brute_pairs: Vec<(usize, usize)> = best_sigma.iter().copied().enumerate().collect();
        if assignment_cost(&cost, &sigma) != best || pairs != brute_pairs {
            mismatched += 1;
            println!("    instance {instance}: p={p} N_t={nt} N_c={nc} differs from exhaustive search");
        }
    }
    c.check(
        Kind::Exact,
        format!("{mismatched} of {ORACLE_INSTANCES} instances differ from the exhaustive minimum"),
        mismatched == 0,
    );
    c
}

fn criterion_3(generic: &VerificationReport, zero: &VerificationReport) -> Criterion {
    let mut c = Criterion::default();
    verdict_is(&mut c, generic, "mean-along-ones", Verdict::Pass);
    verdict_is(&mut c, generic, "exchangeable-structure", Verdict::Pass);
    verdict_is(&mut c, generic, "component-structure", Verdict::Pass);
    verdict_is(&mut c, zero, "zero-discriminant-structure", Verdict::Pass);
    c
}

fn criterion_4(generic: &VerificationReport, zero: &VerificationReport) -> Criterion {
    let mut c = Criterion::default();
    verdict_is(&mut c, generic, "epbr", Verdict::Pass);
    let along_z: Vec<_> = generic.directions.iter().filter(|d| d.direction == "Z").collect();
    c.check(
        Kind::Exact,
        "direction Z is tested for every matcher",
        along_z.len() == generic.claims_named("epbr").count(),
    );
    for d in along_z {
        c.check(
            Kind::Exact,
            format!("{}: pbr along Z equals pbr_Z ({:?} vs {:?})", d.method, d.pbr_y, d.pbr_z),
            d.case == BiasCase::Ratio && d.pbr_y.is_some() && d.pbr_y == d.pbr_z,
        );
    }
    verdict_is(&mut c, zero, "epbr-zero-discriminant", Verdict::Degenerate);
    c
}

fn criterion_5(generic: &VerificationReport, crafted: &VerificationReport) -> Criterion {
    let mut c = Criterion::default();
    verdict_is(&mut c, generic, "variance-ratio", Verdict::Pass);
    verdict_is(&mut c, generic, "component-variance-ratio", Verdict::Pass);
    verdict_is(&mut c, generic, "w-ratio-constancy", Verdict::Pass);
    verdict_is(&mut c, crafted, "component-variance-ratio", Verdict::Pass);
    verdict_is(&mut c, crafted, "pooled-variance-ratio-failure", Verdict::Pass);
    c
}

fn criterion_6(conditional: &VerificationReport) -> Criterion {
    let mut c = Criterion::default();
    exact_verdict_is(&mut c, conditional, "script-lemma", Verdict::Pass);
    verdict_is(&mut c, conditional, "block-structure", Verdict::Pass);
    verdict_is(&mut c, conditional, "script-epbr", Verdict::Pass);
    exact_verdict_is(&mut c, conditional, "conditional-invariance", Verdict::Pass);
    exact_verdict_is(&mut c, conditional, "mixing-negative-control", Verdict::Pass);
    c
}

fn criterion_7() -> Criterion {
    let mut c = Criterion::default();
    let p = 3;
    let a = DMatrix::from_row_slice(p, p, &[1.0, 0.0, 0.0, 0.5, 2.0, 0.0, -0.25, 0.75, 1.5]);
    let sigma: DMatrix<f64> = &a * a.transpose();
    let center = DVector::from_column_slice(&[1.0f64, -2.0, 0.5]);
    for (i, law) in [RadialLaw::Normal, RadialLaw::StudentT { df: 5.0 }, RadialLaw::UniformBall].into_iter().enumerate()
    {
        let comp = Component::new(center.clone(), sigma.clone(), law);
        let x = sample_component(&comp, SAMPLER_N, &mut substream(7, &[i as u64])).unwrap();
        let n = SAMPLER_N as f64;
        let mean = x.row_mean().transpose();
        let worst_mean =
            (0..p).map(|j| (mean[j] - center[j]).abs() / (sigma[(j, j)].sqrt() / n.sqrt())).fold(0.0, f64::max);
        c.check(Kind::MonteCarlo, format!("{law}: worst mean deviation {worst_mean:.2} SE"), worst_mean < MEAN_SES);
        let centered = DMatrix::from_fn(SAMPLER_N, p, |r, j| x[(r, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1.0);
        let rel = (&cov - &sigma).norm() / sigma.norm();
        c.check(Kind::MonteCarlo, format!("{law}: covariance relative error {rel:.4}"), rel < COV_REL);
    }
    c
}

fn criterion_8(generic: &ExperimentConfig) -> Criterion {
    let mut c = Criterion::default();
    let render = |workers: usize| {
        let raw = with_workers(Some(workers), || RawStats::collect(generic, Suite::All)).unwrap().unwrap();
        let report = raw.report().unwrap();
        (serde_json::to_string(&raw).unwrap(), render_json(&report).unwrap(), render_text(&report))
    };
    let one = render(1);
    c.check(Kind::Exact, "two runs with one worker are byte-identical", one == render(1));
    c.check(Kind::Exact, "one and eight workers are byte-identical", one == render(8));
    c
}

fn collect(cfg: &ExperimentConfig) -> VerificationReport {
    RawStats::collect(cfg, Suite::All).unwrap().report().unwrap()
}

#[test]
fn acceptance() {
    let mut exact_ok = true;

    let t = Instant::now();
    exact_ok &= criterion_1().report(1, "affine invariance and coordinate negative control", t);

    let t = Instant::now();
    exact_ok &= criterion_2().report(2, "optimal matching equals exhaustive assignment", t);

    let t = Instant::now();
    let generic_cfg = config("generic_k3.json");
    let generic = collect(&generic_cfg);
    let zero = collect(&config("generic_zero_z.json"));
    exact_ok &= criterion_3(&generic, &zero).report(3, "exchangeable structure of matched moments", t);

    let t = Instant::now();
    exact_ok &= criterion_4(&generic, &zero).report(4, "equal percent bias reduction", t);

    let t = Instant::now();
    let crafted = collect(&config("crafted_pooled.json"));
    exact_ok &= criterion_5(&generic, &crafted).report(5, "variance-ratio decompositions", t);

    let t = Instant::now();
    let conditional = collect(&config("conditional_s1_r3.json"));
    exact_ok &= criterion_6(&conditional).report(6, "conditional suite", t);

    let t = Instant::now();
    exact_ok &= criterion_7().report(7, "sampler moments", t);

    let t = Instant::now();
    exact_ok &= criterion_8(&generic_cfg).report(8, "determinism across runs and worker counts", t);

    assert!(exact_ok, "an exact acceptance check failed");
}
