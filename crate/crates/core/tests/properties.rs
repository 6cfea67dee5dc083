//! Property tests of the model, matching and decomposition invariants.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dmpes::conditional::script_decompose;
use dmpes::decompose::{decompose_direction, fit_exchangeable, pbr, ratio_decomposition};
use dmpes::harness::random_affine_map;
use dmpes::matching::{
    assignment_cost, brute_force_assignment, estimate_metric, run_match, solve_assignment, MatchSpec, Method,
};
use dmpes::model::{apply_affine, canonical_normal_model, canonicalize, Direction, Group};
use dmpes::sampler::{draw_panel, largest_remainder, read_panel_csv, substream, write_panel_csv, AllocationRule};

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn unit(rng: &mut ChaCha8Rng, p: usize) -> Direction<f64> {
    loop {
        let v = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        if let Some(d) = Direction::unit(v) {
            return d;
        }
    }
}

fn ones_outer(p: usize) -> DMatrix<f64> {
    DMatrix::from_element(p, p, 1.0)
}

fn small_model(p: usize, delta: f64) -> dmpes::DmpesModelF64 {
    canonical_normal_model(p, &[delta, 0.0], &[1.0, 1.3], &[1.0, 1.0], &[Group::Treated, Group::Control]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn invariant_matchers_ignore_affine_maps(seed in any::<u64>(), p in 2usize..5, method in 0usize..3) {
        let method = [Method::MahalanobisGreedy, Method::MahalanobisOptimal, Method::DiscriminantCaliper][method];
        let model = small_model(p, 0.7);
        let panel = draw_panel(&model, 12, 30, &AllocationRule::Proportional, seed, 0).unwrap();
        let mut spec = MatchSpec::new(method, 12, 12);
        if method == Method::DiscriminantCaliper {
            spec = spec.with_caliper(0.25);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let base = run_match(&panel, &spec, None, &mut rng).unwrap();
        let map = random_affine_map(p, 1e3, &mut rng);
        let moved = panel.map_rows(|m| apply_affine(&map, m)).unwrap();
        let after = run_match(&moved, &spec, None, &mut rng).unwrap();
        prop_assert!(base.same_sets(&after));
        prop_assert!(base.is_without_replacement());
    }

    #[test]
    fn canonical_form_has_spherical_components_on_the_ones_line(seed in any::<u64>(), p in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = normal_matrix(&mut rng, p, p) + DMatrix::identity(p, p) * 3.0;
        let b = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let canonical = canonical_normal_model::<f64>(
            p, &[0.9, 0.3, -0.4], &[1.0, 1.7, 0.6], &[0.5, 0.5, 1.0], &[Group::Treated, Group::Treated, Group::Control],
        ).unwrap();
        let map = dmpes::model::AffineMap::new(a, b).unwrap();
        let model = canonical.transformed(&map).unwrap();
        let (canon, back) = canonicalize(&model).unwrap();
        let u = DVector::from_element(p, 1.0);
        for k in 0..back.k() {
            let c = back.component(k);
            let s2 = canon.sigmas2[k];
            prop_assert!((&c.covariance - DMatrix::identity(p, p) * s2).norm() < 1e-8 * s2.max(1.0));
            prop_assert!((&c.center - &u * canon.deltas[k]).norm() < 1e-8);
        }
        // invariants up to the centering of the control group and the scale of component 0
        prop_assert!((canon.sigmas2[1] - 1.7).abs() < 1e-8 && (canon.sigmas2[2] - 0.6).abs() < 1e-8);
        prop_assert!((canon.deltas[0] - canon.deltas[1] - 0.6).abs() < 1e-8);
    }

    #[test]
    fn direction_split_reconstructs_and_is_orthogonal(seed in any::<u64>(), p in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = unit(&mut rng, p);
        let z = Direction::along_ones(p);
        let d = decompose_direction(&y, &z);
        prop_assert!((d.reconstruct() - y.coefficients()).norm() < 1e-12);
        prop_assert!(d.w.coefficients().dot(z.coefficients()).abs() < 1e-12);
        prop_assert!(d.rho.abs() <= 1.0);
        prop_assert!((d.rho - y.coefficients().dot(z.coefficients())).abs() < 1e-12);
    }

    #[test]
    fn ratio_identity_is_exact_for_exchangeable_moments(
        seed in any::<u64>(), p in 2usize..7, a in 0.1f64..3.0, b in -0.05f64..2.0, v in 0.1f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matched = DMatrix::identity(p, p) * a + ones_outer(p) * b;
        let random = DMatrix::identity(p, p) * v;
        let d = decompose_direction(&unit(&mut rng, p), &Direction::along_ones(p));
        let r = ratio_decomposition(&matched, &random, &d).unwrap();
        prop_assert!((r.lhs - r.rhs).abs() < 1e-10 * r.lhs.abs().max(1.0));
    }

    #[test]
    fn exchangeable_fit_recovers_parameters(p in 2usize..9, k in 0.1f64..5.0, c in -0.1f64..3.0) {
        let m = (DMatrix::identity(p, p) + ones_outer(p) * c) * k;
        let fit = fit_exchangeable(&m).unwrap();
        prop_assert!((fit.k - k).abs() < 1e-10 * k);
        prop_assert!((fit.c - c).abs() < 1e-10 * c.abs().max(1.0));
        prop_assert!(fit.residual < 1e-12);
    }

    #[test]
    fn script_split_satisfies_the_lemma(seed in any::<u64>(), s in 1usize..3, r in 2usize..5, degenerate in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = unit(&mut rng, s + r);
        let d = script_decompose(&y, s, degenerate).unwrap();
        let (special_w, cross, spread) = d.lemma_residuals();
        prop_assert!(special_w < 1e-12 && cross < 1e-12 && spread < 1e-12);
        let back = &d.psi * d.psi_weight + &d.gamma * d.gamma_weight;
        prop_assert!((back - y.coefficients()).norm() < 1e-12);
    }

    #[test]
    fn assignment_matches_exhaustive_search(seed in any::<u64>(), n in 1usize..6, extra in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = DMatrix::from_fn(n, n + extra, |_, _| rng.random::<f64>() * 10.0);
        let sigma = solve_assignment(&cost).unwrap();
        let (best, best_sigma) = brute_force_assignment(&cost);
        prop_assert_eq!(assignment_cost(&cost, &sigma), best);
        prop_assert_eq!(sigma, best_sigma);
    }

    #[test]
    fn greedy_never_beats_optimal(seed in any::<u64>(), p in 2usize..4) {
        let panel = draw_panel(&small_model(p, 1.0), 8, 20, &AllocationRule::Proportional, seed, 0).unwrap();
        let metric = estimate_metric(&panel).unwrap();
        let greedy = dmpes::matching::mahalanobis_greedy_match(&panel, &MatchSpec::new(Method::MahalanobisGreedy, 8, 8), &metric).unwrap();
        let optimal = dmpes::matching::mahalanobis_optimal_match(&panel, &MatchSpec::new(Method::MahalanobisOptimal, 8, 8), &metric).unwrap();
        prop_assert!(optimal.total_distance() <= greedy.total_distance() + 1e-12);
    }

    #[test]
    fn largest_remainder_is_close_to_the_quota(n in 0usize..500, w in prop::collection::vec(0.01f64..5.0, 1..6)) {
        let weights: Vec<(usize, f64)> = w.iter().copied().enumerate().collect();
        let counts = largest_remainder(&weights, n);
        prop_assert_eq!(counts.iter().map(|c| c.1).sum::<usize>(), n);
        let total: f64 = w.iter().sum();
        for ((_, c), wk) in counts.iter().zip(&w) {
            prop_assert!((*c as f64 - n as f64 * wk / total).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn panels_are_reproducible_and_round_trip_through_csv(seed in any::<u64>(), rep in 0u64..100) {
        let model = small_model(3, 0.5);
        let a = draw_panel(&model, 5, 9, &AllocationRule::Proportional, seed, rep).unwrap();
        let b = draw_panel(&model, 5, 9, &AllocationRule::Proportional, seed, rep).unwrap();
        prop_assert_eq!(&a, &b);
        let mut buf = Vec::new();
        write_panel_csv(&a, &mut buf).unwrap();
        let back = read_panel_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(&back.treated, &a.treated);
        prop_assert_eq!(&back.control, &a.control);
        prop_assert_eq!(&back.control_labels, &a.control_labels);
    }

    #[test]
    fn substreams_differ_by_key(seed in any::<u64>(), k in any::<u64>()) {
        let x: u64 = substream(seed, &[k]).random();
        let y: u64 = substream(seed, &[k.wrapping_add(1)]).random();
        let again: u64 = substream(seed, &[k]).random();
        prop_assert_eq!(x, again);
        prop_assert_ne!(x, y);
    }

    #[test]
    fn pbr_is_percent_reduction(m in -10.0f64..10.0, r in 0.1f64..10.0) {
        prop_assert!((pbr(m, r) - 100.0 * (1.0 - m / r)).abs() < 1e-9);
    }
}
