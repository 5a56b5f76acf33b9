use std::sync::Arc;

use flowrde_core::differentials::Constant;
use flowrde_core::flow::*;
use flowrde_core::kernels::{chi, geometric_grid, k_density, k_weights, GridFunction, TimeGrid};
use flowrde_core::noise::{mollify, sample_fbm, Mollifier, NoiseSpec};
use flowrde_core::quad::GaussLegendre;
use flowrde_core::solver::SolverConfig;
use flowrde_core::verify::*;
use proptest::prelude::*;

fn state_with(xi: GridFunction, mu: f64) -> ForceState {
    let h = xi.grid.h();
    let n = xi.grid.cells();
    ForceState {
        mu,
        eps: 0.0,
        cherry: cherry_kernel(mu, h, n),
        xi: Arc::new(xi),
        chain: SeparableKernel::default(),
        star: SeparableKernel::default(),
    }
}

fn flowed(level: u32, seed: u64, mu: f64, amplitude: f64) -> ForceState {
    let g = TimeGrid::new(level).unwrap();
    let p = sample_fbm(g, &NoiseSpec::new(0.4, 1, seed).unwrap()).unwrap();
    let nz = mollify(&p, 4.0 * g.h()).unwrap().scaled(amplitude);
    let grid = geometric_grid(g.h(), mu, STEPS_PER_OCTAVE);
    flow_path(nz.xi, nz.eps, &grid, 1).unwrap().pop().unwrap()
}

#[test]
fn fit_recovers_a_power_law() {
    let xs: Vec<f64> = (0..6).map(|k| 2f64.powi(-k)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(-0.7)).collect();
    let f = ScalingFit::fit(&xs, &ys);
    assert!((f.slope + 0.7).abs() < 1e-12 && (f.intercept - 3f64.ln()).abs() < 1e-12);
    assert!(f.resolved && f.agrees(-0.7, 1e-9));
    let (lo, hi) = f.ci95();
    assert!(lo <= f.slope && f.slope <= hi);

    let w = ScalingFit::fit_window(&xs, &ys, 0.1, 0.6);
    assert_eq!(w.abscissae.len(), 3);
    assert!(!w.note.is_empty());

    let flat = ScalingFit::fit(&xs, &[1.0, 1.0 + 1e-9, 1.0, 1.0 - 1e-9, 1.0, 1.0]);
    assert!(flat.resolved && flat.slope.abs() < 1e-8);

    let noisy = ScalingFit::fit(&xs, &[1.0, 5.0, 0.3, 4.0, 0.2, 6.0]);
    assert!(!noisy.resolved);
    assert!(!ScalingFit::fit(&xs[..2], &ys[..2]).resolved);
}

#[test]
fn student_quantiles() {
    assert!((student_t975(1) - 12.706).abs() < 1e-9);
    assert!((student_t975(10) - 2.228).abs() < 1e-9);
    assert!(student_t975(200) > 1.96 && student_t975(200) < 1.98);
    assert!(student_t975(0).is_infinite());
}

#[test]
fn kernel_properties() {
    let checks = kernel_suite(20, 3);
    for c in &checks {
        if c.name == "commutator" {
            continue;
        }
        assert!(c.ok(), "{c:?}");
    }
}

#[test]
fn stated_commutator_constant_is_not_sharp() {
    // A jump makes |K_mu (Id - K_nu) psi| approach 2 (nu / mu) |K_nu psi| for N = 1.
    let g = TimeGrid::new(12).unwrap();
    let psi = GridFunction::from_fn(g, |t| if t > 0.5 { 1.0 } else { -1.0 });
    let (mu, nu) = (0.25, 0.01);
    let apply = |f: &GridFunction, m: f64| {
        let k = k_weights(1, m, g.h(), g.cells());
        f.map_components(|s| k.apply(s))
    };
    let knu = apply(&psi, nu);
    let ratio = apply(&psi.sub(&knu), mu).sup_norm() / (nu / mu * knu.sup_norm());
    assert!(ratio > 1.5 && ratio <= 2.0 * 1.05, "{ratio}");
}

#[test]
fn derivative_checks() {
    for c in gradient_suite(30, 11).unwrap() {
        assert!(c.ok(), "{c:?}");
    }
}

#[test]
fn zero_coefficients_have_zero_norm() {
    let g = TimeGrid::new(7).unwrap();
    let st = flowed(7, 1, 0.125, 0.0);
    for tree in BaseTree::ALL {
        assert_eq!(force_norm_of(&st, tree, 4).unwrap().value, 0.0);
        assert_eq!(force_norm(&st.coefficient(tree), g, 0.0, 2).unwrap().value, 0.0);
    }
    assert!(force_norm_of(&st, BaseTree::Dot, 3).is_err());
}

#[test]
fn leaf_norm_is_the_smoothed_sup() {
    let g = TimeGrid::new(11).unwrap();
    let xi = GridFunction::from_fn(g, |t| (9.0 * t).sin() + 0.5 * (23.0 * t).cos());
    for (mu, n) in [(1.0 / 64.0, 4), (1.0 / 16.0, 2)] {
        let v = force_norm_of(&state_with(xi.clone(), mu), BaseTree::Dot, n).unwrap().value;
        let k = k_weights(n, mu, g.h(), g.cells());
        let exact = k.apply_causal(&xi.values).iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!((v / exact - 1.0).abs() < 0.03, "mu {mu}: {v} vs {exact}");
    }
}

#[test]
fn cherry_norm_matches_quadrature() {
    // xi = 1 on [2 eps, 1]: the norm is the root-smoothed companion mass.
    let g = TimeGrid::new(10).unwrap();
    let eps = 4.0 * g.h();
    let xi = GridFunction::from_fn(g, |t| if t >= 2.0 * eps { 1.0 } else { 0.0 });
    let gl = GaussLegendre::new(24);
    for (mu, n) in [(1.0 / 32.0, 4), (1.0 / 128.0, 2)] {
        let coef = closed_form_cherry(&xi, mu);
        let v = force_norm(&coef, g, eps, n).unwrap().value;
        let mass = |s0: f64| {
            let y = s0 - 2.0 * eps;
            if y <= 0.0 {
                return 0.0;
            }
            gl.composite(0.0, y.min(2.0 * mu), 8, |x| 1.0 - chi(x / mu))
        };
        let oracle = gl.composite(0.0, 1.0, 256, |s| k_density(n, mu, 1.0 - s) * mass(s));
        assert!((v / oracle - 1.0).abs() < 0.01, "mu {mu}: {v} vs {oracle}");
    }
}

#[test]
fn structured_and_materialized_norms_agree() {
    let g = TimeGrid::new(7).unwrap();
    for mu in [1.0 / 32.0, 1.0 / 8.0] {
        let st = flowed(7, 5, mu, 1.0);
        for tree in BaseTree::ALL {
            let a = force_norm_of(&st, tree, 4).unwrap().value;
            let b = force_norm(&st.coefficient(tree), g, st.eps, 4).unwrap().value;
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-12), "{tree:?} at {mu}: {a} vs {b}");
        }
    }
}

#[test]
fn norms_are_homogeneous_in_the_amplitude() {
    let a = flowed(8, 2, 1.0 / 16.0, 1.0);
    let b = flowed(8, 2, 1.0 / 16.0, 2.0);
    for tree in BaseTree::ALL {
        let k = tree.tree().size() as i32;
        let (x, y) = (force_norm_of(&a, tree, 4).unwrap().value, force_norm_of(&b, tree, 4).unwrap().value);
        assert!((y / x - 2f64.powi(k)).abs() < 1e-9 * 2f64.powi(k), "{tree:?}");
    }
}

#[test]
fn force_study_is_deterministic_and_flags_small_budgets() {
    let mut cfg = ForceStudyConfig::new(0.4, 7, vec![1, 2]);
    cfg.mus = vec![1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0];
    let source = cfg.noise().unwrap();
    let a = force_norm_seed(&source, &cfg, 1).unwrap();
    assert_eq!(a, force_norm_seed(&source, &cfg, 1).unwrap());
    assert_eq!(a.len(), 12);
    assert!(a.iter().all(|s| s.value > 0.0 && s.eps == 4.0 / 128.0));
    let fits = scaling_study_forces(&cfg).unwrap();
    assert_eq!(fits.len(), 4);
    assert!(fits.iter().all(|f| f.seeds == 2 && f.fit.note.contains("only 2 seeds") && !f.agrees(1.0)));
    let mut off = cfg.clone();
    off.mus = vec![0.1];
    assert!(force_norm_seed(&source, &off, 1).is_err());
}

#[test]
fn shared_noise_source_matches_fresh_draws() {
    let source = StudyNoise::new(0.35, 7, 4.0 / 128.0, 0.5).unwrap();
    for seed in [0, 5] {
        let a = source.draw(seed).unwrap();
        let b = study_noise(0.35, 7, 4.0 / 128.0, 0.5, seed).unwrap();
        assert_eq!(a.xi, b.xi);
    }
    assert_ne!(source.draw(0).unwrap().xi, source.draw(1).unwrap().xi);
}

#[test]
fn brownian_covariance_norm_is_one() {
    let c = SmoothedCovariance::new(0.5, 0.5, 1e-3, 1.0 / 64.0).unwrap();
    assert!((c.l1_norm() - 1.0).abs() < 1e-6);
    let study = covariance_base_case(0.5, &[1e-3], &[1.0 / 128.0, 1.0 / 64.0, 1.0 / 32.0]).unwrap();
    assert!(study.fits[0].1.agrees(0.0, 1e-3));
}

#[test]
fn covariance_far_field_matches_quadrature() {
    let c = SmoothedCovariance::new(0.3, 0.5, 1e-4, 1e-4).unwrap();
    let d = c.far_field();
    let (below, above) = (c.at(d * 0.999), c.at(d * 1.001));
    let expected = (d * 0.999 / (d * 1.001)).powf(2.0 * 0.3 - 2.0);
    assert!((below / above / expected - 1.0).abs() < 1e-4);
}

#[test]
fn covariance_slope_and_plateau_flag() {
    let mus: Vec<f64> = (9..=12).rev().map(|k| 2f64.powi(-k)).collect();
    let study = covariance_base_case(0.3, &[2f64.powi(-13)], &mus).unwrap();
    let fit = &study.fits[0].1;
    assert!(fit.note.contains("plateau"));
    assert!(fit.agrees(-0.4, 0.1), "{fit:?}");
    assert!(SmoothedCovariance::new(0.7, 0.5, 0.0, 0.1).is_err());
}

#[test]
fn counterterm_matches_variance_growth() {
    // For s <= 1 the window covers [0, s], so c_eps(s) = d/ds Var(W_eps(s)) / 2.
    let mol = Mollifier::new();
    let gl = GaussLegendre::new(32);
    for (hurst, eps, s) in [(0.3, 1.0 / 256.0, 0.25), (0.4, 1.0 / 64.0, 0.6), (0.5, 1.0 / 128.0, 0.1)] {
        let c = counterterm(&[s], eps, hurst).unwrap()[0];
        let oracle = hurst * gl.composite(0.0, 1.0, 8, |u| mol.rho(u) * (s - eps * u).powf(2.0 * hurst - 1.0));
        assert!((c / oracle - 1.0).abs() < 1e-4, "H {hurst}: {c} vs {oracle}");
    }
    assert!(counterterm(&[0.0], 0.01, 0.3).is_err());
}

#[test]
fn counterterm_scaling_and_stability() {
    let s: Vec<f64> = (1..=6).map(|k| 0.5 * 2f64.powi(-k + 1)).collect();
    let fit = counterterm_fit(&s, 1.0 / 512.0, 0.35).unwrap();
    assert!(fit.agrees(-0.3, 0.2), "{fit:?}");
    let vals: Vec<f64> = [6, 7, 8].iter().map(|k| counterterm(&[0.5], 2f64.powi(-k), 0.35).unwrap()[0]).collect();
    let (lo, hi) = vals.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
    assert!(hi / lo - 1.0 < 0.1);
}

#[test]
fn stationary_counterterm_vanishes() {
    for eps in [0.5, 0.1, 0.01] {
        assert!(stationary_counterterm(eps).abs() < 1e-6);
    }
}

#[test]
fn cherry_marginal_of_constant_noise() {
    let g = TimeGrid::new(8).unwrap();
    let xi = GridFunction::from_fn(g, |_| 2.0);
    let m = cherry_marginal(&xi);
    let w = cherry_kernel(1.0, g.h(), g.cells());
    let last = 4.0 * w.iter().sum::<f64>();
    assert!((m[g.len() - 1] - last).abs() < 1e-12);
    assert!(m.windows(2).all(|p| p[1] >= p[0] - 1e-15));
}

#[test]
fn cherry_study_reduces_per_seed_bins() {
    let cfg = CherryConfig { hurst: 0.4, level: 8, eps: 4.0 / 256.0, seeds: (0..6).collect(), bins: 5 };
    let source = cfg.noise().unwrap();
    let per_seed: Vec<Vec<f64>> = cfg.seeds.iter().map(|&s| cherry_seed(&source, &cfg, s).unwrap()).collect();
    assert!(per_seed.iter().all(|b| b.len() == 5));
    let r = fit_cherry(&cfg, &per_seed);
    assert_eq!(r, cherry_expectation(&cfg).unwrap());
    assert!(r.times.windows(2).all(|t| t[1] > t[0]));
    assert!(r.stderr.iter().all(|s| *s > 0.0));
}

#[test]
fn odd_trees_average_to_zero() {
    let cfg = CherryConfig { hurst: 0.4, level: 7, eps: 4.0 / 128.0, seeds: (0..40).collect(), bins: 4 };
    let source = cfg.noise().unwrap();
    let per_seed: Vec<[f64; 2]> = cfg.seeds.iter().map(|&s| odd_tree_seed(&source, s, 0.25).unwrap()).collect();
    // Flipping the noise flips every odd functional.
    let flipped = {
        let g = TimeGrid::new(7).unwrap();
        let p = sample_fbm(g, &NoiseSpec::new(0.4, 1, 0).unwrap()).unwrap();
        let nz = mollify(&p, cfg.eps).unwrap();
        let grid = geometric_grid(g.h(), 0.25, STEPS_PER_OCTAVE);
        let a = flow_path(nz.xi.clone(), nz.eps, &grid, 1).unwrap().pop().unwrap();
        let b = flow_path(nz.scaled(-1.0).xi, nz.eps, &grid, 1).unwrap().pop().unwrap();
        (force_norm_of(&a, BaseTree::Chain, 4).unwrap().value, force_norm_of(&b, BaseTree::Chain, 4).unwrap().value)
    };
    assert!((flipped.0 - flipped.1).abs() < 1e-12 * flipped.0);
    for r in fit_parity(&per_seed) {
        assert!(r.consistent(), "{r:?}");
        assert!(r.stderr > 0.0);
    }
}

#[test]
fn path_restriction_subsamples() {
    let g = TimeGrid::new(8).unwrap();
    let p = sample_fbm(g, &NoiseSpec::new(0.3, 2, 4).unwrap()).unwrap();
    let r = restrict_path(&p, 6).unwrap();
    assert_eq!(r.w.grid.level(), 6);
    for i in 0..r.w.grid.len() {
        assert_eq!(r.w.at(i), p.w.at(4 * i));
    }
    assert!(restrict_path(&r, 8).is_err());
}

#[test]
fn holder_study_on_known_functions() {
    let run = |f: fn(f64) -> f64| HolderRun {
        coarse: GridFunction::from_fn(TimeGrid::new(7).unwrap(), f),
        fine: GridFunction::from_fn(TimeGrid::new(9).unwrap(), f),
    };
    let r = holder_study(&[run(|t| (3.0 * t).sin()), run(|t| t)], 0.4, 0.05).unwrap();
    assert_eq!(r.paths.len(), 2);
    assert!(r.stable() && r.max_ratio < 1.1);
    let flat = holder_study(&[run(|_| 1.0)], 0.4, 0.05).unwrap();
    assert!(flat.max_estimate < 1e-12);
}

#[test]
fn holder_run_solves_both_levels() {
    let field = Constant::new(1, 1, vec![1.0]).unwrap();
    let cfg = HolderConfig {
        hurst: 0.4,
        coarse_level: 6,
        fine_level: 8,
        eps_cells: 8.0,
        amplitude: 0.5,
        field: &field,
        u0: vec![0.0],
        solver: SolverConfig::default(),
    };
    let run = holder_run(&cfg, 3).unwrap();
    assert_eq!(run.coarse.grid.level(), 6);
    assert_eq!(run.fine.grid.level(), 8);
    let r = holder_study(&[run], 0.4, 0.05).unwrap();
    assert!(r.max_estimate.is_finite() && r.max_estimate > 0.0);
}

#[test]
fn additive_noise_cauchy_differences() {
    // With V constant, u_eps = u0 + V W_eps, so the differences are those of W_eps.
    let field = Constant::new(1, 1, vec![1.5]).unwrap();
    let cfg = EpsConfig {
        hurst: 0.4,
        level: 7,
        eps_list: vec![1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0],
        amplitude: 1.0,
        field: &field,
        u0: vec![0.2],
        solver: SolverConfig::default(),
        bootstrap: 200,
    };
    let seed = eps_seed(&cfg, 9).unwrap();
    let g = TimeGrid::new(7).unwrap();
    let p = sample_fbm(g, &NoiseSpec::new(0.4, 1, 9).unwrap()).unwrap();
    for (k, d) in seed.diffs.iter().enumerate() {
        let a = mollify(&p, cfg.eps_list[k]).unwrap().w_eps();
        let b = mollify(&p, cfg.eps_list[k + 1]).unwrap().w_eps();
        let exact = 1.5 * a.sub(&b).sup_norm();
        assert!((d - exact).abs() < 1e-8, "{d} vs {exact}");
    }
    let report = eps_convergence(&cfg, &[1, 2, 3, 4]);
    assert_eq!(report.seeds.len(), 4);
    assert!(report.excluded.is_empty());
    assert!(report.ci.0 <= report.fit.slope && report.fit.slope <= report.ci.1);
    assert!((0.0..=1.0).contains(&report.monotone_fraction));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fit_is_invariant_under_rescaling(slope in -2.0f64..2.0, c in 0.1f64..10.0, k in 0.1f64..10.0) {
        let xs: Vec<f64> = (0..5).map(|j| 2f64.powi(-j)).collect();
        let ys: Vec<f64> = xs.iter().enumerate().map(|(j, x)| c * x.powf(slope) * (1.0 + 0.01 * (j as f64).sin())).collect();
        let a = ScalingFit::fit(&xs, &ys);
        let scaled: Vec<f64> = ys.iter().map(|y| k * y).collect();
        let b = ScalingFit::fit(&xs, &scaled);
        prop_assert!((a.slope - b.slope).abs() < 1e-10);
        prop_assert!((b.intercept - a.intercept - k.ln()).abs() < 1e-10);
    }

    #[test]
    fn norms_are_nonnegative(seed in 0u64..1000, level in 6u32..8) {
        let st = flowed(level, seed, 1.0 / 16.0, 1.0);
        for tree in BaseTree::ALL {
            let v = force_norm_of(&st, tree, 2).unwrap().value;
            prop_assert!(v >= 0.0 && v.is_finite());
        }
    }
}
