use flowrde_core::differentials::*;
use flowrde_core::flow::*;
use flowrde_core::kernels::{geometric_grid, GridFunction, TimeGrid};
use flowrde_core::noise::{mollify, sample_fbm, NoiseSpec};
use flowrde_core::Error;

fn noise(level: u32, m: usize, seed: u64) -> (GridFunction, f64) {
    let g = TimeGrid::new(level).unwrap();
    let p = sample_fbm(g, &NoiseSpec::new(0.35, m, seed).unwrap()).unwrap();
    let eps = 4.0 * g.h();
    (mollify(&p, eps).unwrap().xi, eps)
}

fn flowed(level: u32, m: usize, seed: u64, mu: f64) -> ForceState {
    let (xi, eps) = noise(level, m, seed);
    let h = xi.grid.h();
    let grid = geometric_grid(h, mu, STEPS_PER_OCTAVE);
    flow_path(xi, eps, &grid, 1).unwrap().pop().unwrap()
}

fn path(grid: TimeGrid, n: usize, scale: f64) -> GridFunction {
    let vals = (0..grid.len()).flat_map(|i| (0..n).map(move |c| scale * (grid.t(i) * (3.0 + c as f64)).sin())).collect();
    GridFunction::new(grid, &[n], vals).unwrap()
}

#[test]
fn cherry_flow_is_second_order() {
    let (xi, eps) = noise(7, 1, 1);
    let h = xi.grid.h();
    let target = 0.25;
    let mut errs = Vec::new();
    for per_octave in [8, 16, 32] {
        let grid = geometric_grid(h, target, per_octave);
        let st = flow_path(xi.clone(), eps, &grid, 1).unwrap().pop().unwrap();
        let exact = cherry_kernel(st.mu, h, xi.grid.cells());
        let e = st.cherry.iter().zip(exact.iter().chain(std::iter::repeat(&0.0))).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        errs.push(e);
    }
    // Either exact to rounding or halving the step quarters the error.
    for w in errs.windows(2) {
        assert!(w[1] < 1e-12 || w[0] / w[1] > 3.0, "{errs:?}");
    }
    assert!(errs[0] < 1e-4, "{errs:?}");
    // The flowed coefficient against the closed form, relative to sup |xi|^2.
    let st = flowed(7, 1, 1, 0.25);
    let exact = closed_form_cherry(&st.xi, st.mu);
    let got = st.coefficient(BaseTree::Cherry);
    let at = |c: &ForceCoefficient, i: usize, x: usize| if x < c.lag_extent { c.zeta[i * c.lag_extent + x] } else { 0.0 };
    let mut diff = 0.0f64;
    for i in 0..st.grid().len() {
        for x in 0..got.lag_extent.max(exact.lag_extent) {
            diff = diff.max((at(&got, i, x) - at(&exact, i, x)).abs());
        }
    }
    let xi2 = st.xi.sup_norm().powi(2);
    assert!(diff < 1e-4 * xi2, "{diff} vs {xi2}");
}

#[test]
fn support_stays_within_the_band() {
    let (xi, eps) = noise(6, 1, 2);
    let h = xi.grid.h();
    let grid = geometric_grid(h, 0.25, STEPS_PER_OCTAVE);
    let states = flow_path(xi, eps, &grid, 2).unwrap();
    for st in &states {
        for t in BaseTree::ALL {
            let c = st.coefficient(t);
            assert_eq!(c.support_violation(), 0.0, "{t:?} at mu = {}", st.mu);
        }
    }
}

#[test]
fn separable_kernels_stay_low_rank() {
    let st = flowed(8, 1, 3, 0.5);
    assert!(st.chain.terms.len() <= 4, "{}", st.chain.terms.len());
    assert!(st.star.terms.len() <= 4, "{}", st.star.terms.len());
    // Symmetric in its two lags.
    let (ex, ey, d) = st.star.dense();
    assert_eq!(ex, ey);
    for x in 0..ex {
        for y in 0..x {
            assert!((d[x * ey + y] - d[y * ey + x]).abs() < 1e-12);
        }
    }
}

#[test]
fn step_guard() {
    let (xi, eps) = noise(5, 1, 0);
    let st = init_force(xi, eps);
    assert!(matches!(flow_step(&st, st.mu), Err(Error::Resolution(_))));
    assert!(flow_step(&st, st.mu / 4.0).is_ok());
    assert!(flow_path(st.xi.as_ref().clone(), eps, &[0.5, 0.6], 1).is_err());
}

#[test]
fn zero_noise_gives_zero_force() {
    let g = TimeGrid::new(6).unwrap();
    let xi = GridFunction::zeros(g, &[2]);
    let grid = geometric_grid(g.h(), 0.25, STEPS_PER_OCTAVE);
    let st = flow_path(xi, 4.0 * g.h(), &grid, 1).unwrap().pop().unwrap();
    let field = Polynomial::random(2, 2, 3, 0.5, 9).unwrap();
    let v = path(g, 2, 0.3);
    let u0 = [0.1, -0.2];
    assert_eq!(eval_force(&st, &v, &u0, &field).unwrap().sup_norm(), 0.0);
    assert_eq!(eval_i(&st, &v, &u0, &field).unwrap().sup_norm(), 0.0);
}

#[test]
fn constant_field_keeps_only_the_leaf() {
    let st = flowed(6, 2, 4, 0.25);
    let g = st.grid();
    let field = Constant::new(1, 2, vec![0.7, -1.3]).unwrap();
    let v = path(g, 1, 0.5);
    let f = eval_force(&st, &v, &[0.0], &field).unwrap();
    for i in 0..g.len() {
        let x = st.xi.at(i);
        assert!((f.at(i)[0] - (0.7 * x[0] - 1.3 * x[1])).abs() < 1e-14);
    }
    let w = path(g, 1, 1.0);
    assert_eq!(eval_df(&st, &v, &[0.0], &field, &w).unwrap().sup_norm(), 0.0);
    assert_eq!(eval_i(&st, &v, &[0.0], &field).unwrap().sup_norm(), 0.0);
}

/// `F^tau` at one root time by direct summation over the dense coefficient.
fn direct_force<F: VectorField>(st: &ForceState, field: &F, x: &GridFunction, tree: BaseTree, i: usize) -> Vec<f64> {
    let n = field.n();
    let m = field.m();
    let c = st.coefficient(tree);
    let k = c.tree.size() - 1;
    let ext = c.lag_extent;
    let nm = m.pow(c.tree.size() as u32);
    let block = ext.pow(k as u32) * nm;
    let mut out = vec![0.0; n];
    for lag_idx in 0..ext.pow(k as u32) {
        let lags: Vec<usize> = (0..k).map(|j| (lag_idx / ext.pow((k - 1 - j) as u32)) % ext).collect();
        if lags.iter().any(|&l| l > i) {
            continue;
        }
        let zeta = &c.zeta[i * block + lag_idx * nm..i * block + (lag_idx + 1) * nm];
        if zeta.iter().all(|z| *z == 0.0) {
            continue;
        }
        let mut xs = x.at(i).to_vec();
        for &l in &lags {
            xs.extend_from_slice(x.at(i - l));
        }
        let u = upsilon(&c.tree, field, &xs).unwrap();
        // Contract the noise slots against the coefficient.
        for a in 0..n {
            out[a] += u.values[a * nm..(a + 1) * nm].iter().zip(zeta).map(|(p, q)| p * q).sum::<f64>();
        }
    }
    out
}

#[test]
fn force_matches_direct_summation() {
    for (n, m) in [(1, 1), (2, 2), (1, 3), (3, 1)] {
        let st = flowed(5, m, 5 + n as u64, 0.125);
        let g = st.grid();
        let field = Polynomial::random(n, m, 3, 0.6, 11).unwrap();
        let v = path(g, n, 0.4);
        let u0: Vec<f64> = (0..n).map(|c| 0.1 * c as f64).collect();
        let mut x = v.clone();
        for i in 0..g.len() {
            for c in 0..n {
                x.at_mut(i)[c] += u0[c];
            }
        }
        let ev = ForceEval::new(&st, &field, &v, &u0, g.len()).unwrap();
        let parts = ev.force_parts();
        for &i in &[3usize, 17, g.cells()] {
            for t in BaseTree::ALL {
                let d = direct_force(&st, &field, &x, t, i);
                let got = &parts[t as usize][i * n..(i + 1) * n];
                let scale = d.iter().fold(1e-12f64, |s, v| s.max(v.abs()));
                for c in 0..n {
                    assert!((got[c] - d[c]).abs() < 1e-10 * scale, "{t:?} n={n} m={m} i={i}: {got:?} vs {d:?}");
                }
            }
        }
    }
}

#[test]
fn derivative_matches_central_differences() {
    for (n, m) in [(1, 1), (2, 3), (3, 2)] {
        let st = flowed(6, m, 20 + n as u64, 0.25);
        let g = st.grid();
        let field = Trig::new(
            n,
            m,
            vec![0.2; n * m],
            (0..n * m).map(|k| 0.5 + 0.1 * k as f64).collect(),
            (0..n * m * n).map(|k| 1.0 + 0.3 * k as f64).collect(),
            (0..n * m).map(|k| 0.4 * k as f64).collect(),
        )
        .unwrap();
        let u0 = vec![0.3; n];
        let v = path(g, n, 0.5);
        let w = path(g, n, 1.0);
        let df = eval_df(&st, &v, &u0, &field, &w).unwrap();
        let t = 1e-4;
        let mut vp = v.clone();
        vp.axpy(t, &w);
        let mut vm = v.clone();
        vm.axpy(-t, &w);
        let fp = eval_force(&st, &vp, &u0, &field).unwrap();
        let fm = eval_force(&st, &vm, &u0, &field).unwrap();
        let mut fd = fp.sub(&fm);
        fd.scale(0.5 / t);
        let err = fd.sub(&df).sup_norm();
        assert!(err <= 1e-4 * df.sup_norm(), "n={n} m={m}: {err} vs {}", df.sup_norm());
    }
}

#[test]
fn overflow_for_affine_scalar_field() {
    // V(x) = k x + b: only terms with first derivatives survive, so
    // F = f + A (c * f) + A S, S = sum_chain a * (A (b * f)) with A = k xi.
    let st = flowed(6, 1, 31, 0.25);
    let g = st.grid();
    let (k, b) = (0.8, 0.3);
    let field = Linear::new(1, 1, vec![k], vec![b]).unwrap();
    let v = path(g, 1, 0.5);
    let len = g.len();
    let xi: Vec<f64> = (0..len).map(|i| st.xi.at(i)[0]).collect();
    let conv = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..len).map(|i| (0..=i.min(w.len().saturating_sub(1))).map(|j| w[j] * x[i - j]).sum()).collect()
    };
    let (kx, ky, chain) = st.chain.dense();
    // Dense two-lag convolution: out(i) = sum_{x,y} K(x,y) A(i-x) y(i-x-y).
    let chain_conv = |inner: &dyn Fn(usize) -> f64, y: &[f64]| -> Vec<f64> {
        (0..len)
            .map(|i| {
                let mut s = 0.0;
                for lx in 0..kx.min(i + 1) {
                    for ly in 0..ky.min(i - lx + 1) {
                        s += chain[lx * ky + ly] * inner(i - lx) * y[i - lx - ly];
                    }
                }
                s
            })
            .collect()
    };
    let a: Vec<f64> = xi.iter().map(|x| k * x).collect();
    let mul = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let add = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x + y).collect() };
    let f: Vec<f64> = (0..len).map(|i| (k * v.at(i)[0] + b) * xi[i]).collect();
    let f_cherry = mul(&a, &conv(&st.cherry, &f));
    let f_chain = mul(&a, &chain_conv(&|j| a[j], &f));
    let df_dot = |w: &[f64]| mul(&a, w);
    let df_cherry = |w: &[f64]| mul(&a, &conv(&st.cherry, &mul(&a, w)));
    let df_chain = |w: &[f64]| mul(&a, &chain_conv(&|j| a[j], &mul(&a, w)));
    let gk = graft_kernel(st.mu, g.h(), g.cells());
    let total = add(&add(&f, &f_cherry), &f_chain);
    let expect = add(
        &add(&df_dot(&conv(&gk, &f_chain)), &df_cherry(&conv(&gk, &add(&f_cherry, &f_chain)))),
        &df_chain(&conv(&gk, &total)),
    );
    let got = eval_i(&st, &v, &[0.0], &field).unwrap();
    let scale = expect.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    assert!(scale > 0.0);
    for i in 0..len {
        assert!((got.at(i)[0] - expect[i]).abs() < 1e-10 * scale, "i={i}");
    }
    let force = eval_force(&st, &v, &[0.0], &field).unwrap();
    for i in 0..len {
        assert!((force.at(i)[0] - total[i]).abs() < 1e-10 * scale.max(1.0));
    }
}

#[test]
fn shapes_and_domain_errors() {
    for n in 1..=3 {
        for m in 1..=3 {
            let st = flowed(5, m, (10 * n + m) as u64, 0.125);
            let g = st.grid();
            let field = Polynomial::random(n, m, 2, 0.5, 3).unwrap();
            let v = path(g, n, 0.2);
            let u0 = vec![0.0; n];
            let f = eval_force(&st, &v, &u0, &field).unwrap();
            assert_eq!(f.values.len(), g.len() * n);
            assert!(f.values.iter().all(|x| x.is_finite()));
            let i = eval_i(&st, &v, &u0, &field).unwrap();
            assert_eq!(i.ncomp(), n);
        }
    }
    let st = flowed(5, 2, 0, 0.125);
    let field = Polynomial::random(1, 3, 1, 0.5, 3).unwrap();
    let v = path(st.grid(), 1, 0.2);
    assert!(matches!(eval_force(&st, &v, &[0.0], &field), Err(Error::Domain(_))));
}
