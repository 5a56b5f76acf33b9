use flowrde_core::differentials::*;
use flowrde_core::trees::{graft_all, truncation_sets, Tree};
use flowrde_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randv(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Straight recursion `y_v = d^k V(x_v)[eta_v; y_c1, ..., y_ck]`, contracting
/// the noise slot before the state slots.
fn oracle<F: VectorField>(f: &F, children: &[Vec<usize>], v: usize, x: &[f64], eta: &[f64]) -> Vec<f64> {
    let (n, m) = (f.n(), f.m());
    let k = children[v].len();
    let ys: Vec<Vec<f64>> = children[v].iter().map(|&c| oracle(f, children, c, x, eta)).collect();
    let mut d = vec![0.0; n * m * n.pow(k as u32)];
    derivative(f, k, &x[v * n..(v + 1) * n], &mut d).unwrap();
    let stride = n.pow(k as u32);
    let mut out = vec![0.0; n];
    for a in 0..n {
        for al in 0..m {
            for idx in 0..stride {
                let mut w = d[(a * m + al) * stride + idx] * eta[v * m + al];
                let mut r = idx;
                for y in ys.iter().rev() {
                    w *= y[r % n];
                    r /= n;
                }
                out[a] += w;
            }
        }
    }
    out
}

fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    let scale = b.iter().fold(1e-300f64, |s, v| s.max(v.abs()));
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
}

fn base_trees() -> Vec<Tree> {
    truncation_sets().0
}

#[test]
fn single_node_is_the_field() {
    let f = Polynomial::random(2, 3, 3, 1.0, 1).unwrap();
    let x = [0.3, -0.2];
    let u = upsilon(&Tree::dot(), &f, &x).unwrap();
    let mut v = vec![0.0; 6];
    f.eval(&x, &mut v);
    assert_eq!(u.values, v);
    assert_eq!(u.values.len(), 2 * 3);
}

#[test]
fn identity_field_cherry() {
    let f = Linear::new(1, 1, vec![1.0], vec![0.0]).unwrap();
    let u = upsilon(&Tree::cherry(), &f, &[0.7, -1.3]).unwrap();
    assert_eq!(u.values, vec![-1.3]);
}

#[test]
fn linear_fields_kill_branching_trees() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = Linear::new(2, 2, randv(&mut rng, 8, 1.0), randv(&mut rng, 4, 1.0)).unwrap();
    let u = upsilon(&Tree::star(), &f, &randv(&mut rng, 6, 1.0)).unwrap();
    assert!(u.values.iter().all(|v| *v == 0.0));
    assert_eq!(u.values.len(), 2 * 8);
}

#[test]
fn linear_cherry_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, m) = (2, 2);
    let a = randv(&mut rng, n * m * n, 1.0);
    let f = Linear::new(n, m, a.clone(), randv(&mut rng, n * m, 1.0)).unwrap();
    let x = randv(&mut rng, 2 * n, 1.0);
    let dir = randv(&mut rng, n, 1.0);
    let root = upsilon_directional(&Tree::cherry(), &f, &x, 0, &dir).unwrap();
    assert!(root.values.iter().all(|v| *v == 0.0));
    let child = upsilon_directional(&Tree::cherry(), &f, &x, 1, &dir).unwrap();
    for i in 0..n {
        for ar in 0..m {
            for ac in 0..m {
                let mut expect = 0.0;
                for b in 0..n {
                    let inner: f64 = (0..n).map(|j| a[(b * m + ac) * n + j] * dir[j]).sum();
                    expect += a[(i * m + ar) * n + b] * inner;
                }
                let got = child.values[(i * m + ar) * m + ac];
                assert!((got - expect).abs() < 1e-14, "{got} vs {expect}");
            }
        }
    }
}

#[test]
fn slot_layout_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (n, m) in [(1, 1), (2, 2), (3, 2), (2, 3)] {
        let f = Polynomial::random(n, m, 3, 0.5, rng.random()).unwrap();
        for t in truncation_sets().1 {
            let s = t.size();
            let x = randv(&mut rng, s * n, 0.8);
            let eta = randv(&mut rng, s * m, 1.0);
            let got = upsilon(&t, &f, &x).unwrap();
            assert_eq!(got.values.len(), n * m.pow(s as u32));
            let expect = oracle(&f, &t.children(), 0, &x, &eta);
            assert!(rel_close(&got.contract(&eta), &expect, 1e-12), "{t} n={n} m={m}");
        }
    }
}

#[test]
fn directional_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, m) = (2, 2);
    let f = Polynomial::random(n, m, 3, 0.5, 11).unwrap();
    let d = 1e-5;
    for t in base_trees() {
        for node in 0..t.size() {
            let x = randv(&mut rng, t.size() * n, 0.8);
            let dir = randv(&mut rng, n, 1.0);
            let exact = upsilon_directional(&t, &f, &x, node, &dir).unwrap();
            let shift = |s: f64| {
                let mut y = x.clone();
                for j in 0..n {
                    y[node * n + j] += s * dir[j];
                }
                upsilon(&t, &f, &y).unwrap().values
            };
            let (p, q) = (shift(d), shift(-d));
            let fd: Vec<f64> = p.iter().zip(&q).map(|(a, b)| (a - b) / (2.0 * d)).collect();
            assert!(rel_close(&fd, &exact.values, 1e-6), "{t} node {node}");
        }
    }
}

#[test]
fn grafting_identity_as_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, m) = (2, 2);
    let f = Polynomial::random(n, m, 3, 0.5, 21).unwrap();
    for t1 in base_trees() {
        for t2 in base_trees() {
            let (s1, s2) = (t1.size(), t2.size());
            let x = randv(&mut rng, (s1 + s2) * n, 0.7);
            let (x1, x2) = x.split_at(s1 * n);
            let u2 = upsilon(&t2, &f, x2).unwrap();
            let z2 = m.pow(s2 as u32);
            let z1 = m.pow(s1 as u32);
            // Left side, slots ordered as (tau1 nodes, tau2 nodes).
            let mut lhs = vec![0.0; n * z1 * z2];
            for node in 0..s1 {
                for sig in 0..z2 {
                    let dir: Vec<f64> = (0..n).map(|b| u2.values[b * z2 + sig]).collect();
                    let d = upsilon_directional(&t1, &f, x1, node, &dir).unwrap();
                    for (p, v) in d.values.iter().enumerate() {
                        lhs[p * z2 + sig] += v;
                    }
                }
            }
            // Right side: each labelled graft, canonicalized with its node order.
            let mut rhs = vec![0.0; n * z1 * z2];
            let c1 = t1.children();
            let c2 = t2.children();
            for node in 0..s1 {
                let mut ch = c1.clone();
                ch[node].push(s1);
                ch.extend(c2.iter().map(|l| l.iter().map(|c| c + s1).collect::<Vec<_>>()));
                let (tree, order) = Tree::from_children_ordered(&ch);
                let xs: Vec<f64> = order.iter().flat_map(|&v| x[v * n..(v + 1) * n].to_vec()).collect();
                let u = upsilon(&tree, &f, &xs).unwrap();
                let total = s1 + s2;
                for a in 0..n {
                    for idx in 0..z1 * z2 {
                        // Digits of idx in canonical slot order.
                        let mut digits = vec![0usize; total];
                        let mut r = idx;
                        for dgt in digits.iter_mut().rev() {
                            *dgt = r % m;
                            r /= m;
                        }
                        let mut by_node = vec![0usize; total];
                        for (pos, &v) in order.iter().enumerate() {
                            by_node[v] = digits[pos];
                        }
                        let target = by_node.iter().fold(0, |acc, &dg| acc * m + dg);
                        rhs[a * z1 * z2 + target] += u.values[a * z1 * z2 + idx];
                    }
                }
            }
            assert!(rel_close(&lhs, &rhs, 1e-10), "{t2} onto {t1}");
        }
    }
}

#[test]
fn grafting_identity_with_multiplicities() {
    // With equal node states and equal noise vectors the labelled sum collapses
    // onto isomorphism classes.
    let (n, m) = (3, 2);
    let f = Polynomial::random(n, m, 3, 0.5, 31).unwrap();
    let x0 = [0.2, -0.4, 0.1];
    let eta0 = [0.7, -1.1];
    let states = |s: usize| x0.repeat(s);
    let etas = |s: usize| eta0.repeat(s);
    for t1 in base_trees() {
        for t2 in base_trees() {
            let u2 = upsilon(&t2, &f, &states(t2.size())).unwrap().contract(&etas(t2.size()));
            let mut lhs = vec![0.0; n];
            for node in 0..t1.size() {
                let d = upsilon_directional(&t1, &f, &states(t1.size()), node, &u2).unwrap();
                for (l, v) in lhs.iter_mut().zip(d.contract(&etas(t1.size()))) {
                    *l += v;
                }
            }
            let mut rhs = vec![0.0; n];
            for g in graft_all(&t2, &t1) {
                let s = g.result.size();
                let u = upsilon(&g.result, &f, &states(s)).unwrap().contract(&etas(s));
                for (r, v) in rhs.iter_mut().zip(u) {
                    *r += g.multiplicity as f64 * v;
                }
            }
            assert!(rel_close(&lhs, &rhs, 1e-10));
        }
    }
}

#[test]
fn star_is_symmetric_in_its_children() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, m) = (2, 3);
    let f = Trig::new(
        n,
        m,
        randv(&mut rng, n * m, 1.0),
        randv(&mut rng, n * m, 1.0),
        randv(&mut rng, n * m * n, 2.0),
        randv(&mut rng, n * m, 3.0),
    )
    .unwrap();
    let x = randv(&mut rng, 3 * n, 1.0);
    let mut swapped = x.clone();
    swapped[n..2 * n].copy_from_slice(&x[2 * n..3 * n]);
    swapped[2 * n..3 * n].copy_from_slice(&x[n..2 * n]);
    let a = upsilon(&Tree::star(), &f, &x).unwrap();
    let b = upsilon(&Tree::star(), &f, &swapped).unwrap();
    for p in 0..n * m {
        for i in 0..m {
            for j in 0..m {
                let (u, v) = (a.values[(p * m + i) * m + j], b.values[(p * m + j) * m + i]);
                assert!((u - v).abs() <= 1e-14 * (1.0 + u.abs()));
            }
        }
    }
}

fn check_derivatives<F: VectorField>(f: &F, rng: &mut ChaCha8Rng, radius: f64) {
    let n = f.n();
    let d = 1e-5;
    for _ in 0..100 {
        let x = randv(rng, n, radius);
        for k in 1..=3 {
            let mut exact = vec![0.0; derivative_len(f, k)];
            derivative(f, k, &x, &mut exact).unwrap();
            let prev = derivative_len(f, k - 1);
            let mut fd = vec![0.0; exact.len()];
            for j in 0..n {
                let (mut p, mut q) = (x.clone(), x.clone());
                p[j] += d;
                q[j] -= d;
                let (mut fp, mut fq) = (vec![0.0; prev], vec![0.0; prev]);
                derivative(f, k - 1, &p, &mut fp).unwrap();
                derivative(f, k - 1, &q, &mut fq).unwrap();
                for i in 0..prev {
                    fd[i * n + j] = (fp[i] - fq[i]) / (2.0 * d);
                }
            }
            assert!(rel_close(&fd, &exact, 1e-5), "order {k}");
        }
    }
}

#[test]
fn builtin_derivatives_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    check_derivatives(&Polynomial::random(3, 2, 3, 1.0, 2).unwrap(), &mut rng, 1.0);
    let trig = Trig::new(2, 2, randv(&mut rng, 4, 1.0), randv(&mut rng, 4, 1.0), randv(&mut rng, 8, 2.0), randv(&mut rng, 4, 1.0))
        .unwrap();
    check_derivatives(&trig, &mut rng, 2.0);
    let lin = Linear::new(2, 1, randv(&mut rng, 4, 1.0), randv(&mut rng, 2, 1.0)).unwrap();
    check_derivatives(&lin, &mut rng, 2.0);
}

#[test]
fn finite_difference_fallback() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = Polynomial::random(2, 2, 3, 1.0, 5).unwrap();
    let fd = FiniteDifference::new(p.clone());
    assert!(fd.is_approximate() && !p.is_approximate());
    for _ in 0..10 {
        let x = randv(&mut rng, 2, 1.0);
        for k in 1..=3 {
            let (mut a, mut b) = (vec![0.0; derivative_len(&p, k)], vec![0.0; derivative_len(&p, k)]);
            derivative(&p, k, &x, &mut a).unwrap();
            derivative(&fd, k, &x, &mut b).unwrap();
            assert!(rel_close(&b, &a, 1e-6), "order {k}");
        }
    }
}

struct EvalOnly;

impl VectorField for EvalOnly {
    fn n(&self) -> usize {
        1
    }
    fn m(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[0].sin();
    }
    fn domain_radius(&self) -> f64 {
        2.0
    }
}

#[test]
fn missing_derivatives_and_domain() {
    assert!(upsilon(&Tree::dot(), &EvalOnly, &[0.1]).is_ok());
    assert!(matches!(upsilon(&Tree::cherry(), &EvalOnly, &[0.1, 0.2]), Err(Error::Capability(_))));
    assert!(matches!(upsilon(&Tree::dot(), &EvalOnly, &[2.5]), Err(Error::Domain(_))));
    assert!(upsilon(&Tree::cherry(), &FiniteDifference::new(EvalOnly), &[0.1, 0.2]).is_ok());
    // A root with three children has no fourth derivative to differentiate into.
    let wide = Tree::parse("(()()())").unwrap();
    let f = Polynomial::random(1, 1, 3, 1.0, 0).unwrap();
    assert!(matches!(upsilon_directional(&wide, &f, &[0.1; 4], 0, &[1.0]), Err(Error::Capability(_))));
    assert!(upsilon_directional(&wide, &f, &[0.1; 4], 1, &[1.0]).is_ok());
}

#[test]
fn degree_hints() {
    assert_eq!(Constant::new(1, 1, vec![2.0]).unwrap().degree(), Some(0));
    assert_eq!(Polynomial::new(1, 1, &[vec![1.0], vec![0.0], vec![3.0]]).unwrap().degree(), Some(2));
    let c = Constant::new(2, 1, vec![1.0, 2.0]).unwrap();
    for t in base_trees().into_iter().filter(|t| t.order() > 0) {
        let u = upsilon(&t, &c, &vec![0.0; 2 * t.size()]).unwrap();
        assert!(u.values.iter().all(|v| *v == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn directional_is_linear(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Polynomial::random(2, 2, 3, 0.5, seed).unwrap();
        for t in base_trees() {
            let x = randv(&mut rng, 2 * t.size(), 0.8);
            let (d1, d2) = (randv(&mut rng, 2, 1.0), randv(&mut rng, 2, 1.0));
            let mix: Vec<f64> = d1.iter().zip(&d2).map(|(p, q)| a * p + b * q).collect();
            let node = rng.random_range(0..t.size());
            let u = upsilon_directional(&t, &f, &x, node, &mix).unwrap().values;
            let u1 = upsilon_directional(&t, &f, &x, node, &d1).unwrap().values;
            let u2 = upsilon_directional(&t, &f, &x, node, &d2).unwrap().values;
            let combo: Vec<f64> = u1.iter().zip(&u2).map(|(p, q)| a * p + b * q).collect();
            prop_assert!(rel_close(&u, &combo, 1e-12));
        }
    }

    #[test]
    fn shapes_follow_tree_size(n in 1usize..4, m in 1usize..4, seed in 0u64..100) {
        let f = Polynomial::random(n, m, 2, 1.0, seed).unwrap();
        for t in base_trees() {
            let u = upsilon(&t, &f, &vec![0.1; n * t.size()]).unwrap();
            prop_assert_eq!(u.values.len(), n * m.pow(t.size() as u32));
        }
    }
}
