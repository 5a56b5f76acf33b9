//! The truncated flow of force coefficients over the scale `mu`, and the
//! evaluation of the effective force `F_mu[v]`, its derivative `DF_mu[v, w]`
//! and the overflow term `I_mu[v]`.
//!
//! Every coefficient carries one factor `xi_eps(s)` per node times a
//! deterministic kernel in the time differences, so a state stores `xi_eps`
//! once plus:
//! - cherry: weights `c(x)` in the lag `x = s_root - s_child`,
//! - chain: a separable kernel in `(s_root - s_child, s_child - s_grandchild)`,
//! - star: a symmetric separable kernel in the two root-to-child lags.

use crate::differentials::{check_domain, derivative, derivative_len, VectorField};
use crate::err;
use crate::error::Result;
use crate::kernels::{cut_weights_with, cutoff_mass, gdot_weights_with, GridFunction, Interp, TimeGrid};
use crate::quad::GaussLegendre;
use crate::trees::Tree;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

/// Steps per octave of the geometric scale grid.
pub const STEPS_PER_OCTAVE: usize = 8;

/// Relative eigenvalue cut-off when recompressing separable kernels.
const RANK_TOL: f64 = 1e-14;

/// The trees of order at most two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BaseTree {
    Dot,
    Cherry,
    Chain,
    Star,
}

impl BaseTree {
    pub const ALL: [BaseTree; 4] = [BaseTree::Dot, BaseTree::Cherry, BaseTree::Chain, BaseTree::Star];

    pub fn tree(self) -> Tree {
        match self {
            BaseTree::Dot => Tree::dot(),
            BaseTree::Cherry => Tree::cherry(),
            BaseTree::Chain => Tree::chain(),
            BaseTree::Star => Tree::star(),
        }
    }

    pub fn order(self) -> usize {
        match self {
            BaseTree::Dot => 0,
            BaseTree::Cherry => 1,
            _ => 2,
        }
    }

    pub fn from_tree(t: &Tree) -> Option<BaseTree> {
        BaseTree::ALL.into_iter().find(|b| b.tree() == *t)
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// One rank-one term `coef * first (x) second`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableTerm {
    pub coef: f64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// A two-lag kernel stored as a sum of rank-one terms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeparableKernel {
    pub terms: Vec<SeparableTerm>,
}

impl SeparableKernel {
    /// Lag extents `(first, second)`.
    pub fn extent(&self) -> (usize, usize) {
        self.terms.iter().fold((0, 0), |(a, b), t| (a.max(t.first.len()), b.max(t.second.len())))
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coef * t.first.get(x).copied().unwrap_or(0.0) * t.second.get(y).copied().unwrap_or(0.0))
            .sum()
    }

    /// Dense values, row-major in `(x, y)`.
    pub fn dense(&self) -> (usize, usize, Vec<f64>) {
        let (ex, ey) = self.extent();
        let mut out = vec![0.0; ex * ey];
        for t in &self.terms {
            for (x, a) in t.first.iter().enumerate() {
                for (y, b) in t.second.iter().enumerate() {
                    out[x * ey + y] += t.coef * a * b;
                }
            }
        }
        (ex, ey, out)
    }

    /// Adds `c (a (x) b + b (x) a) / 2`.
    pub fn add_symmetric(&mut self, c: f64, a: &[f64], b: &[f64]) {
        self.terms.push(SeparableTerm { coef: c / 2.0, first: a.to_vec(), second: b.to_vec() });
        self.terms.push(SeparableTerm { coef: c / 2.0, first: b.to_vec(), second: a.to_vec() });
    }

    /// Re-expresses a symmetric kernel in its eigenbasis, dropping
    /// negligible eigenvalues.
    pub fn compress_symmetric(&mut self) {
        if self.terms.len() <= 1 {
            return;
        }
        let len = {
            let (a, b) = self.extent();
            a.max(b)
        };
        // Orthonormal basis of all term vectors.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for t in &self.terms {
            for v in [&t.first, &t.second] {
                let mut r = v.clone();
                r.resize(len, 0.0);
                let norm0 = libm::sqrt(dot(&r, &r));
                if norm0 == 0.0 {
                    continue;
                }
                for _ in 0..2 {
                    for q in &basis {
                        let p = dot(&r, q);
                        r.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
                    }
                }
                let nr = libm::sqrt(dot(&r, &r));
                if nr > 1e-12 * norm0 {
                    r.iter_mut().for_each(|x| *x /= nr);
                    basis.push(r);
                }
            }
        }
        let k = basis.len();
        if k == 0 {
            self.terms.clear();
            return;
        }
        let mut s = vec![0.0; k * k];
        for t in &self.terms {
            let pa: Vec<f64> = basis.iter().map(|q| dot(&t.first, q)).collect();
            let pb: Vec<f64> = basis.iter().map(|q| dot(&t.second, q)).collect();
            for i in 0..k {
                for j in 0..k {
                    s[i * k + j] += t.coef * pa[i] * pb[j];
                }
            }
        }
        for i in 0..k {
            for j in 0..i {
                let avg = 0.5 * (s[i * k + j] + s[j * k + i]);
                s[i * k + j] = avg;
                s[j * k + i] = avg;
            }
        }
        let (vals, vecs) = jacobi_eigen(&s, k);
        let top = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut terms = Vec::new();
        for (e, &lam) in vals.iter().enumerate() {
            if lam.abs() <= RANK_TOL * top {
                continue;
            }
            let mut q = vec![0.0; len];
            for (i, b) in basis.iter().enumerate() {
                let u = vecs[i * k + e];
                q.iter_mut().zip(b).for_each(|(x, y)| *x += u * y);
            }
            terms.push(SeparableTerm { coef: lam, first: q.clone(), second: q });
        }
        self.terms = terms;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi sweeps.
/// Returns eigenvalues and the eigenvector matrix (columns).
fn jacobi_eigen(a: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; k * k];
    for i in 0..k {
        v[i * k + i] = 1.0;
    }
    for _ in 0..64 {
        let off: f64 = (0..k).flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * k + j] * m[i * k + j]).sum();
        let diag: f64 = (0..k).map(|i| m[i * k + i] * m[i * k + i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                let apq = m[p * k + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * k + q] - m[p * k + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for r in 0..k {
                    let (mrp, mrq) = (m[r * k + p], m[r * k + q]);
                    m[r * k + p] = c * mrp - s * mrq;
                    m[r * k + q] = s * mrp + c * mrq;
                }
                for r in 0..k {
                    let (mpr, mqr) = (m[p * k + r], m[q * k + r]);
                    m[p * k + r] = c * mpr - s * mqr;
                    m[q * k + r] = s * mpr + c * mqr;
                }
                for r in 0..k {
                    let (vrp, vrq) = (v[r * k + p], v[r * k + q]);
                    v[r * k + p] = c * vrp - s * vrq;
                    v[r * k + q] = s * vrp + c * vrq;
                }
            }
        }
    }
    ((0..k).map(|i| m[i * k + i]).collect(), v)
}

/// Force coefficients of all trees of order at most two at one scale.
#[derive(Debug, Clone)]
pub struct ForceState {
    pub mu: f64,
    pub eps: f64,
    pub xi: Arc<GridFunction>,
    /// Cherry kernel by lag.
    pub cherry: Vec<f64>,
    pub chain: SeparableKernel,
    pub star: SeparableKernel,
}

impl ForceState {
    pub fn grid(&self) -> TimeGrid {
        self.xi.grid
    }

    pub fn m(&self) -> usize {
        self.xi.ncomp()
    }

    /// Dense coefficient of one tree.
    pub fn coefficient(&self, tree: BaseTree) -> ForceCoefficient {
        materialize(self, tree)
    }
}

/// Cherry kernel `1 - chi(x / mu)` on the grid (hat weights).
pub fn cherry_kernel(mu: f64, h: f64, max_lag: usize) -> Vec<f64> {
    cut_weights_with(mu, h, max_lag, Interp::Linear).weights
}

/// Graft kernel `d/dmu G_mu` on the grid (hat weights), consistent with the flow.
pub fn graft_kernel(mu: f64, h: f64, max_lag: usize) -> Vec<f64> {
    gdot_weights_with(mu, h, max_lag, Interp::Linear).weights
}

/// Force state at `mu_0 = h`.
pub fn init_force(xi_eps: GridFunction, eps: f64) -> ForceState {
    let grid = xi_eps.grid;
    let h = grid.h();
    let mu0 = h;
    let max_lag = grid.cells();
    // Chain and star start from the scale integral of their graft terms over
    // (0, mu_0], where both kernels act at a single lag.
    let gl = GaussLegendre::new(4);
    let mut chain = SeparableKernel::default();
    let mut star = SeparableKernel::default();
    gl.for_each(0.0, mu0, |nu, w| {
        let c = cut_weights_with(nu, h, max_lag, Interp::Linear).weights;
        let g = gdot_weights_with(nu, h, max_lag, Interp::Linear).weights;
        chain.add_symmetric(-2.0 * w, &c, &g);
        star.add_symmetric(-w, &c, &g);
    });
    chain.compress_symmetric();
    star.compress_symmetric();
    ForceState { mu: mu0, eps, xi: Arc::new(xi_eps), cherry: cherry_kernel(mu0, h, max_lag), chain, star }
}

/// Exact cherry coefficient at `mu`.
pub fn closed_form_cherry(xi_eps: &GridFunction, mu: f64) -> ForceCoefficient {
    let grid = xi_eps.grid;
    let state = ForceState {
        mu,
        eps: 0.0,
        xi: Arc::new(xi_eps.clone()),
        cherry: cherry_kernel(mu, grid.h(), grid.cells()),
        chain: SeparableKernel::default(),
        star: SeparableKernel::default(),
    };
    materialize(&state, BaseTree::Cherry)
}

/// One second-order step of the flow from `mu` to `mu + d_mu`.
///
/// The cherry kernel moves by the midpoint rule; the chain and star updates
/// use the cherry kernel averaged over the step, which keeps their
/// separable form compact.
pub fn flow_step(state: &ForceState, d_mu: f64) -> Result<ForceState> {
    if !(d_mu > 0.0 && d_mu <= state.mu / 4.0 * (1.0 + 1e-12)) {
        return Err(err!(Resolution, "flow step {d_mu} must lie in (0, mu / 4] at mu = {}", state.mu));
    }
    let grid = state.grid();
    let h = grid.h();
    let g = graft_kernel(state.mu + d_mu / 2.0, h, grid.cells());
    let mut cherry = state.cherry.clone();
    if cherry.len() < g.len() {
        cherry.resize(g.len(), 0.0);
    }
    for (c, gv) in cherry.iter_mut().zip(&g) {
        *c -= d_mu * gv;
    }
    let mut mid = state.cherry.clone();
    mid.resize(cherry.len(), 0.0);
    mid.iter_mut().zip(&cherry).for_each(|(a, b)| *a = 0.5 * (*a + b));
    let mut chain = state.chain.clone();
    chain.add_symmetric(-2.0 * d_mu, &mid, &g);
    chain.compress_symmetric();
    let mut star = state.star.clone();
    star.add_symmetric(-d_mu, &mid, &g);
    star.compress_symmetric();
    Ok(ForceState { mu: state.mu + d_mu, eps: state.eps, xi: state.xi.clone(), cherry, chain, star })
}

/// Flows from the initial state through `mu_grid` (which must start at `h`),
/// with `substeps` steps per interval, returning the state at every grid scale.
pub fn flow_path(xi_eps: GridFunction, eps: f64, mu_grid: &[f64], substeps: usize) -> Result<Vec<ForceState>> {
    let h = xi_eps.grid.h();
    match mu_grid.first() {
        Some(&m0) if (m0 - h).abs() <= 1e-12 * h => {}
        _ => return Err(err!(Domain, "the scale grid must start at the grid step {h}")),
    }
    let substeps = substeps.max(1);
    let mut state = init_force(xi_eps, eps);
    let mut out = Vec::with_capacity(mu_grid.len());
    out.push(state.clone());
    for pair in mu_grid.windows(2) {
        let d = (pair[1] - pair[0]) / substeps as f64;
        for _ in 0..substeps {
            state = flow_step(&state, d)?;
        }
        state.mu = pair[1];
        out.push(state.clone());
    }
    Ok(out)
}

/// A dense force coefficient with the root delta factored out.
///
/// `zeta` is indexed by root time, then one lag `s_root - s_j` per companion
/// (canonical node order, each of extent `lag_extent`), then one noise index
/// per node.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceCoefficient {
    pub tree: Tree,
    pub mu: f64,
    /// `ceil(2 mu order / h)`.
    pub band: usize,
    pub lag_extent: usize,
    pub m: usize,
    pub zeta: Vec<f64>,
}

impl ForceCoefficient {
    fn companions(&self) -> usize {
        self.tree.size() - 1
    }

    fn block(&self) -> usize {
        self.lag_extent.pow(self.companions() as u32) * self.m.pow(self.tree.size() as u32)
    }

    pub fn roots(&self) -> usize {
        self.zeta.len() / self.block().max(1)
    }

    /// Largest entry at a lag more than one cell beyond the band, or at root time 0.
    pub fn support_violation(&self) -> f64 {
        let k = self.companions();
        let nm = self.m.pow(self.tree.size() as u32);
        let block = self.block();
        let mut worst = 0.0f64;
        for i in 0..self.roots() {
            for (idx, v) in self.zeta[i * block..(i + 1) * block].iter().enumerate() {
                if *v == 0.0 {
                    continue;
                }
                let mut lags = idx / nm;
                let mut outside = i == 0;
                for _ in 0..k {
                    if lags % self.lag_extent > self.band + 1 {
                        outside = true;
                    }
                    lags /= self.lag_extent;
                }
                if outside {
                    worst = worst.max(v.abs());
                }
            }
        }
        worst
    }
}

fn materialize(state: &ForceState, tree: BaseTree) -> ForceCoefficient {
    let grid = state.grid();
    let h = grid.h();
    let m = state.m();
    let roots = grid.len();
    let xi = &state.xi;
    let band = libm::ceil(2.0 * state.mu * tree.order() as f64 / h - 1e-9) as usize;
    let xi_at = |i: isize| -> &[f64] {
        if i < 0 {
            &[]
        } else {
            xi.at(i as usize)
        }
    };
    match tree {
        BaseTree::Dot => {
            ForceCoefficient { tree: tree.tree(), mu: state.mu, band, lag_extent: 1, m, zeta: xi.values.clone() }
        }
        BaseTree::Cherry => {
            let ext = state.cherry.len().max(band + 3);
            let mut zeta = vec![0.0; roots * ext * m * m];
            for i in 0..roots {
                for (x, c) in state.cherry.iter().enumerate() {
                    let j = i as isize - x as isize;
                    let xc = xi_at(j);
                    if xc.is_empty() || *c == 0.0 {
                        continue;
                    }
                    let base = (i * ext + x) * m * m;
                    for a in 0..m {
                        for b in 0..m {
                            zeta[base + a * m + b] = xi.at(i)[a] * c * xc[b];
                        }
                    }
                }
            }
            ForceCoefficient { tree: tree.tree(), mu: state.mu, band, lag_extent: ext, m, zeta }
        }
        BaseTree::Chain | BaseTree::Star => {
            let kern = if tree == BaseTree::Chain { &state.chain } else { &state.star };
            let (kx, ky, dense) = kern.dense();
            let ext = (kx + ky).max(band + 3);
            let m3 = m * m * m;
            let mut zeta = vec![0.0; roots * ext * ext * m3];
            for i in 0..roots {
                for x in 0..kx {
                    for y in 0..ky {
                        let k = dense[x * ky + y];
                        if k == 0.0 {
                            continue;
                        }
                        // Companion lags from the root.
                        let (l1, l2) = if tree == BaseTree::Chain { (x, x + y) } else { (x, y) };
                        let (x1, x2) = (xi_at(i as isize - l1 as isize), xi_at(i as isize - l2 as isize));
                        if x1.is_empty() || x2.is_empty() {
                            continue;
                        }
                        let base = ((i * ext + l1) * ext + l2) * m3;
                        for a in 0..m {
                            for b in 0..m {
                                for c in 0..m {
                                    zeta[base + (a * m + b) * m + c] += xi.at(i)[a] * k * x1[b] * x2[c];
                                }
                            }
                        }
                    }
                }
            }
            ForceCoefficient { tree: tree.tree(), mu: state.mu, band, lag_extent: ext, m, zeta }
        }
    }
}

/// Per-time tensors of the field contracted with the noise, at `x = v + u0`:
/// `f = V(x) xi`, `a = dV(x) xi`, `b = d^2 V(x) xi`, `c = d^3 V(x) xi`.
/// Missing tensors vanish identically.
#[derive(Debug, Clone)]
pub struct NodeTensors {
    pub n: usize,
    pub len: usize,
    pub f: Vec<f64>,
    pub a: Option<Vec<f64>>,
    pub b: Option<Vec<f64>>,
    pub c: Option<Vec<f64>>,
}

impl NodeTensors {
    /// Tensors at the first `len` grid points, up to derivative order `max_order`.
    pub fn new<F: VectorField + ?Sized>(
        field: &F,
        xi: &GridFunction,
        v: &GridFunction,
        u0: &[f64],
        len: usize,
        max_order: usize,
    ) -> Result<Self> {
        let n = field.n();
        let m = field.m();
        if xi.ncomp() != m || v.ncomp() != n || u0.len() != n {
            return Err(err!(Domain, "dimension mismatch between field ({n}, {m}), noise, state and u0"));
        }
        let len = len.min(xi.grid.len());
        let top = field.degree().map_or(max_order, |d| d.min(max_order));
        let mut x = vec![0.0; n];
        let mut bufs: Vec<Vec<f64>> = (0..=top).map(|k| vec![0.0; derivative_len(field, k)]).collect();
        let mut outs: Vec<Vec<f64>> = (0..=top).map(|k| vec![0.0; len * n.pow(k as u32 + 1)]).collect();
        for i in 0..len {
            for (j, xj) in x.iter_mut().enumerate() {
                *xj = v.at(i)[j] + u0[j];
            }
            check_domain(field, &x).map_err(|e| err!(Domain, "at t = {}: {e}", xi.grid.t(i)))?;
            let noise = xi.at(i);
            for k in 0..=top {
                derivative(field, k, &x, &mut bufs[k])?;
                let inner = n.pow(k as u32);
                let out = &mut outs[k][i * n * inner..(i + 1) * n * inner];
                for a in 0..n {
                    for idx in 0..inner {
                        let mut s = 0.0;
                        for (al, xa) in noise.iter().enumerate() {
                            s += bufs[k][(a * m + al) * inner + idx] * xa;
                        }
                        out[a * inner + idx] = s;
                    }
                }
            }
        }
        let mut it = outs.into_iter();
        let f = it.next().unwrap();
        Ok(NodeTensors { n, len, f, a: it.next(), b: it.next(), c: it.next() })
    }
}

pub(crate) fn conv(w: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    let len = x.len() / n;
    let mut out = vec![0.0; x.len()];
    if n == 1 {
        for i in 0..len {
            let top = i.min(w.len().saturating_sub(1));
            let mut s = 0.0;
            for j in 0..=top {
                s += w[j] * x[i - j];
            }
            out[i] = s;
        }
        return out;
    }
    for i in 0..len {
        let top = i.min(w.len().saturating_sub(1));
        for j in 0..=top {
            let wj = w[j];
            if wj == 0.0 {
                continue;
            }
            let src = &x[(i - j) * n..(i - j + 1) * n];
            for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(src) {
                *o += wj * s;
            }
        }
    }
    out
}

// y_i = A_i x_i
fn amul(a: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    let len = x.len() / n;
    let mut y = vec![0.0; x.len()];
    for i in 0..len {
        let ai = &a[i * n * n..(i + 1) * n * n];
        for r in 0..n {
            y[i * n + r] = (0..n).map(|c| ai[r * n + c] * x[i * n + c]).sum();
        }
    }
    y
}

// z_i = B_i[x_i, y_i]
fn bmul(b: &[f64], x: &[f64], y: &[f64], n: usize) -> Vec<f64> {
    let len = x.len() / n;
    let n3 = n * n * n;
    let mut z = vec![0.0; x.len()];
    for i in 0..len {
        let bi = &b[i * n3..(i + 1) * n3];
        let (xi, yi) = (&x[i * n..(i + 1) * n], &y[i * n..(i + 1) * n]);
        for r in 0..n {
            let mut s = 0.0;
            for p in 0..n {
                for q in 0..n {
                    s += bi[(r * n + p) * n + q] * xi[p] * yi[q];
                }
            }
            z[i * n + r] = s;
        }
    }
    z
}

// z_i = C_i[x_i, y_i, w_i]
fn cmul(c: &[f64], x: &[f64], y: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    let len = x.len() / n;
    let n4 = n * n * n * n;
    let mut z = vec![0.0; x.len()];
    for i in 0..len {
        let ci = &c[i * n4..(i + 1) * n4];
        let (xi, yi, wi) = (&x[i * n..(i + 1) * n], &y[i * n..(i + 1) * n], &w[i * n..(i + 1) * n]);
        for r in 0..n {
            let mut s = 0.0;
            for p in 0..n {
                for q in 0..n {
                    for t in 0..n {
                        s += ci[((r * n + p) * n + q) * n + t] * xi[p] * yi[q] * wi[t];
                    }
                }
            }
            z[i * n + r] = s;
        }
    }
    z
}

fn add_into(acc: &mut [f64], x: &[f64], c: f64) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += c * b);
}

/// Evaluates force terms of one state against fixed node tensors.
#[derive(Debug, Clone)]
pub struct ForceEval<'a> {
    pub state: &'a ForceState,
    pub nodes: NodeTensors,
}

impl<'a> ForceEval<'a> {
    /// Builds node tensors for `v` on the first `len` grid points.
    pub fn new<F: VectorField + ?Sized>(
        state: &'a ForceState,
        field: &F,
        v: &GridFunction,
        u0: &[f64],
        len: usize,
    ) -> Result<Self> {
        let nodes = NodeTensors::new(field, &state.xi, v, u0, len, 3)?;
        Ok(ForceEval { state, nodes })
    }

    fn zeros(&self) -> Vec<f64> {
        vec![0.0; self.nodes.len * self.nodes.n]
    }

    /// `F^tau` for each tree, indexed like [`BaseTree::ALL`].
    pub fn force_parts(&self) -> [Vec<f64>; 4] {
        let nt = &self.nodes;
        let n = nt.n;
        let st = self.state;
        let f = nt.f.clone();
        let (mut cherry, mut chain, mut star) = (self.zeros(), self.zeros(), self.zeros());
        if let Some(a) = &nt.a {
            cherry = amul(a, &conv(&st.cherry, &f, n), n);
            let mut s = self.zeros();
            for t in &st.chain.terms {
                let inner = amul(a, &conv(&t.second, &f, n), n);
                add_into(&mut s, &conv(&t.first, &inner, n), t.coef);
            }
            chain = amul(a, &s, n);
        }
        if let Some(b) = &nt.b {
            for t in &st.star.terms {
                let (af, bf) = (conv(&t.first, &f, n), conv(&t.second, &f, n));
                add_into(&mut star, &bmul(b, &af, &bf, n), t.coef);
            }
        }
        [f, cherry, chain, star]
    }

    /// `F_mu[v]` on the first `len` points.
    pub fn force(&self) -> Vec<f64> {
        let parts = self.force_parts();
        let mut out = self.zeros();
        for p in &parts {
            add_into(&mut out, p, 1.0);
        }
        out
    }

    /// `DF^tau[v, w]` for one tree.
    pub fn df_tree(&self, tree: BaseTree, w: &[f64]) -> Vec<f64> {
        let nt = &self.nodes;
        let n = nt.n;
        let st = self.state;
        let Some(a) = &nt.a else {
            return self.zeros();
        };
        let f = &nt.f;
        let aw = amul(a, w, n);
        let b = nt.b.as_ref();
        match tree {
            BaseTree::Dot => aw,
            BaseTree::Cherry => {
                let cf = conv(&st.cherry, f, n);
                let mut out = amul(a, &conv(&st.cherry, &aw, n), n);
                if let Some(b) = b {
                    add_into(&mut out, &bmul(b, &cf, w, n), 1.0);
                }
                out
            }
            BaseTree::Chain => {
                let mut s = self.zeros();
                let mut ds = self.zeros();
                for t in &st.chain.terms {
                    let bf = conv(&t.second, f, n);
                    add_into(&mut s, &conv(&t.first, &amul(a, &bf, n), n), t.coef);
                    let mut inner = amul(a, &conv(&t.second, &aw, n), n);
                    if let Some(b) = b {
                        add_into(&mut inner, &bmul(b, &bf, w, n), 1.0);
                    }
                    add_into(&mut ds, &conv(&t.first, &inner, n), t.coef);
                }
                let mut out = amul(a, &ds, n);
                if let Some(b) = b {
                    add_into(&mut out, &bmul(b, &s, w, n), 1.0);
                }
                out
            }
            BaseTree::Star => {
                let mut out = self.zeros();
                let Some(b) = b else {
                    return out;
                };
                for t in &st.star.terms {
                    let (af, bf) = (conv(&t.first, f, n), conv(&t.second, f, n));
                    let (aw1, bw1) = (conv(&t.first, &aw, n), conv(&t.second, &aw, n));
                    let mut term = bmul(b, &aw1, &bf, n);
                    add_into(&mut term, &bmul(b, &af, &bw1, n), 1.0);
                    if let Some(c) = &nt.c {
                        add_into(&mut term, &cmul(c, &af, &bf, w, n), 1.0);
                    }
                    add_into(&mut out, &term, t.coef);
                }
                out
            }
        }
    }

    /// `DF_mu[v, w]`.
    pub fn df(&self, w: &[f64]) -> Vec<f64> {
        let mut out = self.zeros();
        for t in BaseTree::ALL {
            add_into(&mut out, &self.df_tree(t, w), 1.0);
        }
        out
    }

    /// `I_mu[v]`: the grafts of force terms onto force terms whose result
    /// leaves the truncation set, with `graft` the kernel of `d/dmu G_mu`.
    pub fn overflow(&self, parts: &[Vec<f64>; 4], graft: &[f64]) -> Vec<f64> {
        let n = self.nodes.n;
        let mut out = self.zeros();
        for t1 in BaseTree::ALL {
            let mut src = self.zeros();
            let mut any = false;
            for t2 in BaseTree::ALL {
                if t1.order() + t2.order() + 1 >= 3 {
                    add_into(&mut src, &parts[t2.index()], 1.0);
                    any = true;
                }
            }
            if any {
                let w = conv(graft, &src, n);
                add_into(&mut out, &self.df_tree(t1, &w), 1.0);
            }
        }
        out
    }
}

fn to_grid(grid: TimeGrid, n: usize, values: Vec<f64>) -> GridFunction {
    let mut full = vec![0.0; grid.len() * n];
    full[..values.len()].copy_from_slice(&values);
    GridFunction::new(grid, &[n], full).expect("shape matches").with_causal(true)
}

fn check_state<F: VectorField + ?Sized>(state: &ForceState, field: &F, v: &GridFunction) -> Result<()> {
    if v.grid != state.grid() {
        return Err(err!(Domain, "state and force live on different grids"));
    }
    if field.m() != state.m() {
        return Err(err!(Domain, "field noise dimension {} against noise with {} components", field.m(), state.m()));
    }
    Ok(())
}

/// `F_mu[v]` on the whole grid.
pub fn eval_force<F: VectorField + ?Sized>(state: &ForceState, v: &GridFunction, u0: &[f64], field: &F) -> Result<GridFunction> {
    check_state(state, field, v)?;
    let ev = ForceEval::new(state, field, v, u0, v.grid.len())?;
    Ok(to_grid(v.grid, field.n(), ev.force()))
}

/// `DF_mu[v, w]` on the whole grid.
pub fn eval_df<F: VectorField + ?Sized>(
    state: &ForceState,
    v: &GridFunction,
    u0: &[f64],
    field: &F,
    w: &GridFunction,
) -> Result<GridFunction> {
    check_state(state, field, v)?;
    if w.grid != v.grid || w.ncomp() != field.n() {
        return Err(err!(Domain, "direction does not match the state"));
    }
    let ev = ForceEval::new(state, field, v, u0, v.grid.len())?;
    Ok(to_grid(v.grid, field.n(), ev.df(&w.values)))
}

/// `I_mu[v]` on the whole grid.
pub fn eval_i<F: VectorField + ?Sized>(state: &ForceState, v: &GridFunction, u0: &[f64], field: &F) -> Result<GridFunction> {
    check_state(state, field, v)?;
    let ev = ForceEval::new(state, field, v, u0, v.grid.len())?;
    let parts = ev.force_parts();
    let g = graft_kernel(state.mu, v.grid.h(), v.grid.cells());
    Ok(to_grid(v.grid, field.n(), ev.overflow(&parts, &g)))
}

/// Total mass `a` of the cut-off profile, the sub-grid weight of the graft kernel.
pub fn subgrid_mass() -> f64 {
    cutoff_mass()
}
