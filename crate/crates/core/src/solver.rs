//! Fixed point for the remainder, adaptive horizon, reconstruction of the
//! solution and a direct time-stepping reference solver.
//!
//! The unknowns live on the geometric scale grid `h = nu_0 < ... < nu_J = T`.
//! Per scale the solver carries `theta_nu = R_nu v_nu` (so `v_nu = K_{4,nu} theta_nu`)
//! and the remainder `R_nu` itself; the smoothed remainder `K_{4,nu} R_nu`
//! enters only the norm.

use crate::differentials::VectorField;
use crate::err;
use crate::error::{Error, Result};
use crate::flow::{conv, flow_path, graft_kernel, ForceEval, ForceState, STEPS_PER_OCTAVE};
use crate::kernels::{
    chi, chi_deriv, discretize, geometric_grid, k_weights, ktilde_coefficients, r_gdot_weights, GridFunction, Interp,
    TimeGrid,
};
use crate::noise::Mollified;
use crate::quad::GaussLegendre;
use alloc::vec;
use alloc::vec::Vec;

/// Force states on the scale grid from `h` to 1.
#[derive(Debug, Clone)]
pub struct ForceFamily {
    pub hurst: f64,
    pub eps: f64,
    pub states: Vec<ForceState>,
    /// `W_eps` on the grid.
    pub w_eps: GridFunction,
}

impl ForceFamily {
    /// Flows the force coefficients of `noise` over `[h, 1]`.
    pub fn new(noise: &Mollified, per_octave: usize) -> Result<Self> {
        let grid = noise.grid();
        let mut mus = geometric_grid(grid.h(), 1.0, per_octave.max(4));
        if let Some(last) = mus.last_mut() {
            if (*last - 1.0).abs() < 1e-9 {
                *last = 1.0;
            }
        }
        let states = flow_path(noise.xi.clone(), noise.eps, &mus, 1)?;
        Ok(ForceFamily { hurst: noise.path().spec.hurst, eps: noise.eps, states, w_eps: noise.w_eps() })
    }

    pub fn with_default_resolution(noise: &Mollified) -> Result<Self> {
        ForceFamily::new(noise, STEPS_PER_OCTAVE)
    }

    pub fn grid(&self) -> TimeGrid {
        self.states[0].grid()
    }

    pub fn mu_grid(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.mu).collect()
    }

    /// Number of scales not exceeding `horizon`.
    fn count_upto(&self, horizon: f64) -> usize {
        self.states.iter().take_while(|s| s.mu <= horizon * (1.0 + 1e-9)).count()
    }

    /// `delta = -1 + 4H`.
    pub fn delta(&self) -> f64 {
        -1.0 + 4.0 * self.hurst
    }
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub t0: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Iterates with norm above this multiple of the first iterate's norm count as divergence.
    pub ball_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { t0: 1.0, tol: 1e-8, max_iter: 50, ball_factor: 10.0 }
    }
}

/// Per-scale unknowns on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RemainderState {
    pub mu_grid: Vec<f64>,
    pub horizon: f64,
    pub theta: Vec<GridFunction>,
    pub r: Vec<GridFunction>,
}

impl RemainderState {
    pub fn zeros(family: &ForceFamily, horizon: f64, n: usize) -> Self {
        let count = family.count_upto(horizon);
        let grid = family.grid();
        let z = GridFunction::zeros(grid, &[n]).with_causal(true);
        RemainderState {
            mu_grid: family.mu_grid()[..count].to_vec(),
            horizon,
            theta: vec![z.clone(); count],
            r: vec![z; count],
        }
    }

    /// `K_{4,nu} R_nu` per scale.
    pub fn r_tilde(&self) -> Vec<GridFunction> {
        let grid = self.r[0].grid;
        let len = points_upto(grid, self.horizon);
        self.r
            .iter()
            .zip(&self.mu_grid)
            .map(|(r, &mu)| {
                let k = k_weights(4, mu, grid.h(), len - 1);
                let n = r.ncomp();
                let mut out = r.clone();
                let sm = conv(&k.weights, &r.values[..len * n], n);
                out.values[..len * n].copy_from_slice(&sm);
                out
            })
            .collect()
    }

    /// `v_nu = K_{4,nu} theta_nu` per scale.
    pub fn v(&self) -> Vec<GridFunction> {
        let grid = self.theta[0].grid;
        let len = points_upto(grid, self.horizon);
        self.theta
            .iter()
            .zip(&self.mu_grid)
            .map(|(th, &mu)| {
                let k = k_weights(4, mu, grid.h(), len - 1);
                let n = th.ncomp();
                let mut out = th.clone();
                let sm = conv(&k.weights, &th.values[..len * n], n);
                out.values[..len * n].copy_from_slice(&sm);
                out
            })
            .collect()
    }
}

/// Outcome of [`solve_remainder`].
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub horizon: f64,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub final_norm: f64,
    /// Ratio of the last two residuals.
    pub contraction_ratio: Option<f64>,
    pub u: GridFunction,
    /// Filled in by callers that run [`direct_oracle`].
    pub oracle_gap: Option<f64>,
    pub halvings: usize,
}

fn points_upto(grid: TimeGrid, horizon: f64) -> usize {
    ((libm::floor(horizon / grid.h() + 1e-9) as usize) + 1).min(grid.len())
}

/// Kernels shared by every iteration at one horizon.
struct Workspace<'a> {
    family: &'a ForceFamily,
    count: usize,
    len: usize,
    mus: Vec<f64>,
    /// `K_{i,nu_k}` for `i = 0..=4`.
    kpow: Vec<[Vec<f64>; 5]>,
    /// `(1 + nu d/dt)^4 Gdot_nu`.
    rgdot: Vec<Vec<f64>>,
    /// `Gdot_nu` as used by the flow.
    graft: Vec<Vec<f64>>,
}

impl<'a> Workspace<'a> {
    fn new(family: &'a ForceFamily, horizon: f64) -> Result<Self> {
        let grid = family.grid();
        let h = grid.h();
        let count = family.count_upto(horizon);
        if count < 2 {
            return Err(err!(Horizon, "horizon {horizon} leaves fewer than two scales"));
        }
        let len = points_upto(grid, horizon);
        let mus: Vec<f64> = family.states[..count].iter().map(|s| s.mu).collect();
        let max_lag = len - 1;
        let kpow = mus
            .iter()
            .map(|&mu| core::array::from_fn(|i| k_weights(i, mu, h, max_lag).weights))
            .collect();
        let rgdot = mus.iter().map(|&mu| r_gdot_weights(mu, h, max_lag).weights).collect();
        let graft = mus.iter().map(|&mu| graft_kernel(mu, h, max_lag)).collect();
        Ok(Workspace { family, count, len, mus, kpow, rgdot, graft })
    }

    fn n_of(state: &RemainderState) -> usize {
        state.theta[0].ncomp()
    }

    /// Per scale: `H = F[v] + R` and `D = DF[v, Gdot R] + I[v]`.
    fn evaluate<F: VectorField + ?Sized>(
        &self,
        state: &RemainderState,
        field: &F,
        u0: &[f64],
        need_d: bool,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let n = Self::n_of(state);
        let len = self.len;
        let grid = self.family.grid();
        let mut hs = Vec::with_capacity(self.count);
        let mut ds = Vec::with_capacity(self.count);
        for k in 0..self.count {
            let theta = &state.theta[k].values[..len * n];
            let mut v = GridFunction::zeros(grid, &[n]).with_causal(true);
            v.values[..len * n].copy_from_slice(&conv(&self.kpow[k][4], theta, n));
            let ev = ForceEval::new(&self.family.states[k], field, &v, u0, len).map_err(horizon_signal)?;
            let parts = ev.force_parts();
            let r = &state.r[k].values[..len * n];
            let mut hk = r.to_vec();
            for p in &parts {
                hk.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
            if need_d {
                let w = conv(&self.graft[k], r, n);
                let mut dk = ev.df(&w);
                let over = ev.overflow(&parts, &self.graft[k]);
                dk.iter_mut().zip(&over).for_each(|(a, b)| *a += b);
                ds.push(dk);
            }
            hs.push(hk);
        }
        Ok((hs, ds))
    }

    fn phi<F: VectorField + ?Sized>(&self, state: &RemainderState, field: &F, u0: &[f64]) -> Result<RemainderState> {
        let n = Self::n_of(state);
        let len = self.len;
        let (hs, ds) = self.evaluate(state, field, u0, true)?;
        let j_last = self.count - 1;
        let logs: Vec<f64> = self.mus.iter().map(|m| libm::log(*m)).collect();
        let mut out = state.clone();

        // Remainder: integral over (0, nu_j], rectangle below the grid step.
        let mut acc: Vec<f64> = ds[0].iter().map(|d| -self.mus[0] * d).collect();
        out.r[0].values[..len * n].copy_from_slice(&acc);
        for j in 1..self.count {
            let half = 0.5 * (logs[j] - logs[j - 1]);
            for (a, (d0, d1)) in acc.iter_mut().zip(ds[j - 1].iter().zip(&ds[j])) {
                *a -= half * (self.mus[j - 1] * d0 + self.mus[j] * d1);
            }
            out.r[j].values[..len * n].copy_from_slice(&acc);
        }

        // theta: integral over [nu_j, T] of Ktilde (R Gdot)(F + R).
        let pieces: Vec<[Vec<f64>; 5]> = (0..self.count)
            .map(|k| {
                let g = conv(&self.rgdot[k], &hs[k], n);
                core::array::from_fn(|i| conv(&self.kpow[k][i], &g, n))
            })
            .collect();
        for j in 0..self.count {
            let mut th = vec![0.0; len * n];
            for k in j..self.count {
                let mut w = 0.0;
                if k > j {
                    w += 0.5 * (logs[k] - logs[k - 1]);
                }
                if k < j_last {
                    w += 0.5 * (logs[k + 1] - logs[k]);
                }
                if w == 0.0 {
                    continue;
                }
                w *= self.mus[k];
                let c = ktilde_coefficients(self.mus[k], self.mus[j]);
                for (i, ci) in c.iter().enumerate() {
                    let f = w * ci;
                    if f == 0.0 {
                        continue;
                    }
                    th.iter_mut().zip(&pieces[k][i]).for_each(|(a, b)| *a -= f * b);
                }
            }
            out.theta[j].values[..len * n].copy_from_slice(&th);
        }
        if out.theta.iter().chain(&out.r).any(|g| g.values.iter().any(|x| !x.is_finite())) {
            return Err(err!(Horizon, "non-finite iterate at horizon {}", state.horizon));
        }
        Ok(out)
    }

    /// `max(sup |theta|, sup nu^(-delta/2) |K_4 R|)` of the difference `a - b`
    /// (or of `a` when `b` is `None`).
    fn norm(&self, a: &RemainderState, b: Option<&RemainderState>) -> f64 {
        let n = Self::n_of(a);
        let len = self.len;
        let half_delta = 0.5 * self.family.delta();
        let mut best = 0.0f64;
        for k in 0..self.count {
            let diff = |x: &GridFunction, y: Option<&GridFunction>| -> Vec<f64> {
                match y {
                    Some(y) => x.values[..len * n].iter().zip(&y.values[..len * n]).map(|(p, q)| p - q).collect(),
                    None => x.values[..len * n].to_vec(),
                }
            };
            let th = diff(&a.theta[k], b.map(|b| &b.theta[k]));
            best = best.max(th.iter().fold(0.0f64, |m, x| m.max(x.abs())));
            let r = diff(&a.r[k], b.map(|b| &b.r[k]));
            let rt = conv(&self.kpow[k][4], &r, n);
            let w = libm::pow(self.mus[k], -half_delta);
            best = best.max(w * rt.iter().fold(0.0f64, |m, x| m.max(x.abs())));
        }
        best
    }
}

/// Field domain violations during a solve mean the horizon is too long.
fn horizon_signal(e: Error) -> Error {
    match e {
        Error::Domain(m) => Error::Horizon(m),
        other => other,
    }
}

fn check_shapes<F: VectorField + ?Sized>(family: &ForceFamily, field: &F, u0: &[f64]) -> Result<()> {
    if family.states.is_empty() {
        return Err(err!(Domain, "empty force family"));
    }
    if field.m() != family.states[0].m() || u0.len() != field.n() {
        return Err(err!(
            Domain,
            "field ({}, {}) does not match noise dimension {} and initial value of length {}",
            field.n(),
            field.m(),
            family.states[0].m(),
            u0.len()
        ));
    }
    Ok(())
}

/// One application of the fixed-point map.
pub fn phi_map<F: VectorField + ?Sized>(
    state: &RemainderState,
    family: &ForceFamily,
    field: &F,
    u0: &[f64],
) -> Result<RemainderState> {
    check_shapes(family, field, u0)?;
    let ws = Workspace::new(family, state.horizon)?;
    ws.phi(state, field, u0)
}

/// `max(sup |theta|, sup nu^(-delta/2) |K_4 R|)` over the scales of `state`.
pub fn state_norm(state: &RemainderState, family: &ForceFamily) -> Result<f64> {
    let ws = Workspace::new(family, state.horizon)?;
    Ok(ws.norm(state, None))
}

enum Attempt {
    Converged(RemainderState, Vec<f64>, f64),
    Rejected(Error),
}

fn picard<F: VectorField + ?Sized>(ws: &Workspace<'_>, field: &F, u0: &[f64], horizon: f64, cfg: &SolverConfig) -> Result<Attempt> {
    let n = field.n();
    let mut cur = RemainderState::zeros(ws.family, horizon, n);
    let mut history = Vec::new();
    let mut ball = None;
    for _ in 0..cfg.max_iter {
        let next = match ws.phi(&cur, field, u0) {
            Ok(s) => s,
            Err(e @ Error::Horizon(_)) => return Ok(Attempt::Rejected(e)),
            Err(e) => return Err(e),
        };
        let norm = ws.norm(&next, None);
        let radius = *ball.get_or_insert(cfg.ball_factor * norm);
        if norm > radius {
            return Ok(Attempt::Rejected(err!(Horizon, "iterate left the ball ({norm:.3e} > {radius:.3e})")));
        }
        let dist = ws.norm(&next, Some(&cur));
        history.push(dist);
        cur = next;
        if dist < cfg.tol {
            return Ok(Attempt::Converged(cur, history, norm));
        }
    }
    Ok(Attempt::Rejected(err!(Horizon, "no convergence in {} iterations", cfg.max_iter)))
}

/// Picard iteration from zero with horizon halving on divergence.
pub fn solve_remainder<F: VectorField + ?Sized>(
    family: &ForceFamily,
    field: &F,
    u0: &[f64],
    cfg: &SolverConfig,
) -> Result<(RemainderState, SolveReport)> {
    check_shapes(family, field, u0)?;
    if !(cfg.t0 > 0.0 && cfg.t0 <= 1.0) {
        return Err(err!(Domain, "initial horizon {} outside (0, 1]", cfg.t0));
    }
    let grid = family.grid();
    let h = grid.h();
    let mut horizon = family.states[..family.count_upto(cfg.t0)].last().map(|s| s.mu).unwrap_or(h);
    let mut halvings = 0;
    let mut reason = None;
    loop {
        if horizon < 8.0 * h * (1.0 - 1e-9) {
            let last = reason.map(|e: Error| alloc::format!(" (last: {e})")).unwrap_or_default();
            return Err(err!(
                Horizon,
                "horizon fell below 8h after {halvings} halvings; the noise is too rough for this grid{last}"
            ));
        }
        let ws = Workspace::new(family, horizon)?;
        match picard(&ws, field, u0, horizon, cfg)? {
            Attempt::Converged(state, history, norm) => {
                let u = reconstruct_with(&ws, &state, field, u0)?;
                let ratio = match history.as_slice() {
                    [.., a, b] if *a > 0.0 => Some(b / a),
                    _ => None,
                };
                let report = SolveReport {
                    horizon,
                    iterations: history.len(),
                    residual_history: history,
                    final_norm: norm,
                    contraction_ratio: ratio,
                    u,
                    oracle_gap: None,
                    halvings,
                };
                return Ok((state, report));
            }
            Attempt::Rejected(e) => {
                reason = Some(e);
                halvings += 1;
                let target = horizon / 2.0;
                horizon = family.states[..family.count_upto(target)].last().map(|s| s.mu).unwrap_or(0.0);
            }
        }
    }
}

/// `u = u0 + v_0` with `v_0 = -int_0^T Gdot_nu (F_nu[v_nu] + R_nu) dnu`,
/// integrating the scale variable exactly against the linear interpolant of
/// `F + R` between neighbouring scales.
pub fn reconstruct<F: VectorField + ?Sized>(
    state: &RemainderState,
    family: &ForceFamily,
    field: &F,
    u0: &[f64],
) -> Result<GridFunction> {
    check_shapes(family, field, u0)?;
    let ws = Workspace::new(family, state.horizon)?;
    reconstruct_with(&ws, state, field, u0)
}

/// `int_{nu_a}^{nu_b} Gdot_nu(s) (nu - nu_a) / (nu_b - nu_a) dnu`.
fn upper_weight_kernel(gl: &GaussLegendre, s: f64, a: f64, b: f64) -> f64 {
    let lo = (s / b).max(1.0);
    let hi = (s / a).min(2.0);
    if hi <= lo {
        return 0.0;
    }
    -gl.integrate(lo, hi, |y| (s / y - a) * chi_deriv(y, 1)) / (b - a)
}

fn reconstruct_with<F: VectorField + ?Sized>(
    ws: &Workspace<'_>,
    state: &RemainderState,
    field: &F,
    u0: &[f64],
) -> Result<GridFunction> {
    let n = field.n();
    let len = ws.len;
    let grid = ws.family.grid();
    let h = grid.h();
    let max_lag = len - 1;
    let (hs, _) = ws.evaluate(state, field, u0, false)?;
    let gl = GaussLegendre::new(8);
    let mut v = vec![0.0; len * n];
    let mu0 = ws.mus[0];
    let stub = discretize(|s| chi(s / mu0) - 1.0, 0.0, 2.0 * mu0, &[mu0], h, max_lag, Interp::Quintic);
    v.iter_mut().zip(conv(&stub.weights, &hs[0], n)).for_each(|(a, b)| *a -= b);
    for j in 0..ws.count - 1 {
        let (a, b) = (ws.mus[j], ws.mus[j + 1]);
        let breaks = [a, b, 2.0 * a, 2.0 * b];
        let upper = discretize(|s| upper_weight_kernel(&gl, s, a, b), a, 2.0 * b, &breaks, h, max_lag, Interp::Quintic);
        let total = discretize(|s| chi(s / b) - chi(s / a), a, 2.0 * b, &breaks, h, max_lag, Interp::Quintic);
        let mut lower = total.weights.clone();
        lower.iter_mut().zip(&upper.weights).for_each(|(x, y)| *x -= y);
        let lo = conv(&lower, &hs[j], n);
        let up = conv(&upper.weights, &hs[j + 1], n);
        for ((x, p), q) in v.iter_mut().zip(&lo).zip(&up) {
            *x -= p + q;
        }
    }
    // The interior of the rule is spectrally accurate for the smooth noise;
    // its error sits at the endpoint, where the exact integral of the noise
    // is known. Correct by V(u(t)) (W_eps(t) - Q[xi](t)).
    let m = field.m();
    let xi = &ws.family.states[0].xi;
    let one = discretize(|_| 1.0, 0.0, len as f64 * h, &[], h, max_lag, Interp::Quintic);
    let q = conv(&one.weights, &xi.values[..len * m], m);
    let mut vm = vec![0.0; n * m];
    let mut x = vec![0.0; n];
    for i in 0..len {
        for c in 0..n {
            x[c] = u0[c] + v[i * n + c];
        }
        field.eval(&x, &mut vm);
        let w = ws.family.w_eps.at(i);
        for a in 0..n {
            v[i * n + a] += (0..m).map(|al| vm[a * m + al] * (w[al] - q[i * m + al])).sum::<f64>();
        }
    }
    let mut u = GridFunction::zeros(grid, &[n]);
    for i in 0..grid.len() {
        let src = i.min(len - 1);
        for c in 0..n {
            u.at_mut(i)[c] = u0[c] + v[src * n + c];
        }
    }
    Ok(u)
}

/// Classical RK4 for `du/dt = V(u) xi_eps(t)` with step `h / fine_factor`,
/// sampled on the grid up to `horizon` and held constant after it.
pub fn direct_oracle<F: VectorField + ?Sized>(
    noise: &Mollified,
    field: &F,
    u0: &[f64],
    horizon: f64,
    fine_factor: usize,
) -> Result<GridFunction> {
    if fine_factor < 4 {
        return Err(err!(Domain, "fine factor {fine_factor} below 4"));
    }
    let (n, m) = (field.n(), field.m());
    if noise.m() != m || u0.len() != n {
        return Err(err!(Domain, "field ({n}, {m}) does not match the noise or the initial value"));
    }
    let grid = noise.grid();
    let len = points_upto(grid, horizon);
    let dt = grid.h() / fine_factor as f64;
    let limit = 10.0 * field.domain_radius();
    let mut xi = vec![0.0; m];
    let mut vmat = vec![0.0; n * m];
    let mut rhs = |t: f64, x: &[f64], out: &mut [f64]| {
        noise.xi_at(t, &mut xi);
        field.eval(x, &mut vmat);
        for a in 0..n {
            out[a] = (0..m).map(|al| vmat[a * m + al] * xi[al]).sum();
        }
    };
    let mut u = GridFunction::zeros(grid, &[n]);
    let mut x = u0.to_vec();
    u.at_mut(0).copy_from_slice(&x);
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 1..len {
        for s in 0..fine_factor {
            let t = grid.t(i - 1) + s as f64 * dt;
            rhs(t, &x, &mut k1);
            tmp.iter_mut().zip(&x).zip(&k1).for_each(|((o, a), b)| *o = a + 0.5 * dt * b);
            rhs(t + 0.5 * dt, &tmp, &mut k2);
            tmp.iter_mut().zip(&x).zip(&k2).for_each(|((o, a), b)| *o = a + 0.5 * dt * b);
            rhs(t + 0.5 * dt, &tmp, &mut k3);
            tmp.iter_mut().zip(&x).zip(&k3).for_each(|((o, a), b)| *o = a + dt * b);
            rhs(t + dt, &tmp, &mut k4);
            for c in 0..n {
                x[c] += dt / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
            }
        }
        let size = x.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if !size.is_finite() || size > limit {
            return Err(err!(Horizon, "direct solution blew up at t = {}", grid.t(i)));
        }
        u.at_mut(i).copy_from_slice(&x);
    }
    for i in len..grid.len() {
        let last = u.at(len - 1).to_vec();
        u.at_mut(i).copy_from_slice(&last);
    }
    Ok(u)
}

/// `sup |a - b| / (1 + sup |a|)` over `[0, horizon]`.
pub fn relative_gap(a: &GridFunction, b: &GridFunction, horizon: f64) -> f64 {
    let last = points_upto(a.grid, horizon) - 1;
    a.sub(b).sup_norm_until(last) / (1.0 + a.sup_norm_until(last))
}
