//! Kernel operators on grid functions and the Hölder–Besov estimator.

use super::cutoff::*;
use super::discrete::{discretize, CausalKernel, Interp};
use super::grid::{GridFunction, TimeGrid};
use crate::err;
use crate::error::Result;
use alloc::vec::Vec;

/// Mass dropped when truncating exponential kernels.
pub const TRUNCATION_MASS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// `Q_mu`, the exponential kernel.
    Q,
    /// `K_{N,mu}`, the Gamma kernel.
    K,
    /// `G_mu`.
    G,
    /// `d/dmu G_mu`.
    GDot,
    /// `(1 + mu d/dt)^4 d/dmu G_mu`.
    RGDot,
    /// `(1 + nu d/dt)^4 K_{4,mu}`.
    KTilde,
    /// `1 - G_mu` restricted to `t >= 0`.
    Cut,
}

/// A discretized convolution kernel together with its description.
#[derive(Debug, Clone)]
pub struct KernelOp {
    pub kind: KernelKind,
    pub mu: f64,
    /// Second scale (only for [`KernelKind::KTilde`]).
    pub nu: f64,
    pub n: usize,
    pub truncation_radius: f64,
    pub kernel: CausalKernel,
}

impl KernelOp {
    pub fn apply(&self, f: &GridFunction) -> GridFunction {
        f.map_components(|s| self.kernel.apply(s))
    }
    pub fn apply_series(&self, f: &[f64]) -> Vec<f64> {
        self.kernel.apply(f)
    }
}

/// Weights of `K_{N,mu}` with unit mass.
pub fn k_weights(n: usize, mu: f64, h: f64, max_lag: usize) -> CausalKernel {
    if n == 0 {
        return CausalKernel::delta();
    }
    let radius = k_truncation_radius(n, mu, TRUNCATION_MASS);
    let hi = radius.min((max_lag + 1) as f64 * h);
    let mut breaks = Vec::new();
    if mu < h {
        let mut x = mu / 8.0;
        while x < h {
            breaks.push(x);
            x *= 2.0;
        }
    }
    let mut k = discretize(|t| k_density(n, mu, t), 0.0, hi, &breaks, h, max_lag, Interp::Linear);
    if hi < radius {
        k.tail += k_tail(n, mu, hi);
    }
    let m = k.mass();
    k.scaled(1.0 / m)
}

pub fn k_op(grid: &TimeGrid, n: usize, mu: f64) -> KernelOp {
    KernelOp {
        kind: if n == 1 { KernelKind::Q } else { KernelKind::K },
        mu,
        nu: 0.0,
        n,
        truncation_radius: k_truncation_radius(n.max(1), mu, TRUNCATION_MASS),
        kernel: k_weights(n, mu, grid.h(), grid.cells()),
    }
}

/// Weights of `d/dmu G_mu`; below the grid step it acts as `-a` times the identity.
pub fn gdot_weights(mu: f64, h: f64, max_lag: usize) -> CausalKernel {
    gdot_weights_with(mu, h, max_lag, Interp::Quintic)
}

pub fn gdot_weights_with(mu: f64, h: f64, max_lag: usize, interp: Interp) -> CausalKernel {
    if mu < h {
        return CausalKernel::from_weights(alloc::vec![-cutoff_mass()]);
    }
    discretize(|t| gdot_mu(t, mu), mu, 2.0 * mu, &[], h, max_lag, interp)
}

/// Weights of `1 - chi(t / mu)` on `t >= 0`; below the grid step, `a mu` times the identity.
pub fn cut_weights(mu: f64, h: f64, max_lag: usize) -> CausalKernel {
    cut_weights_with(mu, h, max_lag, Interp::Quintic)
}

pub fn cut_weights_with(mu: f64, h: f64, max_lag: usize, interp: Interp) -> CausalKernel {
    if mu < h {
        return CausalKernel::from_weights(alloc::vec![cutoff_mass() * mu]);
    }
    discretize(|t| 1.0 - chi(t / mu), 0.0, 2.0 * mu, &[mu], h, max_lag, interp)
}

/// Weights of `(1 + mu d/dt)^4 Gdot_mu`.
pub fn r_gdot_weights(mu: f64, h: f64, max_lag: usize) -> CausalKernel {
    if mu < h {
        return CausalKernel::from_weights(alloc::vec![-cutoff_mass()]);
    }
    discretize(|t| r_gdot_mu(t, mu), mu, 2.0 * mu, &[], h, max_lag, Interp::Quintic)
}

pub fn gdot_op(grid: &TimeGrid, mu: f64) -> KernelOp {
    KernelOp {
        kind: KernelKind::GDot,
        mu,
        nu: 0.0,
        n: 0,
        truncation_radius: 2.0 * mu,
        kernel: gdot_weights(mu, grid.h(), grid.cells()),
    }
}

pub fn cut_op(grid: &TimeGrid, mu: f64) -> KernelOp {
    KernelOp {
        kind: KernelKind::Cut,
        mu,
        nu: 0.0,
        n: 0,
        truncation_radius: 2.0 * mu,
        kernel: cut_weights(mu, grid.h(), grid.cells()),
    }
}

/// `G_mu` as a convolution on the grid.
pub fn g_op(grid: &TimeGrid, mu: f64) -> KernelOp {
    let h = grid.h();
    let kernel = if mu == 0.0 {
        // Heaviside: trapezoid weights of the indicator of t >= 0.
        let mut w = alloc::vec![h; grid.len()];
        w[0] = 0.5 * h;
        CausalKernel::from_weights(w)
    } else {
        discretize(|t| chi(t / mu), mu, 1.0 + h, &[2.0 * mu], h, grid.cells(), Interp::Quintic)
    };
    KernelOp { kind: KernelKind::G, mu, nu: 0.0, n: 0, truncation_radius: f64::INFINITY, kernel }
}

/// The closed-form composite `(1 + mu d/dt)^4 Gdot_mu`.
pub fn r_dotg_kernel(grid: &TimeGrid, mu: f64) -> KernelOp {
    KernelOp {
        kind: KernelKind::RGDot,
        mu,
        nu: 0.0,
        n: 0,
        truncation_radius: 2.0 * mu,
        kernel: r_gdot_weights(mu, grid.h(), grid.cells()),
    }
}

/// Mixture weights of `(1 + nu d/dt)^4 K_{4,mu} = ((nu/mu) delta + (1 - nu/mu) Q_mu)^{*4}`:
/// the coefficient of `K_{k,mu}` for `k = 0..=4`.
pub fn ktilde_coefficients(mu: f64, nu: f64) -> [f64; 5] {
    let r = nu / mu;
    let s = 1.0 - r;
    [r * r * r * r, 4.0 * r * r * r * s, 6.0 * r * r * s * s, 4.0 * r * s * s * s, s * s * s * s]
}

/// `Ktilde_{mu,nu} = (1 + nu d/dt)^4 K_{4,mu}` for `nu <= mu`.
pub fn ktilde(grid: &TimeGrid, mu: f64, nu: f64) -> Result<KernelOp> {
    if !(nu > 0.0 && nu <= mu * (1.0 + 1e-12)) {
        return Err(err!(Domain, "ktilde needs 0 < nu <= mu, got mu = {mu}, nu = {nu}"));
    }
    let c = ktilde_coefficients(mu, nu.min(mu));
    let mut kernel = CausalKernel::default();
    for (k, ck) in c.iter().enumerate() {
        if *ck != 0.0 {
            kernel.add_scaled(*ck, &k_weights(k, mu, grid.h(), grid.cells()));
        }
    }
    Ok(KernelOp {
        kind: KernelKind::KTilde,
        mu,
        nu,
        n: 4,
        truncation_radius: k_truncation_radius(4, mu, TRUNCATION_MASS),
        kernel,
    })
}

/// `K_{N,mu} f`.
pub fn convolve_k(f: &GridFunction, n: usize, mu: f64) -> GridFunction {
    k_op(&f.grid, n, mu).apply(f)
}

/// Fourth-order finite-difference derivative of a series with step `h`.
pub fn derivative(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    let mut d = alloc::vec![0.0; n];
    if n < 5 {
        for i in 0..n {
            let (a, b) = if i == 0 { (0, 1.min(n - 1)) } else if i + 1 == n { (i - 1, i) } else { (i - 1, i + 1) };
            d[i] = if b > a { (f[b] - f[a]) / ((b - a) as f64 * h) } else { 0.0 };
        }
        return d;
    }
    let c = 12.0 * h;
    d[0] = (-25.0 * f[0] + 48.0 * f[1] - 36.0 * f[2] + 16.0 * f[3] - 3.0 * f[4]) / c;
    d[1] = (-3.0 * f[0] - 10.0 * f[1] + 18.0 * f[2] - 6.0 * f[3] + f[4]) / c;
    for i in 2..n - 2 {
        d[i] = (f[i - 2] - 8.0 * f[i - 1] + 8.0 * f[i + 1] - f[i + 2]) / c;
    }
    let m = n - 1;
    d[m] = (25.0 * f[m] - 48.0 * f[m - 1] + 36.0 * f[m - 2] - 16.0 * f[m - 3] + 3.0 * f[m - 4]) / c;
    d[m - 1] = (3.0 * f[m] + 10.0 * f[m - 1] - 18.0 * f[m - 2] + 6.0 * f[m - 3] - f[m - 4]) / c;
    d
}

/// Result of [`apply_p`]: the values and whether `mu < h` made them under-resolved.
#[derive(Debug, Clone)]
pub struct Applied {
    pub value: GridFunction,
    pub under_resolved: bool,
}

/// `(1 + mu d/dt)^N f` by fourth-order finite differences.
pub fn apply_p(f: &GridFunction, n: usize, mu: f64) -> Applied {
    let h = f.grid.h();
    let value = f.map_components(|s| {
        let mut cur = s.to_vec();
        for _ in 0..n {
            let d = derivative(&cur, h);
            for (c, di) in cur.iter_mut().zip(d) {
                *c += mu * di;
            }
        }
        cur
    });
    Applied { value, under_resolved: mu < h }
}

/// Finite-grid Hölder–Besov estimator.
///
/// For `beta < 0` it returns `max_mu mu^-beta |K_{ceil(-beta),mu} f|_inf`, for
/// `beta in (0, 1)` it returns `max_mu mu^-beta |(K_{4,mu} - Id) f|_inf`.
pub fn besov_norm(f: &GridFunction, beta: f64, mu_grid: &[f64]) -> Result<f64> {
    if mu_grid.is_empty() {
        return Err(err!(Domain, "empty scale grid"));
    }
    if !(beta > -2.0 && beta < 1.0) || beta == 0.0 {
        return Err(err!(Domain, "beta = {beta} outside (-2, 1) minus 0"));
    }
    let mut best = 0.0f64;
    for &mu in mu_grid {
        let weight = libm::pow(mu, -beta);
        let norm = if beta < 0.0 {
            let n = libm::ceil(-beta) as usize;
            convolve_k(f, n, mu).sup_norm()
        } else {
            convolve_k(f, 4, mu).sub(f).sup_norm()
        };
        best = best.max(weight * norm);
    }
    Ok(best)
}

/// Geometric scale grid from `lo` to `hi` with `per_octave` points per factor 2.
pub fn geometric_grid(lo: f64, hi: f64, per_octave: usize) -> Vec<f64> {
    let ratio = libm::exp2(1.0 / per_octave as f64);
    let mut out = Vec::new();
    let mut mu = lo;
    while mu <= hi * (1.0 + 1e-9) {
        out.push(mu);
        mu *= ratio;
    }
    out
}
