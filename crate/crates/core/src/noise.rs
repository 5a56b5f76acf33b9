//! Fractional Brownian motion: covariance, exact sampling, extension by zero
//! to negative times and mollification into the smooth noise `xi_eps`.

use crate::err;
use crate::error::Result;
use crate::kernels::{GridFunction, TimeGrid};
use crate::quad::GaussLegendre;
use alloc::vec;
use alloc::vec::Vec;
use rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Parameters of the driving noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub hurst: f64,
    pub m: usize,
    pub seed: u64,
    pub c_h: f64,
}

impl NoiseSpec {
    pub fn new(hurst: f64, m: usize, seed: u64) -> Result<Self> {
        if !(hurst > 0.25 && hurst <= 0.5) {
            return Err(err!(Domain, "Hurst index {hurst} outside (1/4, 1/2]"));
        }
        if m == 0 {
            return Err(err!(Domain, "noise dimension must be at least 1"));
        }
        Ok(NoiseSpec { hurst, m, seed, c_h: 0.5 })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// `C_H (t^2H + s^2H - |t - s|^2H)` for positive times, zero otherwise.
pub fn cov_w(t: f64, s: f64, spec: &NoiseSpec) -> f64 {
    cov_raw(t, s, spec.hurst, spec.c_h)
}

fn cov_raw(t: f64, s: f64, hurst: f64, c_h: f64) -> f64 {
    if t <= 0.0 || s <= 0.0 {
        return 0.0;
    }
    let p = 2.0 * hurst;
    c_h * (libm::pow(t, p) + libm::pow(s, p) - libm::pow((t - s).abs(), p))
}

/// A sampled path, `R^m`-valued, with `W(0) = 0` and `W = 0` before 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub w: GridFunction,
    pub spec: NoiseSpec,
}

impl NoisePath {
    /// Wraps given values (point-major, `m` components per point).
    pub fn from_values(grid: TimeGrid, spec: NoiseSpec, values: Vec<f64>) -> Result<Self> {
        let w = GridFunction::new(grid, &[spec.m], values)?.with_causal(true);
        if w.at(0).iter().any(|v| *v != 0.0) {
            return Err(err!(Domain, "a noise path must start at 0"));
        }
        Ok(NoisePath { w, spec })
    }

    /// The path multiplied by `a`.
    pub fn scaled(&self, a: f64) -> NoisePath {
        let mut out = self.clone();
        out.w.scale(a);
        out
    }
}

/// Cholesky factor of the fBM Gram matrix on the positive grid points,
/// reusable across seeds.
#[derive(Debug, Clone)]
pub struct FbmSampler {
    grid: TimeGrid,
    hurst: f64,
    c_h: f64,
    // Packed lower-triangular rows.
    chol: Vec<f64>,
}

/// Largest grid level accepted by the Cholesky sampler.
pub const MAX_SAMPLER_LEVEL: u32 = 14;

impl FbmSampler {
    pub fn new(grid: TimeGrid, hurst: f64, c_h: f64) -> Result<Self> {
        if grid.level() > MAX_SAMPLER_LEVEL {
            return Err(err!(Domain, "grid level {} above the sampler limit {MAX_SAMPLER_LEVEL}", grid.level()));
        }
        let n = grid.cells();
        let mut jitter = 0.0;
        for attempt in 0..2 {
            match cholesky(n, |i, j| cov_raw(grid.t(i + 1), grid.t(j + 1), hurst, c_h), jitter) {
                Some(chol) => return Ok(FbmSampler { grid, hurst, c_h, chol }),
                None if attempt == 0 => jitter = 1e-12,
                None => break,
            }
        }
        Err(err!(Numeric, "fBM Gram matrix is not positive definite even with jitter"))
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// Draws the path for `spec` (its `hurst` and `c_h` must match the sampler).
    pub fn sample(&self, spec: &NoiseSpec) -> Result<NoisePath> {
        if spec.hurst != self.hurst || spec.c_h != self.c_h {
            return Err(err!(Domain, "sampler built for a different Hurst index or normalization"));
        }
        let n = self.grid.cells();
        let m = spec.m;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut values = vec![0.0; (n + 1) * m];
        let mut z = vec![0.0; n];
        for c in 0..m {
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(&mut rng);
            }
            for i in 0..n {
                let row = &self.chol[i * (i + 1) / 2..i * (i + 1) / 2 + i + 1];
                let s: f64 = row.iter().zip(&z).map(|(a, b)| a * b).sum();
                values[(i + 1) * m + c] = s;
            }
        }
        NoisePath::from_values(self.grid, *spec, values)
    }
}

/// Packed lower Cholesky factor of the matrix `a(i, j)`, or `None` if a pivot fails.
fn cholesky<F: Fn(usize, usize) -> f64>(n: usize, a: F, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * (n + 1) / 2];
    for i in 0..n {
        let ri = i * (i + 1) / 2;
        for j in 0..=i {
            let rj = j * (j + 1) / 2;
            let dot: f64 = l[ri..ri + j].iter().zip(&l[rj..rj + j]).map(|(x, y)| x * y).sum();
            let v = a(i, j) - dot;
            if i == j {
                let d = v + jitter;
                if !(d > 0.0) {
                    return None;
                }
                l[ri + i] = libm::sqrt(d);
            } else {
                l[ri + j] = v / l[rj + j];
            }
        }
    }
    Some(l)
}

/// Exact Gaussian sample of fBM on the grid.
pub fn sample_fbm(grid: TimeGrid, spec: &NoiseSpec) -> Result<NoisePath> {
    FbmSampler::new(grid, spec.hurst, spec.c_h)?.sample(spec)
}

/// The bump `rho(x) = c exp(-1 / (x (1 - x)))` on `(0, 1)`, with tabulated
/// distribution function and its antiderivative.
#[derive(Debug, Clone)]
pub struct Mollifier {
    norm: f64,
    // Values of the distribution function and of its integral on a uniform table.
    cdf: Vec<f64>,
    icdf: Vec<f64>,
}

const TABLE: usize = 8192;

fn bump(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        libm::exp(-1.0 / (x * (1.0 - x)))
    }
}

fn bump_deriv(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        let q = x * (1.0 - x);
        bump(x) * (1.0 - 2.0 * x) / (q * q)
    }
}

impl Default for Mollifier {
    fn default() -> Self {
        Self::new()
    }
}

impl Mollifier {
    pub fn new() -> Self {
        let gl = GaussLegendre::new(10);
        let dx = 1.0 / TABLE as f64;
        let mut raw = vec![0.0; TABLE + 1];
        for k in 0..TABLE {
            raw[k + 1] = raw[k] + gl.integrate(k as f64 * dx, (k + 1) as f64 * dx, bump);
        }
        let norm = 1.0 / raw[TABLE];
        let cdf: Vec<f64> = raw.iter().map(|v| v * norm).collect();
        // Integral of the cubic Hermite interpolant of the distribution function.
        let mut icdf = vec![0.0; TABLE + 1];
        for k in 0..TABLE {
            let (r0, r1) = (cdf[k], cdf[k + 1]);
            let (d0, d1) = (norm * bump(k as f64 * dx), norm * bump((k + 1) as f64 * dx));
            icdf[k + 1] = icdf[k] + dx * (r0 + r1) / 2.0 + dx * dx * (d0 - d1) / 12.0;
        }
        Mollifier { norm, cdf, icdf }
    }

    /// `rho(x)`.
    pub fn rho(&self, x: f64) -> f64 {
        self.norm * bump(x)
    }

    /// `rho'(x)`.
    pub fn rho_deriv(&self, x: f64) -> f64 {
        self.norm * bump_deriv(x)
    }

    /// `rho_eps(x) = rho(x / eps) / eps`.
    pub fn rho_eps(&self, x: f64, eps: f64) -> f64 {
        self.rho(x / eps) / eps
    }

    /// `int_0^x rho`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let (k, s) = self.locate(x);
        let dx = 1.0 / TABLE as f64;
        let d0 = self.rho(k as f64 * dx) * dx;
        let d1 = self.rho((k + 1) as f64 * dx) * dx;
        hermite(self.cdf[k], self.cdf[k + 1], d0, d1, s).clamp(self.cdf[k], self.cdf[k + 1])
    }

    /// `int_0^x cdf`, extended linearly beyond 1.
    pub fn cdf_integral(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return self.icdf[TABLE] + (x - 1.0);
        }
        let (k, s) = self.locate(x);
        let dx = 1.0 / TABLE as f64;
        hermite(self.icdf[k], self.icdf[k + 1], self.cdf[k] * dx, self.cdf[k + 1] * dx, s)
    }

    fn locate(&self, x: f64) -> (usize, f64) {
        let y = x * TABLE as f64;
        let k = (libm::floor(y) as usize).min(TABLE - 1);
        (k, y - k as f64)
    }
}

fn hermite(p0: f64, p1: f64, m0: f64, m1: f64, s: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0) * p0 + (s3 - 2.0 * s2 + s) * m0 + (-2.0 * s3 + 3.0 * s2) * p1 + (s3 - s2) * m1
}

/// The mollified noise `xi_eps = rho_eps' * W` of a piecewise-linear path,
/// available on the grid and at arbitrary times.
#[derive(Debug, Clone)]
pub struct Mollified {
    pub eps: f64,
    pub xi: GridFunction,
    path: NoisePath,
    mollifier: Mollifier,
}

impl Mollified {
    pub fn grid(&self) -> TimeGrid {
        self.xi.grid
    }

    pub fn m(&self) -> usize {
        self.path.spec.m
    }

    pub fn path(&self) -> &NoisePath {
        &self.path
    }

    fn increment(&self, k: isize, c: usize) -> f64 {
        let n = self.grid().cells() as isize;
        if k < 0 || k >= n {
            return 0.0;
        }
        let w = &self.path.w;
        w.at(k as usize + 1)[c] - w.at(k as usize)[c]
    }

    /// `xi_eps(t)` for every component.
    pub fn xi_at(&self, t: f64, out: &mut [f64]) {
        let g = self.grid();
        let h = g.h();
        let eps = self.eps;
        let lo = libm::floor((t - eps) / h) as isize - 1;
        let hi = libm::floor(t / h) as isize;
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in lo.max(0)..=hi {
            let tk = k as f64 * h;
            let weight = (self.mollifier.cdf((t - tk) / eps) - self.mollifier.cdf((t - tk - h) / eps)) / h;
            if weight == 0.0 {
                continue;
            }
            for (c, o) in out.iter_mut().enumerate() {
                *o += weight * self.increment(k, c);
            }
        }
    }

    /// `W_eps(t) = (rho_eps * W)(t)` for every component.
    pub fn w_eps_at(&self, t: f64, out: &mut [f64]) {
        let g = self.grid();
        let h = g.h();
        let eps = self.eps;
        let lo = (libm::floor((t - eps) / h) as isize - 1).max(0);
        let hi = libm::floor(t / h) as isize;
        // Cells ending before t - eps are fully weighted.
        let base = (lo as usize).min(g.cells());
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.path.w.at(base)[c];
        }
        for k in lo..=hi {
            let tk = k as f64 * h;
            let a = (t - tk) / eps;
            let b = (t - tk - h) / eps;
            let weight = eps / h * (self.mollifier.cdf_integral(a) - self.mollifier.cdf_integral(b));
            for (c, o) in out.iter_mut().enumerate() {
                *o += weight * self.increment(k, c);
            }
        }
    }

    /// `W_eps` sampled on the grid.
    pub fn w_eps(&self) -> GridFunction {
        let g = self.grid();
        let m = self.m();
        let mut out = GridFunction::zeros(g, &[m]).with_causal(true);
        let mut buf = vec![0.0; m];
        for i in 0..g.len() {
            self.w_eps_at(g.t(i), &mut buf);
            out.at_mut(i).copy_from_slice(&buf);
        }
        out
    }

    /// The same noise with `xi_eps` scaled by `a`.
    pub fn scaled(&self, a: f64) -> Mollified {
        let mut out = self.clone();
        out.path = self.path.scaled(a);
        out.xi.scale(a);
        out
    }
}

/// `xi_eps = rho_eps' * W` on the grid; needs `eps >= 4h`.
pub fn mollify(path: &NoisePath, eps: f64) -> Result<Mollified> {
    mollify_with(&Mollifier::new(), path, eps)
}

/// As [`mollify`], reusing the mollifier tables.
pub fn mollify_with(mollifier: &Mollifier, path: &NoisePath, eps: f64) -> Result<Mollified> {
    let g = path.w.grid;
    let h = g.h();
    if !(eps >= 4.0 * h * (1.0 - 1e-12)) || eps > 1.0 {
        return Err(err!(Resolution, "mollification scale {eps} must lie in [4h, 1] with h = {h}"));
    }
    let mollifier = mollifier.clone();
    let m = path.spec.m;
    // xi(t_i) = sum_j D_j dW_{i-j} / h with D_j = R(j h / eps) - R((j - 1) h / eps).
    let span = libm::ceil(eps / h) as usize + 1;
    let d: Vec<f64> =
        (1..=span).map(|j| mollifier.cdf(j as f64 * h / eps) - mollifier.cdf((j - 1) as f64 * h / eps)).collect();
    let mut xi = GridFunction::zeros(g, &[m]).with_causal(true);
    for c in 0..m {
        let w = path.w.component(c);
        let dw: Vec<f64> = w.windows(2).map(|p| (p[1] - p[0]) / h).collect();
        let mut series = vec![0.0; g.len()];
        for (i, s) in series.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (jm1, dj) in d.iter().enumerate() {
                let j = jm1 + 1;
                if j > i {
                    break;
                }
                acc += dj * dw[i - j];
            }
            *s = acc;
        }
        xi.set_component(c, &series);
    }
    Ok(Mollified { eps, xi, path: path.clone(), mollifier })
}

/// Symmetric map of `[0, 1]` onto itself, flat at both ends; smooths power
/// singularities at the end points of an integration range.
fn graded(y: f64) -> (f64, f64) {
    let x = y * y * y * (10.0 - 15.0 * y + 6.0 * y * y);
    let dx = 30.0 * y * y * (1.0 - y) * (1.0 - y);
    (x, dx)
}

/// Integral of `f` over `[a, b]` split at `kinks`, graded at every piece end.
pub fn kinked_integral<F: FnMut(f64) -> f64>(gl: &GaussLegendre, a: f64, b: f64, kinks: &[f64], mut f: F) -> f64 {
    let mut cuts: Vec<f64> = vec![a];
    cuts.extend(kinks.iter().copied().filter(|&k| k > a && k < b));
    cuts.push(b);
    cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi <= lo {
            continue;
        }
        total += gl.integrate(0.0, 1.0, |y| {
            let (x, dx) = graded(y);
            f(lo + (hi - lo) * x) * dx * (hi - lo)
        });
    }
    total
}

/// `Cov_eps(t, s) = int int rho_eps'(t - a) rho_eps'(s - b) Cov_W(a, b) da db`.
pub fn cov_eps(t: f64, s: f64, eps: f64, spec: &NoiseSpec) -> f64 {
    let mol = Mollifier::new();
    cov_eps_with(&mol, t, s, eps, spec.hurst, spec.c_h)
}

/// As [`cov_eps`], reusing the mollifier tables.
pub fn cov_eps_with(mol: &Mollifier, t: f64, s: f64, eps: f64, hurst: f64, c_h: f64) -> f64 {
    if t <= 0.0 || s <= 0.0 {
        return 0.0;
    }
    if t >= eps && s >= eps {
        return cov_eps_interior(mol, (t - s) / eps, eps, hurst, c_h);
    }
    let gl = GaussLegendre::new(48);
    // Substitute a = t - eps u, b = s - eps v with u, v in [0, 1].
    let d = (t - s) / eps;
    let outer = |u: f64| {
        let a = t - eps * u;
        let inner = |v: f64| {
            let b = s - eps * v;
            mol.rho_deriv(v) * cov_raw(a, b, hurst, c_h)
        };
        // Kinks where a = b (v = u - d) and where b = 0 (v = s / eps).
        mol.rho_deriv(u) * kinked_integral(&gl, 0.0, 1.0, &[u - d, s / eps], inner)
    };
    kinked_integral(&gl, 0.0, 1.0, &[t / eps, d, 1.0 + d], outer) / (eps * eps)
}

/// Away from the origin only the increment term survives:
/// `-C eps^(2H-2) int g(w) |d - w|^2H dw` with `g = rho' autocorrelated`.
fn cov_eps_interior(mol: &Mollifier, d: f64, eps: f64, hurst: f64, c_h: f64) -> f64 {
    let gl = GaussLegendre::new(32);
    let p = 2.0 * hurst;
    let g = |w: f64| {
        let w = w.abs();
        gl.integrate(w, 1.0, |u| mol.rho_deriv(u) * mol.rho_deriv(u - w))
    };
    let outer_gl = GaussLegendre::new(40);
    let body = kinked_integral(&outer_gl, -1.0, 1.0, &[d, 0.0], |w| g(w) * libm::pow((d - w).abs(), p));
    -c_h * libm::pow(eps, p - 2.0) * body
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mollifier_tables() {
        let m = Mollifier::new();
        assert!((m.cdf(1.0) - 1.0).abs() < 1e-15);
        assert!((m.cdf(0.5) - 0.5).abs() < 1e-12);
        let gl = GaussLegendre::new(20);
        let direct = gl.composite(0.0, 0.3, 8, |x| m.cdf(x));
        assert!((direct - m.cdf_integral(0.3)).abs() < 1e-10);
    }

    #[test]
    fn graded_map_is_a_bijection() {
        let (x0, _) = graded(0.0);
        let (x1, _) = graded(1.0);
        assert!(x0.abs() < 1e-15 && (x1 - 1.0).abs() < 1e-15);
        let gl = GaussLegendre::new(16);
        let v = gl.integrate(0.0, 1.0, |y| graded(y).1);
        assert!((v - 1.0).abs() < 1e-12);
    }
}
