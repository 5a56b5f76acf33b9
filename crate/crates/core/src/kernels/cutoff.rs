//! The smooth cutoff `chi`, cut-off Green's functions and exponential kernels.

use crate::quad::GaussLegendre;

// chi(1 + u) = 126u^5 - 420u^6 + 540u^7 - 315u^8 + 70u^9 on [0, 1].
const CHI: [f64; 10] = [0.0, 0.0, 0.0, 0.0, 0.0, 126.0, -420.0, 540.0, -315.0, 70.0];

/// `k`-th derivative of the polynomial part of `chi` at `u = x - 1`.
fn poly_deriv(k: usize, u: f64) -> f64 {
    let mut s = 0.0;
    for p in (k..CHI.len()).rev() {
        let mut c = CHI[p];
        for j in 0..k {
            c *= (p - j) as f64;
        }
        s = s * u + c;
    }
    // Horner above accumulates sum c_p u^(p-k) from the top coefficient down.
    s
}

/// Smooth cutoff: 0 on `(-inf, 1]`, 1 on `[2, inf)`, four continuous derivatives.
pub fn chi(x: f64) -> f64 {
    chi_deriv(x, 0)
}

/// `k`-th derivative of [`chi`] (one-sided at the break points 1 and 2).
pub fn chi_deriv(x: f64, k: usize) -> f64 {
    if x <= 1.0 {
        0.0
    } else if x >= 2.0 {
        if k == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        poly_deriv(k, x - 1.0)
    }
}

/// `G_mu(t) = chi(t / mu)`; for `mu = 0` the Heaviside function.
pub fn g_mu(t: f64, mu: f64) -> f64 {
    if mu == 0.0 {
        if t >= 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        chi(t / mu)
    }
}

/// `d/dmu G_mu(t) = -(t / mu^2) chi'(t / mu)`, supported in `[mu, 2 mu]`.
pub fn gdot_mu(t: f64, mu: f64) -> f64 {
    let x = t / mu;
    -(x / mu) * chi_deriv(x, 1)
}

/// `(1 + mu d/dt)^4 Gdot_mu(t)`, supported in `[mu, 2 mu]`.
pub fn r_gdot_mu(t: f64, mu: f64) -> f64 {
    let x = t / mu;
    if x <= 1.0 || x >= 2.0 {
        return 0.0;
    }
    // Gdot_mu(t) = g(t / mu) / mu with g(x) = -x chi'(x).
    const BINOM: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
    let mut s = 0.0;
    for (k, b) in BINOM.iter().enumerate() {
        let gk = -(x * chi_deriv(x, k + 1) + k as f64 * chi_deriv(x, k));
        s += b * gk;
    }
    s / mu
}

/// `a = int_0^inf (1 - chi)`; the total mass of `-Gdot_nu` for every `nu`.
pub fn cutoff_mass() -> f64 {
    1.0 + GaussLegendre::new(8).integrate(1.0, 2.0, |x| 1.0 - chi(x))
}

/// Gamma density `t^(N-1) e^(-t/mu) / ((N-1)! mu^N)` for `t >= 0`.
pub fn k_density(n: usize, mu: f64, t: f64) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    let x = t / mu;
    let mut c = libm::exp(-x) / mu;
    for k in 1..n {
        c *= x / k as f64;
    }
    c
}

/// Mass of the Gamma density beyond `t`.
pub fn k_tail(n: usize, mu: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let x = t / mu;
    let mut term = 1.0;
    let mut s = 1.0;
    for k in 1..n {
        term *= x / k as f64;
        s += term;
    }
    (libm::exp(-x) * s).min(1.0)
}

/// Radius beyond which the dropped mass of `K_{N,mu}` is below `tol`.
pub fn k_truncation_radius(n: usize, mu: f64, tol: f64) -> f64 {
    let mut x = n as f64;
    while k_tail(n, 1.0, x) >= tol {
        x += 0.25;
    }
    x * mu
}

/// `Q_mu(t) = e^(-t/mu) / mu` on `t >= 0`.
pub fn q_density(mu: f64, t: f64) -> f64 {
    k_density(1, mu, t)
}
