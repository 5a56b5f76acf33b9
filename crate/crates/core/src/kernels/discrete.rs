//! Causal kernels on the grid: `(K f)_i = sum_j w_j f_{i-j}`.
//!
//! Values of `f` before the first grid point are taken equal to `f_0`, so a
//! causal `f` is extended by zero and a constant stays constant.

use crate::quad::GaussLegendre;
use alloc::vec;
use alloc::vec::Vec;

/// How the sampled function is interpolated between grid points when a
/// continuous kernel is turned into weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    /// Piecewise linear; weights of a positive kernel stay positive.
    Linear,
    /// Local degree-5 Lagrange interpolation on six causal points.
    Quintic,
}

impl Interp {
    fn points(self) -> usize {
        match self {
            Interp::Linear => 2,
            Interp::Quintic => 6,
        }
    }
}

/// Weights of a causal convolution, with the mass beyond the last lag kept
/// separately (it only ever meets `f_0`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CausalKernel {
    pub weights: Vec<f64>,
    pub tail: f64,
}

impl CausalKernel {
    /// The identity.
    pub fn delta() -> Self {
        CausalKernel { weights: vec![1.0], tail: 0.0 }
    }

    pub fn from_weights(weights: Vec<f64>) -> Self {
        CausalKernel { weights, tail: 0.0 }
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum::<f64>() + self.tail
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &CausalKernel) {
        if self.weights.len() < other.weights.len() {
            self.weights.resize(other.weights.len(), 0.0);
        }
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            *w += c * o;
        }
        self.tail += c * other.tail;
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.weights.iter_mut().for_each(|w| *w *= c);
        self.tail *= c;
        self
    }

    /// Convolution of a scalar series.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; f.len()];
        self.apply_into(f, &mut out);
        out
    }

    pub fn apply_into(&self, f: &[f64], out: &mut [f64]) {
        let n = f.len();
        if n == 0 {
            return;
        }
        let w = &self.weights;
        // suffix[k] = sum_{j >= k} w_j + tail
        let mut suffix = vec![self.tail; w.len() + 1];
        for k in (0..w.len()).rev() {
            suffix[k] = suffix[k + 1] + w[k];
        }
        let f0 = f[0];
        for i in 0..n {
            let mut s = 0.0;
            for (j, wj) in w.iter().enumerate().take(i + 1) {
                s += wj * f[i - j];
            }
            out[i] = s + f0 * suffix[(i + 1).min(w.len())];
        }
    }

    /// Convolution of a causal series (`f_j = 0` for `j < 0`), ignoring `f_0`.
    pub fn apply_causal(&self, f: &[f64]) -> Vec<f64> {
        let n = f.len();
        let mut out = vec![0.0; n];
        let w = &self.weights;
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for (j, wj) in w.iter().enumerate().take(i + 1) {
                s += wj * f[i - j];
            }
            *o = s;
        }
        out
    }

    /// Approximate `L^1` norm of the continuous kernel, `sum |w_j|`.
    pub fn l1(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum::<f64>() + self.tail.abs()
    }
}

/// Turns a continuous kernel `k` supported in `[lo, hi]` into causal weights
/// on a grid of step `h`, integrating `k` exactly against the interpolant of
/// the sampled function. `breaks` lists points where `k` is not smooth.
/// Lags beyond `max_lag` are folded into the tail.
pub fn discretize<F: Fn(f64) -> f64>(
    k: F,
    lo: f64,
    hi: f64,
    breaks: &[f64],
    h: f64,
    max_lag: usize,
    interp: Interp,
) -> CausalKernel {
    let gl = GaussLegendre::new(8);
    let lo = lo.max(0.0);
    if hi <= lo {
        return CausalKernel::default();
    }
    let first = libm::floor(lo / h) as usize;
    let last = (libm::ceil(hi / h) as usize).max(first + 1);
    let p = interp.points();
    let mut weights = vec![0.0; (last + p).min(max_lag + 1)];
    let mut tail = 0.0;
    let mut cuts: Vec<f64> = Vec::new();
    for c in first..last {
        let a = (c as f64 * h).max(lo);
        let b = ((c + 1) as f64 * h).min(hi);
        if b <= a {
            continue;
        }
        cuts.clear();
        cuts.push(a);
        for &x in breaks {
            if x > a && x < b {
                cuts.push(x);
            }
        }
        cuts.push(b);
        cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
        // Stencil of interpolation nodes for this cell, kept causal.
        let start = match interp {
            Interp::Linear => c,
            Interp::Quintic => c.saturating_sub(2),
        };
        let nodes: Vec<f64> = (start..start + p).map(|q| q as f64).collect();
        let denom: Vec<f64> = (0..p)
            .map(|i| (0..p).filter(|&j| j != i).map(|j| nodes[i] - nodes[j]).product())
            .collect();
        let mut local = [0.0f64; 6];
        for seg in cuts.windows(2) {
            gl.for_each(seg[0], seg[1], |x, wq| {
                let kx = k(x) * wq;
                if kx == 0.0 {
                    return;
                }
                let y = x / h;
                for i in 0..p {
                    let mut l = 1.0;
                    for j in 0..p {
                        if j != i {
                            l *= y - nodes[j];
                        }
                    }
                    local[i] += kx * l / denom[i];
                }
            });
        }
        for i in 0..p {
            let lag = start + i;
            if lag <= max_lag {
                weights[lag] += local[i];
            } else {
                tail += local[i];
            }
            local[i] = 0.0;
        }
    }
    while weights.len() > 1 && *weights.last().unwrap() == 0.0 {
        weights.pop();
    }
    CausalKernel { weights, tail }
}
