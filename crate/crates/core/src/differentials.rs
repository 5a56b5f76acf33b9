//! Vector fields `V: R^n -> L(R^m, R^n)` and their elementary differentials.
//!
//! Tensors are row-major. `V(x)` has shape `[n][m]`, the k-th derivative
//! `[n][m][n]^k`. An elementary differential of a tree with `s` nodes has
//! shape `[n][m]^s`, one noise slot per node in canonical preorder.

use crate::err;
use crate::error::Result;
use crate::trees::Tree;
use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A vector field with derivatives up to order three.
///
/// Implementations must be pure. Derivative methods that are not overridden
/// report a capability error; wrap the field in [`FiniteDifference`] to get
/// numerical ones.
pub trait VectorField {
    fn n(&self) -> usize;
    fn m(&self) -> usize;
    /// `V(x)`, length `n * m`.
    fn eval(&self, x: &[f64], out: &mut [f64]);
    /// `dV(x)`, length `n * m * n`.
    fn d1(&self, _x: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(err!(Capability, "vector field has no first derivative"))
    }
    /// `d^2 V(x)`, length `n * m * n^2`.
    fn d2(&self, _x: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(err!(Capability, "vector field has no second derivative"))
    }
    /// `d^3 V(x)`, length `n * m * n^3`.
    fn d3(&self, _x: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(err!(Capability, "vector field has no third derivative"))
    }
    /// Radius of the ball around 0 where the field may be evaluated.
    fn domain_radius(&self) -> f64 {
        f64::INFINITY
    }
    /// Polynomial degree, if the field is a polynomial.
    fn degree(&self) -> Option<usize> {
        None
    }
    /// Whether derivatives are numerical approximations.
    fn is_approximate(&self) -> bool {
        false
    }
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn n(&self) -> usize {
        (**self).n()
    }
    fn m(&self) -> usize {
        (**self).m()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (**self).eval(x, out)
    }
    fn d1(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).d1(x, out)
    }
    fn d2(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).d2(x, out)
    }
    fn d3(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).d3(x, out)
    }
    fn domain_radius(&self) -> f64 {
        (**self).domain_radius()
    }
    fn degree(&self) -> Option<usize> {
        (**self).degree()
    }
    fn is_approximate(&self) -> bool {
        (**self).is_approximate()
    }
}

impl<T: VectorField + ?Sized> VectorField for Box<T> {
    fn n(&self) -> usize {
        (**self).n()
    }
    fn m(&self) -> usize {
        (**self).m()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (**self).eval(x, out)
    }
    fn d1(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).d1(x, out)
    }
    fn d2(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).d2(x, out)
    }
    fn d3(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).d3(x, out)
    }
    fn domain_radius(&self) -> f64 {
        (**self).domain_radius()
    }
    fn degree(&self) -> Option<usize> {
        (**self).degree()
    }
    fn is_approximate(&self) -> bool {
        (**self).is_approximate()
    }
}

/// Length of the `k`-th derivative tensor.
pub fn derivative_len<F: VectorField + ?Sized>(field: &F, k: usize) -> usize {
    field.n() * field.m() * field.n().pow(k as u32)
}

/// The `k`-th derivative, `k <= 3`, into `out`.
pub fn derivative<F: VectorField + ?Sized>(field: &F, k: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
    match k {
        0 => {
            field.eval(x, out);
            Ok(())
        }
        1 => field.d1(x, out),
        2 => field.d2(x, out),
        3 => field.d3(x, out),
        _ => Err(err!(Capability, "derivatives above order 3 are not available")),
    }
}

/// Errors unless `|x| <= domain_radius`.
pub fn check_domain<F: VectorField + ?Sized>(field: &F, x: &[f64]) -> Result<()> {
    let r = libm::sqrt(x.iter().map(|v| v * v).sum::<f64>());
    if !(r <= field.domain_radius()) {
        return Err(err!(Domain, "state of norm {r} outside the field's domain radius {}", field.domain_radius()));
    }
    Ok(())
}

/// Value of an elementary differential.
#[derive(Debug, Clone, PartialEq)]
pub struct ElemDiffValue {
    pub n: usize,
    pub m: usize,
    pub slots: usize,
    pub values: Vec<f64>,
}

impl ElemDiffValue {
    /// Contracts every noise slot `j` with `etas[j * m..(j + 1) * m]`.
    pub fn contract(&self, etas: &[f64]) -> Vec<f64> {
        let mut cur = self.values.clone();
        for j in (0..self.slots).rev() {
            let eta = &etas[j * self.m..(j + 1) * self.m];
            cur = cur.chunks(self.m).map(|c| c.iter().zip(eta).map(|(a, b)| a * b).sum()).collect();
        }
        cur
    }
}

/// `Upsilon^tau` at per-node states `x_nodes` (node-major, `n` values per node).
pub fn upsilon<F: VectorField + ?Sized>(tree: &Tree, field: &F, x_nodes: &[f64]) -> Result<ElemDiffValue> {
    evaluate(tree, field, x_nodes, None)
}

/// Derivative of `Upsilon^tau` in the state of `node`, applied to `direction`.
pub fn upsilon_directional<F: VectorField + ?Sized>(
    tree: &Tree,
    field: &F,
    x_nodes: &[f64],
    node: usize,
    direction: &[f64],
) -> Result<ElemDiffValue> {
    if node >= tree.size() {
        return Err(err!(Domain, "node {node} out of range for a tree of size {}", tree.size()));
    }
    if direction.len() != field.n() {
        return Err(err!(Domain, "direction of length {} for state dimension {}", direction.len(), field.n()));
    }
    evaluate(tree, field, x_nodes, Some((node, direction)))
}

fn evaluate<F: VectorField + ?Sized>(
    tree: &Tree,
    field: &F,
    x_nodes: &[f64],
    target: Option<(usize, &[f64])>,
) -> Result<ElemDiffValue> {
    let n = field.n();
    let size = tree.size();
    if x_nodes.len() != size * n {
        return Err(err!(Domain, "expected {} node states of dimension {n}, got {} values", size, x_nodes.len()));
    }
    for v in 0..size {
        check_domain(field, &x_nodes[v * n..(v + 1) * n])?;
    }
    let children = tree.children();
    let mut sizes = vec![1usize; size];
    for v in (0..size).rev() {
        for &c in &children[v] {
            sizes[v] += sizes[c];
        }
    }
    let values = node_tensor(&children, &sizes, 0, field, x_nodes, target)?;
    Ok(ElemDiffValue { n, m: field.m(), slots: size, values })
}

fn node_tensor<F: VectorField + ?Sized>(
    children: &[Vec<usize>],
    sizes: &[usize],
    v: usize,
    field: &F,
    x_nodes: &[f64],
    target: Option<(usize, &[f64])>,
) -> Result<Vec<f64>> {
    let n = field.n();
    let m = field.m();
    let k = children[v].len();
    let x = &x_nodes[v * n..(v + 1) * n];
    // Only the subtree containing the target node is differentiated.
    let inside = |c: usize| target.is_some_and(|(t, _)| t >= c && t < c + sizes[c]);
    let mut subs = Vec::with_capacity(k);
    for &c in &children[v] {
        let t = if inside(c) { target } else { None };
        subs.push(node_tensor(children, sizes, c, field, x_nodes, t)?);
    }
    let inner = n * m * n.pow(k as u32);
    let mut t = vec![0.0; inner];
    match target {
        Some((node, dir)) if node == v => {
            let mut full = vec![0.0; inner * n];
            derivative(field, k + 1, x, &mut full)?;
            for (o, chunk) in t.iter_mut().zip(full.chunks(n)) {
                *o = chunk.iter().zip(dir).map(|(a, b)| a * b).sum();
            }
        }
        Some((node, _)) if !(node >= v && node < v + sizes[v]) => return Ok(vec![0.0; n * m.pow(sizes[v] as u32)]),
        _ => derivative(field, k, x, &mut t)?,
    }
    // Contract the derivative slots one child at a time. Layout before step i:
    // [n m][n]^(k - i)[accumulated noise slots].
    let mut acc = 1usize;
    let mut rem = n.pow(k as u32);
    for (i, y) in subs.iter().enumerate() {
        let z = m.pow(sizes[children[v][i]] as u32);
        rem /= n;
        let mut next = vec![0.0; n * m * rem * acc * z];
        for p in 0..n * m {
            for b in 0..n {
                let yb = &y[b * z..(b + 1) * z];
                for r in 0..rem {
                    for s in 0..acc {
                        let a = t[((p * n + b) * rem + r) * acc + s];
                        if a == 0.0 {
                            continue;
                        }
                        let base = ((p * rem + r) * acc + s) * z;
                        for (o, yv) in next[base..base + z].iter_mut().zip(yb) {
                            *o += a * yv;
                        }
                    }
                }
            }
        }
        t = next;
        acc *= z;
    }
    Ok(t)
}

/// Central finite differences of a field's `eval`, fourth order in the step.
#[derive(Debug, Clone)]
pub struct FiniteDifference<F> {
    pub inner: F,
    pub step: f64,
}

impl<F: VectorField> FiniteDifference<F> {
    pub fn new(inner: F) -> Self {
        FiniteDifference { inner, step: 1e-3 }
    }

    // Applies the 4-point stencil in each of `dirs` directions.
    fn stencil(&self, x: &[f64], dirs: &[usize], out: &mut [f64]) {
        const OFF: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];
        const W: [f64; 4] = [1.0, -8.0, 8.0, -1.0];
        let nm = out.len();
        let h = self.step;
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut buf = vec![0.0; nm];
        let mut xs = x.to_vec();
        let k = dirs.len();
        for combo in 0..4usize.pow(k as u32) {
            xs.copy_from_slice(x);
            let mut w = 1.0;
            let mut c = combo;
            for &d in dirs {
                let j = c % 4;
                c /= 4;
                xs[d] += OFF[j] * h;
                w *= W[j] / (12.0 * h);
            }
            self.inner.eval(&xs, &mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += w * b;
            }
        }
    }

    fn numeric(&self, k: usize, x: &[f64], out: &mut [f64]) {
        let n = self.inner.n();
        let nm = n * self.inner.m();
        let mut vals = vec![0.0; nm];
        let mut dirs = vec![0usize; k];
        for idx in 0..n.pow(k as u32) {
            let mut c = idx;
            for d in dirs.iter_mut().rev() {
                *d = c % n;
                c /= n;
            }
            self.stencil(x, &dirs, &mut vals);
            let stride = n.pow(k as u32);
            for (p, v) in vals.iter().enumerate() {
                out[p * stride + idx] = *v;
            }
        }
    }
}

impl<F: VectorField> VectorField for FiniteDifference<F> {
    fn n(&self) -> usize {
        self.inner.n()
    }
    fn m(&self) -> usize {
        self.inner.m()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        self.inner.eval(x, out)
    }
    fn d1(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.numeric(1, x, out);
        Ok(())
    }
    fn d2(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.numeric(2, x, out);
        Ok(())
    }
    fn d3(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.numeric(3, x, out);
        Ok(())
    }
    fn domain_radius(&self) -> f64 {
        self.inner.domain_radius()
    }
    fn is_approximate(&self) -> bool {
        true
    }
}

/// `V(x) = C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constant {
    pub n: usize,
    pub m: usize,
    pub value: Vec<f64>,
}

impl Constant {
    pub fn new(n: usize, m: usize, value: Vec<f64>) -> Result<Self> {
        if value.len() != n * m {
            return Err(err!(Domain, "constant field needs {} values, got {}", n * m, value.len()));
        }
        Ok(Constant { n, m, value })
    }
}

impl VectorField for Constant {
    fn n(&self) -> usize {
        self.n
    }
    fn m(&self) -> usize {
        self.m
    }
    fn eval(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.value);
    }
    fn d1(&self, _x: &[f64], out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }
    fn d2(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.d1(x, out)
    }
    fn d3(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.d1(x, out)
    }
    fn degree(&self) -> Option<usize> {
        Some(0)
    }
}

/// `V(x) = B + A x` with `A` of shape `[n][m][n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub n: usize,
    pub m: usize,
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
}

impl Linear {
    pub fn new(n: usize, m: usize, matrix: Vec<f64>, offset: Vec<f64>) -> Result<Self> {
        if matrix.len() != n * m * n || offset.len() != n * m {
            return Err(err!(Domain, "linear field shapes do not match n = {n}, m = {m}"));
        }
        Ok(Linear { n, m, matrix, offset })
    }
}

impl VectorField for Linear {
    fn n(&self) -> usize {
        self.n
    }
    fn m(&self) -> usize {
        self.m
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        for (p, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[p * self.n..(p + 1) * self.n];
            *o = self.offset[p] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    fn d1(&self, _x: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.matrix);
        Ok(())
    }
    fn d2(&self, _x: &[f64], out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }
    fn d3(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.d2(x, out)
    }
    fn degree(&self) -> Option<usize> {
        Some(1)
    }
}

/// Bounded field `V_p(x) = offset_p + amp_p sin(freq_p . x + phase_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trig {
    pub n: usize,
    pub m: usize,
    pub offset: Vec<f64>,
    pub amp: Vec<f64>,
    pub freq: Vec<f64>,
    pub phase: Vec<f64>,
}

impl Trig {
    pub fn new(n: usize, m: usize, offset: Vec<f64>, amp: Vec<f64>, freq: Vec<f64>, phase: Vec<f64>) -> Result<Self> {
        let nm = n * m;
        if offset.len() != nm || amp.len() != nm || phase.len() != nm || freq.len() != nm * n {
            return Err(err!(Domain, "trigonometric field shapes do not match n = {n}, m = {m}"));
        }
        Ok(Trig { n, m, offset, amp, freq, phase })
    }

    fn angle(&self, p: usize, x: &[f64]) -> f64 {
        let f = &self.freq[p * self.n..(p + 1) * self.n];
        self.phase[p] + f.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    fn fill(&self, k: usize, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        let stride = n.pow(k as u32);
        for p in 0..n * self.m {
            let th = self.angle(p, x);
            // k-th derivative of sin is sin shifted by k quarter turns.
            let s = match k % 4 {
                0 => libm::sin(th),
                1 => libm::cos(th),
                2 => -libm::sin(th),
                _ => -libm::cos(th),
            };
            let f = &self.freq[p * n..(p + 1) * n];
            for idx in 0..stride {
                let mut c = idx;
                let mut w = self.amp[p] * s;
                for _ in 0..k {
                    w *= f[c % n];
                    c /= n;
                }
                out[p * stride + idx] = w;
            }
        }
    }
}

impl VectorField for Trig {
    fn n(&self) -> usize {
        self.n
    }
    fn m(&self) -> usize {
        self.m
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        for (p, o) in out.iter_mut().enumerate() {
            *o = self.offset[p] + self.amp[p] * libm::sin(self.angle(p, x));
        }
    }
    fn d1(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.fill(1, x, out);
        Ok(())
    }
    fn d2(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.fill(2, x, out);
        Ok(())
    }
    fn d3(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.fill(3, x, out);
        Ok(())
    }
}

/// Polynomial field of degree at most 3 with symmetric coefficient tensors
/// `c_k` of shape `[n][m][n]^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    pub n: usize,
    pub m: usize,
    pub coeffs: [Vec<f64>; 4],
}

impl Polynomial {
    /// Builds the field, symmetrizing each coefficient tensor in its state slots.
    /// Missing orders are zero.
    pub fn new(n: usize, m: usize, coeffs: &[Vec<f64>]) -> Result<Self> {
        if coeffs.len() > 4 {
            return Err(err!(Capability, "polynomial fields are limited to degree 3"));
        }
        let mut out: [Vec<f64>; 4] = Default::default();
        for k in 0..4 {
            let len = n * m * n.pow(k as u32);
            out[k] = match coeffs.get(k) {
                Some(c) if c.len() == len => symmetrize(c, n * m, n, k),
                Some(c) => return Err(err!(Domain, "order-{k} coefficients need {len} values, got {}", c.len())),
                None => vec![0.0; len],
            };
        }
        Ok(Polynomial { n, m, coeffs: out })
    }

    /// Random coefficients uniform in `[-scale, scale]`, reproducible per seed.
    pub fn random(n: usize, m: usize, degree: usize, scale: f64, seed: u64) -> Result<Self> {
        if degree > 3 {
            return Err(err!(Capability, "polynomial fields are limited to degree 3"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs: Vec<Vec<f64>> = (0..=degree)
            .map(|k| {
                (0..n * m * n.pow(k as u32))
                    .map(|_| {
                        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                        scale * (2.0 * u - 1.0)
                    })
                    .collect()
            })
            .collect();
        Polynomial::new(n, m, &coeffs)
    }

    // d^j V(x) = sum_{k >= j} k! / (k - j)! c_k[x, ..., x, ., ...] with x in the leading slots.
    fn fill(&self, j: usize, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        let nm = n * self.m;
        let stride = n.pow(j as u32);
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in j..4 {
            let c = &self.coeffs[k];
            let free = k - j;
            let inner = n.pow(k as u32);
            let factor = (k - j + 1..=k).map(|i| i as f64).product::<f64>();
            for p in 0..nm {
                for idx in 0..inner {
                    let v = c[p * inner + idx];
                    if v == 0.0 {
                        continue;
                    }
                    // Leading `free` slots contract with x; the rest stay open.
                    let mut w = factor * v;
                    let mut rest = idx;
                    let tail = rest % stride;
                    rest /= stride;
                    for _ in 0..free {
                        w *= x[rest % n];
                        rest /= n;
                    }
                    out[p * stride + tail] += w;
                }
            }
        }
    }
}

fn symmetrize(c: &[f64], outer: usize, n: usize, k: usize) -> Vec<f64> {
    if k < 2 {
        return c.to_vec();
    }
    let inner = n.pow(k as u32);
    let perms: Vec<Vec<usize>> = if k == 2 {
        vec![vec![0, 1], vec![1, 0]]
    } else {
        vec![vec![0, 1, 2], vec![0, 2, 1], vec![1, 0, 2], vec![1, 2, 0], vec![2, 0, 1], vec![2, 1, 0]]
    };
    let mut out = vec![0.0; c.len()];
    let mut digits = vec![0usize; k];
    for p in 0..outer {
        for idx in 0..inner {
            let mut r = idx;
            for d in digits.iter_mut().rev() {
                *d = r % n;
                r /= n;
            }
            let mut s = 0.0;
            for perm in &perms {
                let j = perm.iter().fold(0, |acc, &q| acc * n + digits[q]);
                s += c[p * inner + j];
            }
            out[p * inner + idx] = s / perms.len() as f64;
        }
    }
    out
}

impl VectorField for Polynomial {
    fn n(&self) -> usize {
        self.n
    }
    fn m(&self) -> usize {
        self.m
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        self.fill(0, x, out);
    }
    fn d1(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.fill(1, x, out);
        Ok(())
    }
    fn d2(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.fill(2, x, out);
        Ok(())
    }
    fn d3(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.fill(3, x, out);
        Ok(())
    }
    fn degree(&self) -> Option<usize> {
        (0..4).rev().find(|&k| self.coeffs[k].iter().any(|v| *v != 0.0)).or(Some(0))
    }
}
