use crate::err;
use crate::error::Result;
use alloc::vec;
use alloc::vec::Vec;

/// Uniform grid `t_i = i h` on `[0, 1]` with `h = 2^-level`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeGrid {
    level: u32,
}

impl TimeGrid {
    pub fn new(level: u32) -> Result<Self> {
        if level > 20 {
            return Err(err!(Domain, "grid level {level} exceeds 20"));
        }
        Ok(TimeGrid { level })
    }
    pub fn level(&self) -> u32 {
        self.level
    }
    pub fn h(&self) -> f64 {
        libm::ldexp(1.0, -(self.level as i32))
    }
    /// Number of cells, `2^level`.
    pub fn cells(&self) -> usize {
        1usize << self.level
    }
    /// Number of points, `2^level + 1`.
    pub fn len(&self) -> usize {
        self.cells() + 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.h()
    }
    /// Index of the last grid point not after `t`.
    pub fn index_floor(&self, t: f64) -> usize {
        let i = libm::floor(t / self.h() + 1e-9);
        (i.max(0.0) as usize).min(self.cells())
    }
}

/// Samples of a scalar, vector or tensor valued function on a [`TimeGrid`].
///
/// Values are stored point-major: component `c` at point `i` lives at
/// `values[i * ncomp + c]`, with tensor indices flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub grid: TimeGrid,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Marks objects that vanish for `t <= 0`.
    pub causal: bool,
}

impl GridFunction {
    pub fn zeros(grid: TimeGrid, shape: &[usize]) -> Self {
        let ncomp: usize = shape.iter().product();
        GridFunction { grid, shape: shape.to_vec(), values: vec![0.0; grid.len() * ncomp], causal: false }
    }

    pub fn new(grid: TimeGrid, shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let ncomp: usize = shape.iter().product();
        if values.len() != grid.len() * ncomp {
            return Err(err!(Domain, "expected {} values, got {}", grid.len() * ncomp, values.len()));
        }
        Ok(GridFunction { grid, shape: shape.to_vec(), values, causal: false })
    }

    pub fn scalar(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        Self::new(grid, &[], values)
    }

    pub fn from_fn<F: FnMut(f64) -> f64>(grid: TimeGrid, mut f: F) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.t(i))).collect();
        GridFunction { grid, shape: Vec::new(), values, causal: false }
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn ncomp(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn at(&self, i: usize) -> &[f64] {
        let n = self.ncomp();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.ncomp();
        &mut self.values[i * n..(i + 1) * n]
    }

    /// Time series of one flattened component.
    pub fn component(&self, c: usize) -> Vec<f64> {
        let n = self.ncomp();
        self.values.iter().skip(c).step_by(n).copied().collect()
    }

    pub fn set_component(&mut self, c: usize, series: &[f64]) {
        let n = self.ncomp();
        for (i, v) in series.iter().enumerate() {
            self.values[i * n + c] = *v;
        }
    }

    /// Applies `op` to each component series.
    pub fn map_components<F: FnMut(&[f64]) -> Vec<f64>>(&self, mut op: F) -> GridFunction {
        let mut out = self.clone();
        for c in 0..self.ncomp() {
            out.set_component(c, &op(&self.component(c)));
        }
        out
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Sup norm restricted to points with index at most `last`.
    pub fn sup_norm_until(&self, last: usize) -> f64 {
        let n = self.ncomp();
        self.values[..(last + 1).min(self.grid.len()) * n].iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|v| *v *= a);
    }

    pub fn axpy(&mut self, a: f64, other: &GridFunction) {
        for (v, o) in self.values.iter_mut().zip(&other.values) {
            *v += a * o;
        }
    }

    pub fn sub(&self, other: &GridFunction) -> GridFunction {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }
}
