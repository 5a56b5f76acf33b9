//! Run configuration: JSON with an explicit schema version.

use flowrde_core::differentials::{Constant, Linear, Polynomial, Trig, VectorField};
use flowrde_core::solver::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that replaces the configured seeds by a single seed.
pub const SEED_ENV: &str = "FLOWRDE_SEED";

/// A vector field `V: R^n -> R^(n x m)` by name and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant { n: usize, m: usize, value: Vec<f64> },
    Linear { n: usize, m: usize, matrix: Vec<f64>, offset: Vec<f64> },
    /// `offset + amp sin(freq . x + phase)` per entry.
    Trig { n: usize, m: usize, offset: Vec<f64>, amp: Vec<f64>, freq: Vec<f64>, phase: Vec<f64> },
    /// Symmetric coefficient tensors of orders 0 to 3.
    Polynomial { n: usize, m: usize, coeffs: Vec<Vec<f64>> },
}

pub type Field = Box<dyn VectorField + Send + Sync>;

impl FieldSpec {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            FieldSpec::Constant { n, m, .. }
            | FieldSpec::Linear { n, m, .. }
            | FieldSpec::Trig { n, m, .. }
            | FieldSpec::Polynomial { n, m, .. } => (*n, *m),
        }
    }

    pub fn build(&self) -> Result<Field> {
        let f: Field = match self.clone() {
            FieldSpec::Constant { n, m, value } => Box::new(Constant::new(n, m, value)?),
            FieldSpec::Linear { n, m, matrix, offset } => Box::new(Linear::new(n, m, matrix, offset)?),
            FieldSpec::Trig { n, m, offset, amp, freq, phase } => Box::new(Trig::new(n, m, offset, amp, freq, phase)?),
            FieldSpec::Polynomial { n, m, coeffs } => Box::new(Polynomial::new(n, m, &coeffs)?),
        };
        Ok(f)
    }

    /// `V(x) = sin(x) + 2`, scalar.
    pub fn sine_shift() -> Self {
        FieldSpec::Trig { n: 1, m: 1, offset: vec![2.0], amp: vec![1.0], freq: vec![1.0], phase: vec![0.0] }
    }

    /// `V(x) = x`, scalar.
    pub fn identity() -> Self {
        FieldSpec::Linear { n: 1, m: 1, matrix: vec![1.0], offset: vec![0.0] }
    }
}

/// Fixed-point settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    pub t0: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub ball_factor: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let d = SolverConfig::default();
        SolverSettings { t0: d.t0, tol: d.tol, max_iter: d.max_iter, ball_factor: d.ball_factor }
    }
}

impl From<SolverSettings> for SolverConfig {
    fn from(s: SolverSettings) -> Self {
        SolverConfig { t0: s.t0, tol: s.tol, max_iter: s.max_iter, ball_factor: s.ball_factor }
    }
}

fn one() -> f64 {
    1.0
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_fine() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub hurst: f64,
    pub grid_level: u32,
    /// Mollification scale of single runs.
    pub eps: f64,
    /// Decreasing scales for convergence studies.
    #[serde(default)]
    pub eps_ladder: Vec<f64>,
    #[serde(default = "one")]
    pub amplitude: f64,
    pub field: FieldSpec,
    pub u0: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub solver: SolverSettings,
    /// Substeps per grid cell of the reference integrator.
    #[serde(default = "default_fine")]
    pub oracle_fine_factor: usize,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn h(&self) -> f64 {
        (-(self.grid_level as f64)).exp2()
    }

    /// Checks every documented constraint, naming the one that fails.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version must be {SCHEMA_VERSION}, got {}", self.schema_version));
        }
        if !(self.hurst > 0.25 && self.hurst <= 0.5) {
            return bad(format!("hurst must lie in (0.25, 0.5], got {}", self.hurst));
        }
        if !(4..=14).contains(&self.grid_level) {
            return bad(format!("grid_level must lie in [4, 14], got {}", self.grid_level));
        }
        let min_eps = 4.0 * self.h();
        for &e in std::iter::once(&self.eps).chain(&self.eps_ladder) {
            if !(e >= min_eps * (1.0 - 1e-12)) || e > 1.0 {
                return bad(format!("eps must satisfy 4*2^-grid_level = {min_eps} <= eps <= 1, got {e}"));
            }
        }
        if self.eps_ladder.windows(2).any(|w| w[1] >= w[0]) {
            return bad("eps_ladder must be strictly decreasing".into());
        }
        if !self.amplitude.is_finite() {
            return bad("amplitude must be finite".into());
        }
        let (n, _) = self.field.dims();
        if self.u0.len() != n {
            return bad(format!("u0 has {} entries but the field has n = {n}", self.u0.len()));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let s = &self.solver;
        if !(s.t0 > 0.0 && s.t0 <= 1.0) || !(s.tol > 0.0) || s.max_iter == 0 || !(s.ball_factor > 1.0) {
            return bad("solver needs 0 < t0 <= 1, tol > 0, max_iter >= 1, ball_factor > 1".into());
        }
        if self.oracle_fine_factor < 4 {
            return bad(format!("oracle_fine_factor must be at least 4, got {}", self.oracle_fine_factor));
        }
        self.field.build()?;
        Ok(())
    }

    /// Applies the seed override from the environment.
    pub fn resolve(mut self) -> Result<RunConfig> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v.trim().parse::<u64>().map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
            self.seeds = vec![seed];
        }
        self.validate()?;
        Ok(self)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            hurst: 0.4,
            grid_level: 8,
            eps: 1.0 / 16.0,
            eps_ladder: Vec::new(),
            amplitude: 1.0,
            field: FieldSpec::sine_shift(),
            u0: vec![0.0],
            seeds: vec![0],
            solver: SolverSettings::default(),
            oracle_fine_factor: default_fine(),
        }
    }
}
