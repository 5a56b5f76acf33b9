//! Single-path commands: solve, sample, counterterm and the tree tables.

use std::path::Path;

use flowrde_core::kernels::{GridFunction, TimeGrid};
use flowrde_core::noise::{mollify, sample_fbm, Mollified, NoiseSpec};
use flowrde_core::solver::{direct_oracle, relative_gap, solve_remainder, ForceFamily, SolverConfig};
use flowrde_core::trees::{ind_set, truncation_sets};
use flowrde_core::verify::{counterterm, ScalingFit};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::output::{csv_header, grid_table, write_csv, Envelope};

pub fn noise_for(cfg: &RunConfig, seed: u64, eps: f64) -> Result<Mollified> {
    let grid = TimeGrid::new(cfg.grid_level)?;
    let (_, m) = cfg.field.dims();
    let path = sample_fbm(grid, &NoiseSpec::new(cfg.hurst, m, seed)?)?;
    Ok(mollify(&path, eps)?.scaled(cfg.amplitude))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveSummary {
    pub seed: u64,
    pub horizon: f64,
    pub iterations: usize,
    pub halvings: usize,
    pub residual_history: Vec<f64>,
    pub final_norm: f64,
    pub contraction_ratio: Option<f64>,
    /// `|u - oracle|_inf / (1 + |u|_inf)` on the horizon.
    pub oracle_gap: f64,
}

/// Solution, reference solution and summary of one seed.
pub struct SolveOutcome {
    pub u: GridFunction,
    pub oracle: GridFunction,
    pub summary: SolveSummary,
}

pub fn solve_seed(cfg: &RunConfig, seed: u64) -> Result<SolveOutcome> {
    let field = cfg.field.build()?;
    let noise = noise_for(cfg, seed, cfg.eps)?;
    let family = ForceFamily::with_default_resolution(&noise)?;
    let solver: SolverConfig = cfg.solver.into();
    let (_, report) = solve_remainder(&family, &field, &cfg.u0, &solver)?;
    let oracle = direct_oracle(&noise, &field, &cfg.u0, report.horizon, cfg.oracle_fine_factor)?;
    let gap = relative_gap(&report.u, &oracle, report.horizon);
    Ok(SolveOutcome {
        summary: SolveSummary {
            seed,
            horizon: report.horizon,
            iterations: report.iterations,
            halvings: report.halvings,
            residual_history: report.residual_history,
            final_norm: report.final_norm,
            contraction_ratio: report.contraction_ratio,
            oracle_gap: gap,
        },
        u: report.u,
        oracle,
    })
}

/// Runs the first seed and writes `u.csv`, `oracle.csv` and `report.json` into `out`.
pub fn cmd_solve(cfg: &RunConfig, out: &Path) -> Result<SolveSummary> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let outcome = solve_seed(cfg, cfg.seeds[0])?;
    let header = csv_header("solve", cfg)?;
    let (cols, rows) = grid_table(&outcome.u, "u");
    write_csv(&out.join("u.csv"), &header, &cols, rows)?;
    let (cols, rows) = grid_table(&outcome.oracle, "u");
    write_csv(&out.join("oracle.csv"), &header, &cols, rows)?;
    Envelope::new("solve", cfg, &outcome.summary)?.write(&out.join("report.json"))?;
    Ok(outcome.summary)
}

/// Writes the path, its mollification and the mollified noise for the first seed.
pub fn cmd_sample(cfg: &RunConfig, out: &Path) -> Result<()> {
    let noise = noise_for(cfg, cfg.seeds[0], cfg.eps)?;
    let w = noise.path().w.clone();
    let we = noise.w_eps();
    let m = w.ncomp();
    let mut cols = vec!["t".to_string()];
    for (name, k) in [("w", m), ("w_eps", m), ("xi_eps", m)] {
        cols.extend((0..k).map(|c| format!("{name}{c}")));
    }
    let rows = (0..w.grid.len()).map(|i| {
        let mut r = vec![w.grid.t(i)];
        r.extend_from_slice(w.at(i));
        r.extend_from_slice(we.at(i));
        r.extend_from_slice(noise.xi.at(i));
        r
    });
    write_csv(out, &csv_header("sample", cfg)?, &cols, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountertermInputs {
    pub hurst: f64,
    pub eps: f64,
    pub s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountertermResult {
    pub values: Vec<f64>,
    pub slope: f64,
    pub r2: f64,
    pub resolved: bool,
    pub note: String,
}

pub fn cmd_counterterm(inputs: &CountertermInputs) -> Result<String> {
    if !(inputs.hurst > 0.25 && inputs.hurst <= 0.5) {
        return Err(CliError::Config(format!("hurst must lie in (0.25, 0.5], got {}", inputs.hurst)));
    }
    let values = counterterm(&inputs.s, inputs.eps, inputs.hurst)?;
    let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let fit = ScalingFit::fit_window(&inputs.s, &abs, 4.0 * inputs.eps, 0.75);
    let result = CountertermResult { values, slope: fit.slope, r2: fit.r2, resolved: fit.resolved, note: fit.note };
    Envelope::new("counterterm", inputs, result)?.to_json()
}

/// Text tables of the truncation set, its grafting closure and the `Ind` sets.
pub fn cmd_trees(hurst: f64) -> Result<String> {
    use std::fmt::Write;
    let (base, closure) = truncation_sets();
    let mut s = String::new();
    let _ = writeln!(s, "truncation set (H = {hurst})");
    let _ = writeln!(s, "{:<10} {:>5} {:>5} {:>9}", "tree", "order", "size", "scaling");
    for t in &base {
        let _ = writeln!(s, "{:<10} {:>5} {:>5} {:>9.3}", t.to_string(), t.order(), t.size(), t.scaling(hurst));
    }
    let _ = writeln!(s, "\ngrafting closure");
    let _ = writeln!(s, "{:<10} {:>5} {:>9}", "tree", "size", "scaling");
    for t in &closure {
        let _ = writeln!(s, "{:<10} {:>5} {:>9.3}", t.to_string(), t.size(), t.scaling(hurst));
    }
    let _ = writeln!(s, "\nInd sets (target <- tau2 grafted onto tau1 at nodes)");
    for t in &closure {
        let entries = ind_set(t)?;
        if entries.is_empty() {
            let _ = writeln!(s, "{t}: empty");
            continue;
        }
        for e in entries {
            let _ = writeln!(s, "{t} <- {} onto {} at {:?}", e.tau2, e.tau1, e.nodes);
        }
    }
    Ok(s)
}
