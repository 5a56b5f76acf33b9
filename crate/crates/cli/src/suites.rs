//! Verification suites: parameter sets, seed fan-out and pass/fail summaries.

use flowrde_core::kernels::geometric_grid;
use flowrde_core::solver::SolverConfig;
use flowrde_core::verify::{
    cherry_seed, counterterm, counterterm_fit, covariance_base_case, eps_seed, fit_cherry, fit_eps, fit_force_norms,
    fit_parity, force_norm_seed, gradient_suite, holder_run, holder_study, kernel_suite, odd_tree_seed,
    stationary_counterterm, CherryConfig, EpsConfig, ForceStudyConfig, HolderConfig, ScalingFit, MIN_FORCE_SEEDS,
};
use rayon::prelude::*;
use serde::Serialize;

use std::io::Write;
use std::path::Path;

use crate::config::{FieldSpec, RunConfig, SolverSettings};
use crate::error::{CliError, Result};
use crate::output::{csv_header, Envelope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Kernels,
    Forces,
    Covariance,
    Counterterm,
    Holder,
    Eps,
}

/// One pass/fail line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Criterion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// One raw `(scale, value)` point of a named series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Point {
    pub series: String,
    pub scale: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub criteria: Vec<Criterion>,
    pub points: Vec<Point>,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        SuiteReport { suite: suite.into(), criteria: Vec::new(), points: Vec::new() }
    }

    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.criteria.push(Criterion { name: name.into(), passed, detail: detail.into() });
    }

    fn series(&mut self, name: &str, xs: &[f64], ys: &[f64]) {
        for (x, y) in xs.iter().zip(ys) {
            self.points.push(Point { series: name.into(), scale: *x, value: *y });
        }
    }
}

fn fit_detail(f: &ScalingFit, target: f64) -> String {
    let (lo, hi) = f.ci95();
    let mut s = format!("slope {:.3} (95% CI {lo:.3}..{hi:.3}), target {target:.3}, r2 {:.3}", f.slope, f.r2);
    if !f.note.is_empty() {
        s.push_str("; ");
        s.push_str(&f.note);
    }
    s
}

fn dyadic(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).rev().map(|k| (-(k as f64)).exp2()).collect()
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelParams {
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub gradient_configs: usize,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams { trials: 50, seeds: (0..10).collect(), gradient_configs: 100 }
    }
}

/// Kernel inequalities over random smooth inputs, plus derivative checks.
pub fn kernels(p: &KernelParams) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("kernels");
    let runs: Vec<_> = p.seeds.par_iter().map(|&s| kernel_suite(p.trials, s)).collect();
    let names: Vec<String> = runs.first().map(|v| v.iter().map(|c| c.name.clone()).collect()).unwrap_or_default();
    for (k, name) in names.iter().enumerate() {
        let passed: usize = runs.iter().map(|v| v[k].passed).sum();
        let total: usize = runs.iter().map(|v| v[k].total).sum();
        let worst = runs.iter().map(|v| v[k].worst).fold(0.0f64, f64::max);
        r.check(name.clone(), passed == total && total > 0, format!("{passed}/{total} pass, worst {worst:.4}"));
    }
    for c in gradient_suite(p.gradient_configs, 7)? {
        r.check(c.name.clone(), c.ok(), format!("{}/{} pass, worst relative error {:.2e}", c.passed, c.total, c.worst));
    }
    Ok(r)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForceParams {
    pub hursts: Vec<f64>,
    pub level: u32,
    pub seeds: Vec<u64>,
    pub mus: Vec<f64>,
    pub n: usize,
    pub tol: f64,
}

impl Default for ForceParams {
    fn default() -> Self {
        ForceParams { hursts: vec![0.3, 0.4], level: 11, seeds: (0..50).collect(), mus: dyadic(3, 8), n: 2, tol: 0.15 }
    }
}

/// Fitted scaling of every tree's force-coefficient norm.
pub fn forces(p: &ForceParams) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("forces");
    for &hurst in &p.hursts {
        let mut cfg = ForceStudyConfig::new(hurst, p.level, p.seeds.clone());
        cfg.mus = p.mus.clone();
        cfg.n = p.n;
        let source = cfg.noise()?;
        let samples = p.seeds.par_iter().map(|&s| force_norm_seed(&source, &cfg, s)).collect::<std::result::Result<Vec<_>, _>>()?;
        for f in fit_force_norms(&cfg, &samples) {
            let budget = if f.seeds >= MIN_FORCE_SEEDS { String::new() } else { format!(" (below {MIN_FORCE_SEEDS} seeds)") };
            r.check(
                format!("H={hurst} {}: sup-norm slope", f.tree),
                f.agrees(p.tol),
                fit_detail(&f.fit, f.target) + &budget,
            );
            r.check(
                format!("H={hurst} {}: bulk-mean slope", f.tree),
                f.seeds >= MIN_FORCE_SEEDS && f.bulk_fit.agrees(f.target, p.tol),
                fit_detail(&f.bulk_fit, f.target) + &budget,
            );
            r.series(&format!("H={hurst} {} sup", f.tree), &f.fit.abscissae, &f.fit.values);
            r.series(&format!("H={hurst} {} bulk", f.tree), &f.bulk_fit.abscissae, &f.bulk_fit.values);
        }
    }
    Ok(r)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceParams {
    pub hursts: Vec<f64>,
    pub eps: f64,
    pub mus: Vec<f64>,
    pub tol: f64,
}

impl Default for CovarianceParams {
    fn default() -> Self {
        CovarianceParams { hursts: vec![0.3, 0.4, 0.5], eps: (-14f64).exp2(), mus: dyadic(8, 14), tol: 0.1 }
    }
}

/// Deterministic covariance base case.
pub fn covariance(p: &CovarianceParams) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("covariance");
    let studies = p
        .hursts
        .par_iter()
        .map(|&h| covariance_base_case(h, &[p.eps], &p.mus))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    for st in studies {
        let target = -1.0 + 2.0 * st.hurst;
        let (_, fit) = &st.fits[0];
        r.check(format!("H={} covariance slope", st.hurst), fit.agrees(target, p.tol), fit_detail(fit, target));
        r.series(&format!("H={}", st.hurst), &fit.abscissae, &fit.values);
    }
    Ok(r)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountertermParams {
    pub hursts: Vec<f64>,
    pub eps: f64,
    pub s: Vec<f64>,
    pub stability_eps: Vec<f64>,
    pub tol: f64,
    pub cherry_level: u32,
    pub cherry_seeds: Vec<u64>,
    pub parity_level: u32,
    pub parity_seeds: Vec<u64>,
}

impl Default for CountertermParams {
    fn default() -> Self {
        CountertermParams {
            hursts: vec![0.3, 0.35, 0.45],
            eps: (-10f64).exp2(),
            s: (0..7).map(|k| 0.5 * (-(k as f64)).exp2()).collect(),
            stability_eps: dyadic(6, 8),
            tol: 0.2,
            cherry_level: 12,
            cherry_seeds: (0..1000).collect(),
            parity_level: 7,
            parity_seeds: (0..200).collect(),
        }
    }
}

/// Counterterm exponent, its uniformity in eps, the stationary surrogate,
/// and the Monte Carlo cherry expectation and parity checks.
pub fn counterterm_suite(p: &CountertermParams) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("counterterm");
    let fits = p.hursts.par_iter().map(|&h| counterterm_fit(&p.s, p.eps, h)).collect::<std::result::Result<Vec<_>, _>>()?;
    for (&h, fit) in p.hursts.iter().zip(&fits) {
        let target = -1.0 + 2.0 * h;
        r.check(format!("H={h} counterterm slope"), fit.agrees(target, p.tol), fit_detail(fit, target));
        r.series(&format!("H={h} counterterm"), &fit.abscissae, &fit.values);
    }
    for &h in &p.hursts {
        let vals = p
            .stability_eps
            .par_iter()
            .map(|&e| counterterm(&[0.5], e, h).map(|v| v[0]))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let lo = vals.iter().fold(f64::INFINITY, |a, v| a.min(*v));
        let hi = vals.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
        let spread = (hi - lo) / lo.abs();
        r.check(format!("H={h} counterterm stable in eps at s=0.5"), spread <= 0.1, format!("values {vals:.5?}, relative spread {spread:.4}"));
    }
    let surrogate = [0.5, 0.1, 0.01].iter().map(|&e| stationary_counterterm(e).abs()).fold(0.0f64, f64::max);
    r.check("stationary surrogate vanishes", surrogate <= 1e-6, format!("max |value| {surrogate:.2e}"));

    if !p.cherry_seeds.is_empty() {
        cherry_checks(p, &mut r)?;
    }
    Ok(r)
}

fn cherry_checks(p: &CountertermParams, r: &mut SuiteReport) -> Result<()> {
    let Some(&h) = p.hursts.first() else { return Ok(()) };
    let ccfg = CherryConfig {
        hurst: h,
        level: p.cherry_level,
        eps: 4.0 * (-(p.cherry_level as f64)).exp2(),
        seeds: p.cherry_seeds.clone(),
        bins: 6,
    };
    let source = ccfg.noise()?;
    let per_seed = ccfg.seeds.par_iter().map(|&s| cherry_seed(&source, &ccfg, s)).collect::<std::result::Result<Vec<_>, _>>()?;
    let ce = fit_cherry(&ccfg, &per_seed);
    let target = -1.0 + 2.0 * h;
    let mut detail = fit_detail(&ce.fit, target);
    if ce.inconclusive {
        detail.push_str("; some bins within two standard errors of zero");
    }
    r.check(format!("H={h} cherry expectation slope"), !ce.inconclusive && ce.fit.agrees(target, 0.25), detail);
    r.series("cherry expectation", &ce.times, &ce.mean);

    let pcfg = CherryConfig {
        hurst: h,
        level: p.parity_level,
        eps: 4.0 * (-(p.parity_level as f64)).exp2(),
        seeds: p.parity_seeds.clone(),
        bins: 1,
    };
    let source = pcfg.noise()?;
    let odd = pcfg.seeds.par_iter().map(|&s| odd_tree_seed(&source, s, 0.25)).collect::<std::result::Result<Vec<_>, _>>()?;
    for pr in fit_parity(&odd) {
        r.check(
            format!("{} mean vanishes", pr.tree),
            pr.consistent(),
            format!("mean {:.3e}, standard error {:.3e}", pr.mean, pr.stderr),
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------

/// Shared settings of the suites that solve the equation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveParams {
    pub hurst: f64,
    pub field: FieldSpec,
    pub u0: Vec<f64>,
    pub amplitude: f64,
    pub seeds: Vec<u64>,
    pub solver: SolverSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HolderParams {
    pub base: SolveParams,
    pub coarse_level: u32,
    pub fine_level: u32,
    pub eps_cells: f64,
    pub eta: f64,
}

impl Default for HolderParams {
    fn default() -> Self {
        HolderParams {
            base: SolveParams {
                hurst: 0.4,
                field: FieldSpec::sine_shift(),
                u0: vec![0.0],
                amplitude: 0.5,
                seeds: (0..20).collect(),
                solver: SolverSettings { tol: 1e-7, ..SolverSettings::default() },
            },
            coarse_level: 7,
            fine_level: 9,
            eps_cells: 8.0,
            eta: 0.05,
        }
    }
}

/// Hölder estimator of solutions under grid refinement.
pub fn holder(p: &HolderParams) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("holder");
    let field = p.base.field.build()?;
    let cfg = || HolderConfig {
        hurst: p.base.hurst,
        coarse_level: p.coarse_level,
        fine_level: p.fine_level,
        eps_cells: p.eps_cells,
        amplitude: p.base.amplitude,
        field: field.as_ref(),
        u0: p.base.u0.clone(),
        solver: SolverConfig::from(p.base.solver),
    };
    let runs = p.base.seeds.par_iter().map(|&s| holder_run(&cfg(), s)).collect::<std::result::Result<Vec<_>, _>>()?;
    let rep = holder_study(&runs, p.base.hurst, p.eta)?;
    r.check(
        format!("C^(H-{}) estimator stable under refinement", p.eta),
        rep.stable(),
        format!("max ratio {:.3} over {} paths, max estimate {:.3}", rep.max_ratio, rep.paths.len(), rep.max_estimate),
    );
    r.check(
        "C^(H+0.1) control grows at least 2x",
        rep.sharp(),
        format!("min ratio {:.3} over {} paths", rep.min_control_ratio, rep.paths.len()),
    );
    for (k, path) in rep.paths.iter().enumerate() {
        r.points.push(Point { series: "ratio".into(), scale: k as f64, value: path.ratio() });
        r.points.push(Point { series: "control ratio".into(), scale: k as f64, value: path.control_ratio() });
    }
    Ok(r)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsParams {
    pub base: SolveParams,
    pub level: u32,
    pub ladder: Vec<f64>,
    pub bootstrap: usize,
}

impl Default for EpsParams {
    fn default() -> Self {
        EpsParams {
            base: SolveParams {
                hurst: 0.4,
                field: FieldSpec::identity(),
                u0: vec![1.0],
                amplitude: 0.5,
                seeds: (0..20).collect(),
                solver: SolverSettings { tol: 1e-7, ..SolverSettings::default() },
            },
            level: 9,
            ladder: dyadic(3, 7).into_iter().rev().collect(),
            bootstrap: 2000,
        }
    }
}

/// Cauchy differences of solutions along a coupled eps ladder.
pub fn eps(p: &EpsParams) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("eps");
    let field = p.base.field.build()?;
    let cfg = || EpsConfig {
        hurst: p.base.hurst,
        level: p.level,
        eps_list: p.ladder.clone(),
        amplitude: p.base.amplitude,
        field: field.as_ref(),
        u0: p.base.u0.clone(),
        solver: SolverConfig::from(p.base.solver),
        bootstrap: p.bootstrap,
    };
    let results: Vec<_> = p.base.seeds.par_iter().map(|&s| (s, eps_seed(&cfg(), s))).collect();
    let rep = fit_eps(&cfg(), results, 0x5eed);
    let excluded = if rep.excluded.is_empty() { String::new() } else { format!("; excluded seeds {:?}", rep.excluded) };
    r.check(
        "Cauchy differences shrink with eps",
        rep.converges(),
        format!(
            "slope {:.3}, bootstrap 95% CI {:.3}..{:.3}, r2 {:.3}, {} seeds, {:.0}% monotone{excluded}",
            rep.fit.slope,
            rep.ci.0,
            rep.ci.1,
            rep.fit.r2,
            rep.seeds.len(),
            100.0 * rep.monotone_fraction
        ),
    );
    r.series("mean difference", &rep.eps, &rep.mean);
    Ok(r)
}

/// Scales of the flow grid at the default resolution; exposed for reports.
pub fn flow_scales(level: u32) -> Vec<f64> {
    geometric_grid((-(level as f64)).exp2(), 1.0, flowrde_core::flow::STEPS_PER_OCTAVE)
}

// ---------------------------------------------------------------------------

/// Command-line overrides of the default suite parameters.
#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Number of seeds, counted from 0.
    pub seeds: Option<usize>,
    /// A single seed, overriding `seeds`.
    pub seed: Option<u64>,
    pub hurst: Option<f64>,
    pub level: Option<u32>,
    /// Field, initial value, amplitude and solver of the solving suites.
    pub config: Option<RunConfig>,
}

impl SuiteOptions {
    fn seed_list(&self, default: Vec<u64>) -> Vec<u64> {
        match (self.seed, self.seeds) {
            (Some(s), _) => vec![s],
            (None, Some(n)) => (0..n as u64).collect(),
            (None, None) => default,
        }
    }

    fn hursts(&self, default: Vec<f64>) -> Result<Vec<f64>> {
        match self.hurst {
            Some(h) if h > 0.25 && h <= 0.5 => Ok(vec![h]),
            Some(h) => Err(CliError::Config(format!("hurst must lie in (0.25, 0.5], got {h}"))),
            None => Ok(default),
        }
    }

    fn solve_base(&self, mut base: SolveParams) -> Result<SolveParams> {
        if let Some(cfg) = &self.config {
            base = SolveParams {
                hurst: cfg.hurst,
                field: cfg.field.clone(),
                u0: cfg.u0.clone(),
                amplitude: cfg.amplitude,
                seeds: cfg.seeds.clone(),
                solver: cfg.solver,
            };
        }
        if self.hurst.is_some() {
            base.hurst = self.hursts(vec![])?[0];
        }
        base.seeds = self.seed_list(base.seeds);
        Ok(base)
    }
}

/// Runs one suite; returns its resolved parameters and the report.
pub fn run_suite(suite: Suite, opts: &SuiteOptions) -> Result<(serde_json::Value, SuiteReport)> {
    Ok(match suite {
        Suite::Kernels => {
            let d = KernelParams::default();
            let p = KernelParams { seeds: opts.seed_list(d.seeds), ..d };
            (serde_json::to_value(&p)?, kernels(&p)?)
        }
        Suite::Forces => {
            let d = ForceParams::default();
            let p = ForceParams {
                hursts: opts.hursts(d.hursts)?,
                level: opts.level.unwrap_or(d.level),
                seeds: opts.seed_list(d.seeds),
                ..d
            };
            (serde_json::to_value(&p)?, forces(&p)?)
        }
        Suite::Covariance => {
            let d = CovarianceParams::default();
            let p = CovarianceParams { hursts: opts.hursts(d.hursts)?, ..d };
            (serde_json::to_value(&p)?, covariance(&p)?)
        }
        Suite::Counterterm => {
            let d = CountertermParams::default();
            let p = CountertermParams {
                hursts: opts.hursts(d.hursts)?,
                cherry_seeds: opts.seed_list(d.cherry_seeds),
                parity_seeds: opts.seed_list(d.parity_seeds),
                ..d
            };
            (serde_json::to_value(&p)?, counterterm_suite(&p)?)
        }
        Suite::Holder => {
            let d = HolderParams::default();
            let base = opts.solve_base(d.base.clone())?;
            let fine_level = opts.level.unwrap_or(d.fine_level);
            let p = HolderParams { base, fine_level, coarse_level: fine_level.saturating_sub(2), ..d };
            (serde_json::to_value(&p)?, holder(&p)?)
        }
        Suite::Eps => {
            let d = EpsParams::default();
            let base = opts.solve_base(d.base.clone())?;
            let level = opts.level.or(opts.config.as_ref().map(|c| c.grid_level)).unwrap_or(d.level);
            let ladder = match &opts.config {
                Some(c) if !c.eps_ladder.is_empty() => c.eps_ladder.clone(),
                _ => d.ladder.clone(),
            };
            let p = EpsParams { base, level, ladder, ..d };
            (serde_json::to_value(&p)?, eps(&p)?)
        }
    })
}

impl SuiteReport {
    /// One `PASS`/`FAIL` line per criterion.
    pub fn table(&self) -> String {
        let mut s = String::new();
        for c in &self.criteria {
            s.push_str(&format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        s
    }

    /// Writes `summary.json` and `points.csv` into `dir`.
    pub fn write(&self, dir: &Path, params: &serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let command = format!("verify {}", self.suite);
        Envelope::new(&command, params, self)?.write(&dir.join("summary.json"))?;
        let path = dir.join("points.csv");
        let mut file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        file.write_all(csv_header(&command, params)?.as_bytes()).map_err(|e| CliError::io(&path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        Ok(())
    }
}
