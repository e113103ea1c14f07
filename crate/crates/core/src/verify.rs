//! Cross-checks between the solver, GAMP, rBP and gradient descent.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, sample_count};
use crate::erm::{empirical_test_error, erm_train, summary_statistics, EmpiricalStats, TrainConfig};
use crate::error::{Error, Result};
use crate::gamp::{coordinate_rms, gamp_run, gd_gradient_norm, rbp_run, GampConfig};
use crate::linalg;
use crate::model::ModelSpec;
use crate::oracle::ridge_scalar;
use crate::saddle::{FixedPointReport, Init, SolverConfig};
use crate::table::{fmt_f64, Table};
use crate::zoo::Instance;

/// Denominator floor for relative deviations of statistics that vanish.
pub const DEVIATION_FLOOR: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost,
    Above,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub bound: Bound,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    /// Passes when `value <= tolerance`.
    pub fn at_most(name: &str, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            bound: Bound::AtMost,
            passed: value <= tolerance,
            detail: detail.into(),
        }
    }

    /// Passes when `value > threshold`.
    pub fn above(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance: threshold,
            bound: Bound::Above,
            passed: value > threshold,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        let cmp = match self.bound {
            Bound::AtMost => "<=",
            Bound::Above => ">",
        };
        format!(
            "{} {}: {:.6e} {cmp} {:.6e} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Report {
    pub instance: String,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["instance", "check", "value", "tolerance", "passed", "detail"]);
        for c in &self.checks {
            t.rows.push(vec![
                self.instance.clone(),
                c.name.clone(),
                fmt_f64(c.value),
                fmt_f64(c.tolerance),
                c.passed.to_string(),
                c.detail.clone(),
            ]);
        }
        t
    }
}

/// `max_j |a_j - b_j| / max(|b_j|, floor)`.
pub fn relative_deviation(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Seed-averaged GAMP statistics next to the state-evolution prediction.
#[derive(Clone, Debug)]
pub struct Tracking {
    pub columns: Vec<String>,
    /// Indexed by iteration `t = 0..=T`.
    pub gamp: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub deviation: Vec<f64>,
}

impl Tracking {
    /// Largest deviation over `t = 1..=T`.
    pub fn max_deviation(&self) -> f64 {
        self.deviation.iter().skip(1).copied().fold(0.0, f64::max)
    }

    pub fn worst_iteration(&self) -> usize {
        (1..self.deviation.len())
            .max_by(|&a, &b| self.deviation[a].total_cmp(&self.deviation[b]))
            .unwrap_or(0)
    }

    /// One row per iteration: `gamp.<stat>`, `se.<stat>`, `deviation`.
    pub fn to_table(&self) -> Table {
        let mut cols = vec!["iteration".to_string()];
        cols.extend(self.columns.iter().map(|c| format!("gamp.{c}")));
        cols.extend(self.columns.iter().map(|c| format!("se.{c}")));
        cols.push("deviation".into());
        let mut t = Table::new(cols);
        for it in 0..self.gamp.len() {
            let mut row = vec![it.to_string()];
            row.extend(self.gamp[it].iter().map(|x| fmt_f64(*x)));
            row.extend(self.se[it].iter().map(|x| fmt_f64(*x)));
            row.push(fmt_f64(self.deviation[it]));
            t.rows.push(row);
        }
        t
    }
}

/// State evolution from the message-passing start, one entry per iteration.
pub fn se_trajectory(spec: &ModelSpec, solver: &SolverConfig, iterations: usize) -> Result<Vec<EmpiricalStats>> {
    let cfg = SolverConfig {
        init: Init::Algorithmic,
        damping: 0.0,
        tol: 1e-300,
        max_iters: iterations + 1,
        record_trajectory: true,
        ..solver.clone()
    };
    let rep = crate::saddle::solve_fixed_point(spec, &cfg)?;
    let traj = rep.trajectory.unwrap_or_default();
    Ok((0..=iterations)
        .map(|t| EmpiricalStats::from_params(traj.get(t).map_or(&rep.params, |p| &p.params)))
        .collect())
}

/// Undamped GAMP over `seeds`, flattened statistics averaged per iteration.
pub fn gamp_trajectory(spec: &ModelSpec, d: usize, seeds: &[u64], iterations: usize, onsager: bool) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    if seeds.is_empty() {
        return Err(Error::Validation("need at least one dataset seed".into()));
    }
    let loss = spec.build_loss();
    let dims = &spec.dimensions;
    let cfg = GampConfig {
        onsager,
        ..GampConfig::tracking(iterations)
    };
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut columns = Vec::new();
    for &seed in seeds {
        let data = generate_dataset(spec, d, sample_count(dims.alpha, d), seed)?;
        let rep = gamp_run(&data, loss.as_ref(), dims.lambda, dims.student_units, &cfg)?;
        columns = rep.trajectory[0].stats.column_names();
        for t in 0..=iterations {
            let p = &rep.trajectory[t.min(rep.trajectory.len() - 1)];
            let flat = p.stats.flatten();
            if sums.len() <= t {
                sums.push(vec![0.0; flat.len()]);
            }
            for (s, x) in sums[t].iter_mut().zip(flat) {
                *s += x;
            }
        }
    }
    let k = seeds.len() as f64;
    Ok((columns, sums.into_iter().map(|v| v.into_iter().map(|s| s / k).collect()).collect()))
}

pub fn se_gamp_tracking(
    spec: &ModelSpec,
    solver: &SolverConfig,
    d: usize,
    seeds: &[u64],
    iterations: usize,
    onsager: bool,
) -> Result<Tracking> {
    let se: Vec<Vec<f64>> = se_trajectory(spec, solver, iterations)?.iter().map(|s| s.flatten()).collect();
    let (columns, gamp) = gamp_trajectory(spec, d, seeds, iterations, onsager)?;
    let deviation = gamp.iter().zip(&se).map(|(a, b)| relative_deviation(a, b, DEVIATION_FLOOR)).collect();
    Ok(Tracking {
        columns,
        gamp,
        se,
        deviation,
    })
}

/// Fixed-point residual plus symmetry and positivity of `q`, `V`, `v`.
pub fn fixed_point_checks(report: &FixedPointReport, solver: &SolverConfig) -> Vec<Check> {
    let p = &report.params;
    let last = report.residual_history.last().copied().unwrap_or(f64::INFINITY);
    let mut asym = linalg::max_asymmetry(&p.v);
    let mut min_psd = linalg::min_eigenvalue(&p.v);
    let mut min_v = f64::INFINITY;
    for a in p.q.values() {
        asym = asym.max(linalg::max_asymmetry(a));
        min_psd = min_psd.min(linalg::min_eigenvalue(a));
    }
    for a in p.variance.values() {
        asym = asym.max(linalg::max_asymmetry(a));
        min_v = min_v.min(linalg::min_eigenvalue(a));
    }
    vec![
        Check::at_most(
            "fixed-point residual",
            last,
            solver.tol,
            format!("{} iterations, converged={}", report.iterations, report.converged),
        ),
        Check::at_most("overlap asymmetry", asym, 1e-12, "q, V, v"),
        Check::at_most("overlap negativity", (-min_psd).max(0.0), 1e-8, format!("min eigenvalue of q, v {min_psd:.3e}")),
        Check::above("variance positivity", min_v, 0.0, "min eigenvalue of V"),
    ]
}

/// `|eps_t + Phi| <= 2 (tol + pooled stderr)`.
pub fn free_energy_check(report: &FixedPointReport, tol: f64) -> Check {
    let gap = (report.train_loss.value + report.free_entropy.value).abs();
    let pooled = report.train_loss.stderr.hypot(report.free_entropy.stderr);
    Check::at_most(
        "training loss vs free energy",
        gap,
        2.0 * (tol + pooled),
        format!("eps_t={:.8} phi={:.8}", report.train_loss.value, report.free_entropy.value),
    )
}

/// Solver test error against the scalar ridge equations.
pub fn ridge_oracle_check(spec: &ModelSpec, report: &FixedPointReport) -> Result<Check> {
    let rho = spec.fixed_statistics()?.rho.get(0, 0)[(0, 0)];
    let o = ridge_scalar(spec.dimensions.alpha, spec.dimensions.lambda, rho);
    Ok(Check::at_most(
        "ridge oracle",
        (report.test_error.value - o.test_error).abs(),
        1e-4,
        format!("solver {:.8} oracle {:.8}", report.test_error.value, o.test_error),
    ))
}

/// Gradient of the empirical risk at the converged GAMP estimator.
pub fn gradient_check(spec: &ModelSpec, d: usize, seed: u64, config: &GampConfig) -> Result<Check> {
    let dims = &spec.dimensions;
    let loss = spec.build_loss();
    let data = generate_dataset(spec, d, sample_count(dims.alpha, d), seed)?;
    let r = dims.student_units;
    let g0 = gd_gradient_norm(&DMatrix::zeros(d, r), &data, loss.as_ref(), dims.lambda);
    let rep = gamp_run(&data, loss.as_ref(), dims.lambda, r, config)?;
    let g = gd_gradient_norm(&rep.w_hat, &data, loss.as_ref(), dims.lambda);
    Ok(Check::at_most(
        "GAMP fixed point is a GD critical point",
        g,
        1e-4 * (1.0 + g0),
        format!("d={d} seed={seed} gamp iterations={} converged={}", rep.iterations, rep.converged),
    ))
}

pub fn rbp_check(spec: &ModelSpec, d: usize, n: usize, seed: u64, config: &GampConfig) -> Result<Check> {
    let dims = &spec.dimensions;
    let loss = spec.build_loss();
    let data = generate_dataset(spec, d, n, seed)?;
    let g = gamp_run(&data, loss.as_ref(), dims.lambda, dims.student_units, config)?;
    let b = rbp_run(&data, loss.as_ref(), dims.lambda, dims.student_units, config)?;
    Ok(Check::at_most(
        "rBP vs GAMP",
        coordinate_rms(&g.w_hat, &b.w_hat),
        5.0 / (d as f64).sqrt(),
        format!("d={d} n={n} gamp converged={} rbp converged={}", g.converged, b.converged),
    ))
}

/// Largest off-token-block RMS of `V_mu` after `iterations` GAMP steps.
pub fn concentration_check(spec: &ModelSpec, d: usize, seeds: &[u64], iterations: usize) -> Result<Check> {
    let dims = &spec.dimensions;
    let loss = spec.build_loss();
    let mut worst = 0.0f64;
    for &seed in seeds {
        let data = generate_dataset(spec, d, sample_count(dims.alpha, d), seed)?;
        let rep = gamp_run(&data, loss.as_ref(), dims.lambda, dims.student_units, &GampConfig::tracking(iterations))?;
        worst = worst.max(rep.state.offdiag_rms());
    }
    Ok(Check::at_most(
        "V off-diagonal concentration",
        worst,
        5.0 / (d as f64).sqrt(),
        format!("d={d} iteration {iterations}, worst of {} seeds", seeds.len()),
    ))
}

/// Seed-averaged ERM test error with its standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErmRow {
    pub seed: u64,
    pub test_error: f64,
    pub test_stderr: f64,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stats: EmpiricalStats,
}

pub fn erm_rows(spec: &ModelSpec, d: usize, seeds: &[u64], n_test: usize, train: &TrainConfig) -> Result<Vec<ErmRow>> {
    let dims = &spec.dimensions;
    let loss = spec.build_loss();
    seeds
        .iter()
        .map(|&seed| {
            let data = generate_dataset(spec, d, sample_count(dims.alpha, d), seed)?;
            let cfg = TrainConfig { seed, ..train.clone() };
            let res = erm_train(&data, loss.as_ref(), dims.lambda, dims.student_units, &cfg, None)?;
            let eg = empirical_test_error(&res.w_hat, &data.population, loss.as_ref(), n_test, 1_000_000 + seed)?;
            Ok(ErmRow {
                seed,
                test_error: eg.value,
                test_stderr: eg.stderr,
                train_loss: res.train_loss,
                grad_norm: res.grad_norm,
                iterations: res.iterations,
                converged: res.converged,
                stats: summary_statistics(&res.w_hat, &data.population),
            })
        })
        .collect()
}

/// Mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Solver test error within three pooled standard errors of the ERM average.
pub fn erm_check(report: &FixedPointReport, rows: &[ErmRow]) -> Check {
    let egs: Vec<f64> = rows.iter().map(|r| r.test_error).collect();
    let (m, se) = mean_stderr(&egs);
    let pooled = se.hypot(report.test_error.stderr);
    let gap = (m - report.test_error.value).abs();
    Check::at_most(
        "solver vs ERM test error",
        gap,
        3.0 * pooled,
        format!("solver {:.6} erm {:.6} +- {:.6} over {} seeds", report.test_error.value, m, se, rows.len()),
    )
}

/// Largest across-seed standard deviation of the entries of `q`.
pub fn overlap_spread_check(rows: &[ErmRow], d: usize) -> Check {
    let flat: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.stats.q.values().iter().flat_map(|a| a.iter().copied().collect::<Vec<_>>()).collect())
        .collect();
    let mut worst = 0.0f64;
    for j in 0..flat.first().map_or(0, Vec::len) {
        let col: Vec<f64> = flat.iter().map(|v| v[j]).collect();
        let (_, se) = mean_stderr(&col);
        worst = worst.max(se * (col.len() as f64).sqrt());
    }
    Check::at_most(
        "q spread across seeds",
        worst,
        5.0 / (d as f64).sqrt(),
        format!("d={d}, {} seeds", rows.len()),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyOptions {
    pub tracking_dim: usize,
    pub tracking_seeds: Vec<u64>,
    pub tracking_iterations: usize,
    pub gradient_dim: usize,
    pub erm_dim: usize,
    pub erm_seeds: Vec<u64>,
    pub n_test: usize,
    pub rbp_dim: usize,
    pub rbp_samples: usize,
    pub seed: u64,
    /// Memory terms in the GAMP runs compared with state evolution.
    pub onsager: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            tracking_dim: 1000,
            tracking_seeds: (0..5).collect(),
            tracking_iterations: 20,
            gradient_dim: 500,
            erm_dim: 500,
            erm_seeds: (0..10).collect(),
            n_test: 100_000,
            rbp_dim: 40,
            rbp_samples: 80,
            seed: 0,
            onsager: true,
        }
    }
}

/// Every check that applies to the instance.
pub fn verify_instance(inst: &Instance, opts: &VerifyOptions) -> Result<Report> {
    let spec = &inst.spec;
    let report = crate::saddle::solve_fixed_point(spec, &inst.solver)?;
    let mut checks = fixed_point_checks(&report, &inst.solver);
    checks.push(free_energy_check(&report, inst.solver.tol));
    let tracked = matches!(inst.name.as_str(), "ridge" | "multi-token");
    if inst.name == "ridge" {
        checks.push(ridge_oracle_check(spec, &report)?);
    }
    if tracked {
        let tr = se_gamp_tracking(spec, &inst.solver, opts.tracking_dim, &opts.tracking_seeds, opts.tracking_iterations, opts.onsager)?;
        let base = tr.max_deviation();
        checks.push(Check::at_most(
            "state evolution tracks GAMP",
            base,
            0.05,
            format!(
                "d={} seeds={} worst at t={}, onsager={}",
                opts.tracking_dim,
                opts.tracking_seeds.len(),
                tr.worst_iteration(),
                opts.onsager
            ),
        ));
        if opts.onsager && inst.name == "ridge" {
            let broken = se_gamp_tracking(spec, &inst.solver, opts.tracking_dim, &opts.tracking_seeds, opts.tracking_iterations, false)?;
            checks.push(Check::above(
                "onsager mutation",
                broken.max_deviation(),
                5.0 * base,
                format!("deviation without memory terms vs 5x baseline {base:.4}"),
            ));
        }
    }
    if inst.name == "multi-token" {
        checks.push(concentration_check(spec, opts.tracking_dim, &(0..10).collect::<Vec<_>>(), opts.tracking_iterations)?);
    }
    checks.push(gradient_check(spec, opts.gradient_dim, opts.seed, &GampConfig::default())?);
    checks.push(rbp_check(spec, opts.rbp_dim, opts.rbp_samples, opts.seed, &GampConfig::default())?);
    if inst.name.ends_with("gmm") {
        let train = TrainConfig {
            grad_tol: 1e-6,
            ..TrainConfig::default()
        };
        let rows = erm_rows(spec, opts.erm_dim, &opts.erm_seeds, opts.n_test, &train)?;
        checks.push(erm_check(&report, &rows));
    }
    if inst.name == "ridge" {
        let rows = erm_rows(spec, opts.tracking_dim, &(0..10).collect::<Vec<_>>(), 1000, &TrainConfig::default())?;
        checks.push(overlap_spread_check(&rows, opts.tracking_dim));
    }
    Ok(Report {
        instance: inst.name.clone(),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;

    #[test]
    fn relative_deviation_uses_the_floor() {
        assert_eq!(relative_deviation(&[1.1, 0.005], &[1.0, 0.0], 0.01), 0.5);
        assert!((relative_deviation(&[1.1], &[1.0], 0.01) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn mean_stderr_of_constant_is_zero() {
        assert_eq!(mean_stderr(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        assert!(mean_stderr(&[1.0]).1.is_infinite());
    }

    #[test]
    fn check_lines_report_numbers() {
        let c = Check::at_most("x", 0.5, 1.0, "note");
        assert!(c.passed && c.line().starts_with("PASS x: 5.0"));
        assert!(!Check::at_most("y", f64::NAN, 1.0, "").passed);
    }

    #[test]
    fn se_trajectory_starts_at_zero_overlaps() {
        let inst = zoo::ridge(1.0, 0.1);
        let tr = se_trajectory(&inst.spec, &inst.solver, 3).unwrap();
        assert_eq!(tr.len(), 4);
        assert!(tr[0].flatten().iter().all(|x| *x == 0.0));
        assert!(tr[1].theta.get(0, 0)[(0, 0)] > 0.0);
    }

    #[test]
    fn small_tracking_run_is_close_and_tabulates() {
        let inst = zoo::ridge(1.0, 0.1);
        let tr = se_gamp_tracking(&inst.spec, &inst.solver, 400, &[0, 1], 4, true).unwrap();
        assert_eq!(tr.gamp.len(), 5);
        assert_eq!(tr.deviation[0], 0.0);
        assert!(tr.max_deviation() < 0.5, "{:?}", tr.deviation);
        let t = tr.to_table();
        let back = Table::parse(&t.to_csv().unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.columns[1], "gamp.q.0.0.0.0");
    }

    #[test]
    fn ridge_report_checks_pass_on_the_oracle() {
        let inst = zoo::ridge(1.0, 0.1);
        let rep = crate::saddle::solve_fixed_point(&inst.spec, &inst.solver).unwrap();
        assert!(ridge_oracle_check(&inst.spec, &rep).unwrap().passed);
        assert!(free_energy_check(&rep, inst.solver.tol).passed);
        assert!(fixed_point_checks(&rep, &inst.solver).iter().all(|c| c.passed));
    }
}
