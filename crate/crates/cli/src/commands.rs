//! Subcommand drivers.

use std::path::PathBuf;

use anyhow::Context;
use nalgebra::DMatrix;
use rayon::prelude::*;

use seqmi::data::{generate_dataset, sample_count, Dataset};
use seqmi::erm::{empirical_test_error, erm_train, summary_statistics, EmpiricalStats, WeightInit};
use seqmi::gamp::{coordinate_rms, gamp_run, gd_gradient_norm, rbp_run, TrackPoint};
use seqmi::gaussian::ExpectationRule;
use seqmi::model::ModelSpec;
use seqmi::saddle::{solve_fixed_point, FixedPointReport, Init, SolverConfig};
use seqmi::table::{fmt_f64, Table};
use seqmi::verify::{se_trajectory, verify_instance, Report};
use seqmi::zoo;

use crate::config::{invalid, ExperimentConfig, Loaded};

/// Columns shared by solver and ERM learning curves.
pub const CURVE_COLUMNS: [&str; 13] = [
    "model", "source", "lambda", "alpha", "seed", "eps_g", "stderr", "eps_t", "phi", "grad_norm", "iterations", "converged", "error",
];

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mc_samples: Option<usize>,
}

/// Everything a subcommand needs.
pub struct Ctx {
    pub name: String,
    pub spec: ModelSpec,
    pub solver: SolverConfig,
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub hash: String,
}

impl Ctx {
    pub fn new(loaded: Loaded, ov: &Overrides) -> anyhow::Result<Self> {
        let Loaded { mut config, base_dir, hash } = loaded;
        if let Some(seed) = ov.seed {
            config.gamp.seeds = vec![seed];
            config.erm.seeds = vec![seed];
            config.verify.seed = seed;
        }
        let (name, spec, mut solver) = config.resolve(&base_dir)?;
        if let Some(n) = ov.mc_samples {
            if n < 2 {
                return Err(invalid("--mc-samples must be at least 2"));
            }
            for rule in std::iter::once(&mut solver.rule).chain(solver.test_rule.as_mut()) {
                if let ExpectationRule::MonteCarlo(plan) = rule {
                    plan.n_samples = n;
                }
            }
            config.erm.n_test = n;
            config.verify.n_test = n;
        }
        let out = ov.out.clone().unwrap_or_else(|| {
            let d = &config.output.dir;
            if d.is_absolute() {
                d.clone()
            } else {
                base_dir.join(d)
            }
        });
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            name,
            spec,
            solver,
            config,
            out,
            hash,
        })
    }

    fn table<S: Into<String>>(&self, command: &str, seeds: &[u64], columns: impl IntoIterator<Item = S>) -> Table {
        let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
        Table::new(columns)
            .meta("tool", format!("seqmi {}", env!("CARGO_PKG_VERSION")))
            .meta("command", command)
            .meta("config_hash", &self.hash)
            .meta("model", &self.name)
            .meta("seeds", seeds.join(" "))
    }

    fn write(&self, file: &str, table: &Table) -> anyhow::Result<PathBuf> {
        let path = self.out.join(file);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        table.write(&path)?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    fn spec_at(&self, alpha: f64, lambda: f64) -> ModelSpec {
        let mut spec = self.spec.clone();
        spec.dimensions.alpha = alpha;
        spec.dimensions.lambda = lambda;
        spec
    }

    fn grid(&self) -> (Vec<f64>, Vec<f64>) {
        (self.config.alphas(&self.spec), self.config.lambdas(&self.spec))
    }
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

/// One learning-curve row.
#[derive(Clone, Debug, Default)]
pub struct CurveRow {
    pub source: &'static str,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: Option<u64>,
    pub eps_g: Option<f64>,
    pub stderr: Option<f64>,
    pub eps_t: Option<f64>,
    pub phi: Option<f64>,
    pub grad_norm: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub error: String,
}

impl CurveRow {
    fn cells(&self, model: &str) -> Vec<String> {
        let f = |x: Option<f64>| x.map_or(String::new(), fmt_f64);
        vec![
            model.to_string(),
            self.source.to_string(),
            fmt_f64(self.lambda),
            fmt_f64(self.alpha),
            opt(self.seed),
            f(self.eps_g),
            f(self.stderr),
            f(self.eps_t),
            f(self.phi),
            f(self.grad_norm),
            opt(self.iterations),
            opt(self.converged),
            self.error.clone(),
        ]
    }
}

/// Solver sweep for one lambda, ascending in alpha with optional warm starts.
fn solver_curve(ctx: &Ctx, lambda: f64, alphas: &[f64], warm: bool) -> Vec<(CurveRow, Option<FixedPointReport>)> {
    let mut order: Vec<usize> = (0..alphas.len()).collect();
    order.sort_by(|&a, &b| alphas[a].total_cmp(&alphas[b]));
    let mut prev: Option<FixedPointReport> = None;
    let mut out: Vec<Option<(CurveRow, Option<FixedPointReport>)>> = vec![None; alphas.len()];
    for i in order {
        let alpha = alphas[i];
        let spec = ctx.spec_at(alpha, lambda);
        let mut cfg = ctx.solver.clone();
        if let (true, Some(p)) = (warm, prev.as_ref()) {
            cfg.init = Init::Warm {
                params: Box::new(p.params.clone()),
            };
        }
        let mut row = CurveRow {
            source: "solver",
            lambda,
            alpha,
            ..CurveRow::default()
        };
        match solve_fixed_point(&spec, &cfg) {
            Ok(rep) => {
                row.eps_g = Some(rep.test_error.value);
                row.stderr = Some(rep.test_error.stderr);
                row.eps_t = Some(rep.train_loss.value);
                row.phi = Some(rep.free_entropy.value);
                row.iterations = Some(rep.iterations);
                row.converged = Some(rep.converged);
                if rep.converged {
                    prev = Some(rep.clone());
                }
                out[i] = Some((row, Some(rep)));
            }
            Err(e) => {
                log::warn!("alpha={alpha} lambda={lambda}: {e}");
                row.error = e.to_string();
                out[i] = Some((row, None));
            }
        }
    }
    out.into_iter().map(|x| x.expect("every grid point visited")).collect()
}

fn solver_rows(ctx: &Ctx) -> anyhow::Result<Vec<CurveRow>> {
    let (alphas, lambdas) = ctx.grid();
    let warm = ctx.config.sweep.as_ref().map_or(true, |s| s.warm_start);
    let per_lambda: Vec<_> = lambdas.par_iter().map(|&l| solver_curve(ctx, l, &alphas, warm)).collect();
    let mut rows = Vec::new();
    for (lambda, curve) in lambdas.iter().zip(per_lambda) {
        for (row, rep) in curve {
            if let Some(rep) = rep {
                let path = ctx.out.join(format!("fixed_points/lambda_{lambda}_alpha_{}.json", row.alpha));
                std::fs::create_dir_all(path.parent().unwrap())?;
                std::fs::write(&path, serde_json::to_string_pretty(&rep)?)?;
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

fn dataset(spec: &ModelSpec, d: usize, seed: u64) -> anyhow::Result<Dataset> {
    generate_dataset(spec, d, sample_count(spec.dimensions.alpha, d), seed)
        .with_context(|| format!("dataset seed {seed}, alpha {}", spec.dimensions.alpha))
}

fn erm_rows(ctx: &Ctx) -> anyhow::Result<Vec<CurveRow>> {
    let (alphas, lambdas) = ctx.grid();
    let erm = &ctx.config.erm;
    let mut jobs = Vec::new();
    for &lambda in &lambdas {
        for &alpha in &alphas {
            for &seed in &erm.seeds {
                jobs.push((lambda, alpha, seed));
            }
        }
    }
    jobs.par_iter()
        .map(|&(lambda, alpha, seed)| {
            let spec = ctx.spec_at(alpha, lambda);
            let loss = spec.build_loss();
            let r = spec.dimensions.student_units;
            let data = dataset(&spec, erm.dim, seed)?;
            let warm = match erm.train.init {
                WeightInit::GampWarm => Some(
                    gamp_run(&data, loss.as_ref(), lambda, r, &ctx.config.gamp.config)
                        .with_context(|| format!("GAMP warm start, seed {seed}, alpha {alpha}"))?
                        .w_hat,
                ),
                _ => None,
            };
            let cfg = seqmi::erm::TrainConfig {
                seed,
                ..erm.train.clone()
            };
            let res = erm_train(&data, loss.as_ref(), lambda, r, &cfg, warm.as_ref())
                .with_context(|| format!("ERM seed {seed}, alpha {alpha}, lambda {lambda}"))?;
            let eg = empirical_test_error(&res.w_hat, &data.population, loss.as_ref(), erm.n_test, 1_000_000 + seed)?;
            Ok(CurveRow {
                source: "erm",
                lambda,
                alpha,
                seed: Some(seed),
                eps_g: Some(eg.value),
                stderr: Some(eg.stderr),
                eps_t: Some(res.train_loss),
                grad_norm: Some(res.grad_norm),
                iterations: Some(res.iterations),
                converged: Some(res.converged),
                ..CurveRow::default()
            })
        })
        .collect()
}

fn curve_table(ctx: &Ctx, command: &str, seeds: &[u64], rows: &[CurveRow]) -> anyhow::Result<Table> {
    let mut t = ctx.table(command, seeds, CURVE_COLUMNS);
    for r in rows {
        t.push(r.cells(&ctx.name))?;
    }
    Ok(t)
}

pub fn solve_se(ctx: &Ctx) -> anyhow::Result<PathBuf> {
    let rows = solver_rows(ctx)?;
    let t = curve_table(ctx, "solve-se", &[], &rows)?;
    ctx.write("learning_curve.csv", &t)
}

pub fn run_erm(ctx: &Ctx) -> anyhow::Result<PathBuf> {
    let rows = erm_rows(ctx)?;
    let t = curve_table(ctx, "run-erm", &ctx.config.erm.seeds, &rows)?;
    ctx.write("erm_curve.csv", &t)
}

pub fn sweep(ctx: &Ctx) -> anyhow::Result<PathBuf> {
    let mut rows = solver_rows(ctx)?;
    rows.extend(erm_rows(ctx)?);
    let t = curve_table(ctx, "sweep", &ctx.config.erm.seeds, &rows)?;
    ctx.write("learning_curve.csv", &t)
}

fn stats_columns(stats: &EmpiricalStats) -> Vec<String> {
    let mut c = vec!["iteration".to_string(), "residual".to_string()];
    c.extend(stats.column_names());
    c
}

fn trajectory_table(ctx: &Ctx, command: &str, seed: u64, points: &[TrackPoint]) -> anyhow::Result<Table> {
    let mut t = ctx.table(command, &[seed], stats_columns(&points[0].stats));
    for p in points {
        let mut row = vec![p.iteration.to_string(), fmt_f64(p.residual)];
        row.extend(p.stats.flatten().into_iter().map(fmt_f64));
        t.push(row)?;
    }
    Ok(t)
}

fn se_table(ctx: &Ctx, spec: &ModelSpec, iterations: usize) -> anyhow::Result<Table> {
    let traj = se_trajectory(spec, &ctx.solver, iterations)?;
    let mut t = ctx.table("state-evolution", &[], stats_columns(&traj[0]));
    for (it, s) in traj.iter().enumerate() {
        let mut row = vec![it.to_string(), String::new()];
        row.extend(s.flatten().into_iter().map(fmt_f64));
        t.push(row)?;
    }
    Ok(t)
}

const SUMMARY_COLUMNS: [&str; 11] = [
    "model", "lambda", "alpha", "seed", "iterations", "converged", "residual", "grad_norm", "grad_norm_zero", "offdiag_rms", "rbp_gamp_rms",
];

/// GAMP runs (and rBP runs when `rbp`) over the grid and seed list.
pub fn run_gamp(ctx: &Ctx, rbp: bool) -> anyhow::Result<PathBuf> {
    let command = if rbp { "run-rbp" } else { "run-gamp" };
    let (alphas, lambdas) = ctx.grid();
    let g = &ctx.config.gamp;
    let mut summary = ctx.table(command, &g.seeds, SUMMARY_COLUMNS);
    for &lambda in &lambdas {
        for &alpha in &alphas {
            let spec = ctx.spec_at(alpha, lambda);
            let loss = spec.build_loss();
            let r = spec.dimensions.student_units;
            let mut longest = 0;
            for &seed in &g.seeds {
                let data = dataset(&spec, g.dim, seed)?;
                let tag = format!("lambda_{lambda}_alpha_{alpha}_seed_{seed}");
                if g.save_datasets {
                    let p = ctx.out.join(format!("datasets/{tag}.bin"));
                    std::fs::create_dir_all(p.parent().unwrap())?;
                    data.save(&p)?;
                }
                let rep = gamp_run(&data, loss.as_ref(), lambda, r, &g.config)
                    .with_context(|| format!("GAMP seed {seed}, alpha {alpha}, lambda {lambda}"))?;
                ctx.write(&format!("gamp/{tag}.csv"), &trajectory_table(ctx, "run-gamp", seed, &rep.trajectory)?)?;
                longest = longest.max(rep.trajectory.len() - 1);
                let rms = if rbp {
                    let b = rbp_run(&data, loss.as_ref(), lambda, r, &g.config)
                        .with_context(|| format!("rBP seed {seed}, alpha {alpha}, lambda {lambda}"))?;
                    ctx.write(&format!("rbp/{tag}.csv"), &trajectory_table(ctx, "run-rbp", seed, &b.trajectory)?)?;
                    Some(coordinate_rms(&rep.w_hat, &b.w_hat))
                } else {
                    None
                };
                let zero = DMatrix::zeros(g.dim, r);
                summary.push(vec![
                    ctx.name.clone(),
                    fmt_f64(lambda),
                    fmt_f64(alpha),
                    seed.to_string(),
                    rep.iterations.to_string(),
                    rep.converged.to_string(),
                    rep.residual_history.last().map_or(String::new(), |x| fmt_f64(*x)),
                    fmt_f64(gd_gradient_norm(&rep.w_hat, &data, loss.as_ref(), lambda)),
                    fmt_f64(gd_gradient_norm(&zero, &data, loss.as_ref(), lambda)),
                    fmt_f64(rep.state.offdiag_rms()),
                    rms.map_or(String::new(), fmt_f64),
                ])?;
                log::debug!("{tag}: {:?}", summary_statistics(&rep.w_hat, &data.population).flatten());
            }
            ctx.write(&format!("state_evolution/lambda_{lambda}_alpha_{alpha}.csv"), &se_table(ctx, &spec, longest)?)?;
        }
    }
    ctx.write(&format!("{}_summary.csv", if rbp { "rbp" } else { "gamp" }), &summary)
}

/// Runs every check for the instance at each alpha of the grid.
pub fn verify(ctx: &Ctx, onsager: bool) -> anyhow::Result<(PathBuf, bool)> {
    let name = ctx
        .config
        .model
        .instance
        .as_deref()
        .ok_or_else(|| invalid("verify needs a model zoo instance (model.instance)"))?;
    let mut opts = ctx.config.verify.clone();
    opts.onsager &= onsager;
    let (alphas, _) = ctx.grid();
    let mut all = Report {
        instance: name.into(),
        checks: Vec::new(),
    };
    for alpha in alphas {
        let mut inst = zoo::by_name(name, alpha).map_err(|e| invalid(e.to_string()))?;
        inst.solver = ctx.solver.clone();
        let rep = verify_instance(&inst, &opts)?;
        for mut c in rep.checks {
            c.detail = format!("alpha={alpha}; {}", c.detail);
            println!("{}", c.line());
            all.checks.push(c);
        }
    }
    let mut t = all.to_table();
    t.metadata = ctx.table("verify", &opts.tracking_seeds, ["x"]).metadata;
    let path = ctx.write("verify_report.csv", &t)?;
    Ok((path, all.all_passed()))
}
