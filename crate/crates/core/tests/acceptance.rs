use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqmi::data::generate_dataset;
use seqmi::erm::TrainConfig;
use seqmi::gamp::GampConfig;
use seqmi::gaussian::{core_sample, McPlan};
use seqmi::linalg::sym_sqrt;
use seqmi::loss::{flatten, unflatten, LossConfig, LossKind, VPenalty};
use seqmi::model::{ClusterMap, ConjugateParameters, Dimensions, SpectralAtom, SpectralMeasure};
use seqmi::oracle::{ridge_finite_test_error, ridge_scalar};
use seqmi::prox::{moreau_prox, ProxOptions, ProxProblem};
use seqmi::saddle::{solve_fixed_point, update_overlaps};
use seqmi::verify::{
    erm_check, erm_rows, fixed_point_checks, free_energy_check, gradient_check, mean_stderr, rbp_check, se_gamp_tracking,
};
use seqmi::zoo;

/// Criteria share one core; run them one at a time so runtimes are meaningful.
static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(id: u32, title: &str, ok: bool, started: Instant, budget_s: u64, detail: &str) {
    let elapsed = started.elapsed();
    let in_time = elapsed <= Duration::from_secs(budget_s);
    let passed = ok && in_time;
    println!(
        "{} criterion {id} ({title}): {detail} [runtime {:.1}s, budget {budget_s}s]",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    assert!(passed, "criterion {id} failed");
}

#[test]
fn criterion_1_ridge_oracle() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let lambda = 0.1;
    let mut ok = true;
    let mut detail = Vec::new();
    for alpha in [0.5, 1.0, 2.0] {
        let inst = zoo::ridge(alpha, lambda);
        let rho = inst.spec.fixed_statistics().unwrap().rho.get(0, 0)[(0, 0)];
        let rep = solve_fixed_point(&inst.spec, &inst.solver).unwrap();
        let oracle = ridge_scalar(alpha, lambda, rho);
        let gap = (rep.test_error.value - oracle.test_error).abs();
        let finite: Vec<f64> = (0..20).map(|s| ridge_finite_test_error(alpha, lambda, rho, 4000, s)).collect();
        let (m, se) = mean_stderr(&finite);
        let pooled = se.hypot(rep.test_error.stderr);
        let z = (rep.test_error.value - m).abs() / pooled;
        ok &= rep.converged && gap <= 1e-4 && z <= 3.0;
        detail.push(format!(
            "alpha={alpha}: solver {:.6} oracle {:.6} |diff| {gap:.1e} <= 1e-4, finite-d {m:.6}+-{se:.6} z={z:.2} <= 3",
            rep.test_error.value, oracle.test_error
        ));
    }
    verdict(1, "ridge oracle", ok, t0, 120, &detail.join("; "));
}

#[test]
fn criterion_2_state_evolution_tracks_gamp() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let inst = zoo::ridge(1.0, 0.1);
    let seeds: Vec<u64> = (0..5).collect();
    let tr = se_gamp_tracking(&inst.spec, &inst.solver, 1000, &seeds, 20, true).unwrap();
    let dev = tr.max_deviation();
    let worst = tr.worst_iteration();
    let detail = format!(
        "ridge d=1000 alpha=1, seeds 0-4: max relative deviation {dev:.4} <= 0.05 (worst t={worst}, per-t {:?})",
        tr.deviation.iter().skip(1).map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>()
    );
    verdict(2, "state evolution tracks GAMP", dev <= 0.05, t0, 300, &detail);
}

#[test]
fn criterion_3_gamp_fixed_points_are_critical_points() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let cfg = GampConfig::default();
    let checks = [
        gradient_check(&zoo::ridge(1.0, 0.1).spec, 500, 0, &cfg).unwrap(),
        gradient_check(&zoo::logistic_gmm(1.0).spec, 500, 0, &cfg).unwrap(),
    ];
    let ok = checks.iter().all(|c| c.passed);
    let detail = ["ridge", "logistic-gmm"]
        .iter()
        .zip(&checks)
        .map(|(n, c)| format!("{n}: |grad R|_inf {:.2e} <= {:.2e} ({})", c.value, c.tolerance, c.detail))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(3, "GAMP fixed points are GD critical points", ok, t0, 120, &detail);
}

#[test]
fn criterion_4_free_energy_identity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let mut ok = true;
    let mut converged = 0;
    let mut worst = (0.0f64, String::new());
    for name in zoo::NAMES {
        for alpha in [0.5, 1.0, 2.0, 4.0] {
            let inst = zoo::by_name(name, alpha).unwrap();
            let rep = solve_fixed_point(&inst.spec, &inst.solver).unwrap();
            if !rep.converged {
                continue;
            }
            converged += 1;
            let c = free_energy_check(&rep, inst.solver.tol);
            ok &= c.passed;
            let ratio = c.value / c.tolerance;
            if ratio >= worst.0 {
                worst = (ratio, format!("{name} alpha={alpha}: |eps_t+phi| {:.2e} <= {:.2e}", c.value, c.tolerance));
            }
        }
    }
    ok &= converged == 4 * zoo::NAMES.len();
    let detail = format!("{converged}/16 fixed points converged; tightest {}", worst.1);
    verdict(4, "training loss equals minus free entropy", ok, t0, 180, &detail);
}

#[test]
fn criterion_5_replica_predicts_erm() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let seeds: Vec<u64> = (0..10).collect();
    let train = TrainConfig {
        grad_tol: 1e-6,
        ..TrainConfig::default()
    };
    let mut ok = true;
    let mut detail = Vec::new();
    for alpha in [0.5, 1.0, 2.0, 4.0] {
        let inst = zoo::logistic_gmm(alpha);
        let rep = solve_fixed_point(&inst.spec, &inst.solver).unwrap();
        let rows = erm_rows(&inst.spec, 500, &seeds, 100_000, &train).unwrap();
        let c = erm_check(&rep, &rows);
        ok &= rep.converged && c.passed;
        detail.push(format!("alpha={alpha}: |diff| {:.5} <= {:.5} ({})", c.value, c.tolerance, c.detail));
    }
    verdict(5, "replica prediction matches ERM", ok, t0, 600, &detail.join("; "));
}

#[test]
fn criterion_6_rbp_matches_gamp() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let spec = zoo::ridge(2.0, 0.1).spec;
    let c = rbp_check(&spec, 40, 80, 0, &GampConfig::default()).unwrap();
    let detail = format!("coordinate RMS {:.2e} <= {:.4} ({})", c.value, c.tolerance, c.detail);
    verdict(6, "rBP and GAMP agree", c.passed, t0, 60, &detail);
}

#[test]
fn criterion_7_multi_token_invariants() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let inst = zoo::multi_token(1.0, 1.5);
    let rep = solve_fixed_point(&inst.spec, &inst.solver).unwrap();
    let mut checks = fixed_point_checks(&rep, &inst.solver);
    checks.push(free_energy_check(&rep, inst.solver.tol));
    let seeds: Vec<u64> = (0..5).collect();
    let tr = se_gamp_tracking(&inst.spec, &inst.solver, 1000, &seeds, 20, true).unwrap();
    let dev = tr.max_deviation();
    let ok = checks.iter().all(|c| c.passed) && dev <= 0.05;
    let mut detail: Vec<String> = checks.iter().map(|c| c.line()).collect();
    detail.push(format!("SE vs GAMP d=1000 seeds 0-4: {dev:.4} <= 0.05 (worst t={})", tr.worst_iteration()));
    verdict(7, "multi-token path", ok, t0, 300, &detail.join("; "));
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * 0.5
}

fn losses() -> Vec<LossConfig> {
    let labels = vec![1.0, -1.0];
    let mut out: Vec<LossConfig> = [
        LossKind::Square,
        LossKind::LabelSquare { labels: labels.clone() },
        LossKind::Logistic { labels: labels.clone() },
        LossKind::Hinge { labels },
    ]
    .into_iter()
    .map(LossConfig::new)
    .collect();
    out.push(LossConfig {
        kind: LossKind::Logistic { labels: vec![1.0, -1.0] },
        v_penalty: Some(VPenalty { trace: 0.3, quad: 0.7 }),
    });
    out
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-8)
}

#[test]
fn criterion_8_unit_property_suites() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (l, r, t) = (2usize, 2usize, 2usize);
    let class = vec![0usize, 1];

    // prox stationarity
    let mut prox_worst = 0.0f64;
    for cfg in losses() {
        let loss = cfg.build();
        for _ in 0..25 {
            let anchor = DMatrix::from_fn(l, r, |_, _| rng.gen_range(-2.0..2.0));
            let y = DMatrix::from_fn(l, t, |_, _| rng.gen_range(-1.0..1.0));
            let v = random_spd(r, &mut rng) * 0.3;
            let problem = ProxProblem::full(anchor, random_spd(l * r, &mut rng), y, v, class.clone());
            let res = moreau_prox(&problem, loss.as_ref(), &ProxOptions::default()).unwrap();
            prox_worst = prox_worst.max(problem.residual(loss.as_ref(), &res.x));
        }
    }

    // gradients and the v-derivative against central differences, at smooth points
    let h = 1e-5;
    let mut grad_worst = 0.0f64;
    let mut d3_worst = 0.0f64;
    for cfg in losses() {
        if matches!(cfg.kind, LossKind::Hinge { .. }) {
            continue;
        }
        let loss = cfg.build();
        for _ in 0..25 {
            let x = DMatrix::from_fn(l, r, |_, _| rng.gen_range(-1.5..1.5));
            let y = DMatrix::from_fn(l, t, |_, _| rng.gen_range(-1.0..1.0));
            let v = random_spd(r, &mut rng) * 0.3;
            let g = loss.grad_x(&y, &x, &v, &class);
            let xf = flatten(&x);
            let fd = DVector::from_fn(xf.len(), |j, _| {
                let mut p = xf.clone();
                let mut m = xf.clone();
                p[j] += h;
                m[j] -= h;
                (loss.eval(&y, &unflatten(&p, l, r), &v, &class) - loss.eval(&y, &unflatten(&m, l, r), &v, &class)) / (2.0 * h)
            });
            grad_worst = grad_worst.max(rel(&g, &unflatten(&fd, l, r)));
            let d3 = loss.d3(&y, &x, &v, &class);
            let fd3 = DMatrix::from_fn(r, r, |a, b| {
                let mut p = v.clone();
                let mut m = v.clone();
                p[(a, b)] += h;
                m[(a, b)] -= h;
                (loss.eval(&y, &x, &p, &class) - loss.eval(&y, &x, &m, &class)) / (2.0 * h)
            });
            if fd3.norm() > 0.0 || d3.norm() > 0.0 {
                d3_worst = d3_worst.max(rel(&d3, &fd3));
            }
        }
    }

    // symmetric square root
    let mut sqrt_worst = 0.0f64;
    for n in [1usize, 3, 6] {
        for _ in 0..20 {
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let a = m.transpose() * &m;
            let b = sym_sqrt(&a).unwrap();
            sqrt_worst = sqrt_worst.max((&b * &b - &a).norm() / a.norm());
        }
    }

    // sampler moments
    let spec = zoo::multi_token(1.0, 1.5).spec;
    let data = generate_dataset(&spec, 400, 2000, 11).unwrap();
    let mut z_worst = data.moment_zscores().iter().map(|z| z.2).fold(0.0, f64::max);
    let gmm = generate_dataset(&zoo::logistic_gmm(2.0).spec, 400, 2000, 12).unwrap();
    z_worst = gmm.moment_zscores().iter().map(|z| z.2).fold(z_worst, f64::max);
    let plan = McPlan::new(20_000, 5);
    let draws: Vec<DMatrix<f64>> = (0..plan.n_samples).map(|s| core_sample(&plan, 0, s, 2, 2)).collect();
    let n = draws.len() as f64;
    for i in 0..2 {
        for j in 0..2 {
            let mean = draws.iter().map(|d| d[(i, j)]).sum::<f64>() / n;
            let second = draws.iter().map(|d| d[(i, j)] * d[(i, j)]).sum::<f64>() / n;
            z_worst = z_worst.max(mean.abs() / (1.0 / n).sqrt());
            z_worst = z_worst.max((second - 1.0).abs() / (2.0 / n).sqrt());
        }
    }

    // linearity of the spectral integrals in the measure
    let dims = Dimensions {
        seq_len: 2,
        student_units: 2,
        teacher_units: 1,
        clusters: vec![1, 2],
        alpha: 1.0,
        lambda: 0.3,
        dim: 100,
    };
    let atom = |g0: f64, g1: f64, tau: f64, pi: f64, weight: f64| SpectralAtom {
        weight,
        gamma: ClusterMap::from_nested(&[1, 2], vec![vec![g0], vec![g1, 0.5 * g1]]).unwrap(),
        tau: ClusterMap::from_nested(&[1, 2], vec![vec![tau], vec![-tau, 0.2]]).unwrap(),
        pi: vec![pi],
    };
    let conj = ConjugateParameters {
        q_hat: ClusterMap::from_fn(&[1, 2], |a, b| DMatrix::from_row_slice(2, 2, &[0.3 + a as f64 * 0.1, 0.05, 0.05, 0.2 + b as f64 * 0.1])),
        variance_hat: ClusterMap::from_fn(&[1, 2], |a, b| DMatrix::from_row_slice(2, 2, &[0.6, 0.1 * a as f64, 0.1 * a as f64, 0.4 + 0.2 * b as f64])),
        m_hat: ClusterMap::from_fn(&[1, 2], |a, b| DVector::from_vec(vec![0.1 * (a + 1) as f64, -0.2 * (b + 1) as f64])),
        theta_hat: ClusterMap::from_fn(&[1, 2], |a, _| DMatrix::from_column_slice(2, 1, &[0.3, 0.1 * a as f64])),
        v_hat: DMatrix::from_row_slice(2, 2, &[0.05, 0.0, 0.0, 0.02]),
    };
    let (a1, a2) = ((1.0, 0.4, 0.2, 0.8), (0.3, 1.2, -0.5, -0.1));
    let w = 0.3;
    let mixed = update_overlaps(
        &conj,
        &SpectralMeasure {
            atoms: vec![atom(a1.0, a1.1, a1.2, a1.3, w), atom(a2.0, a2.1, a2.2, a2.3, 1.0 - w)],
        },
        &dims,
    )
    .unwrap();
    let p1 = update_overlaps(&conj, &SpectralMeasure { atoms: vec![atom(a1.0, a1.1, a1.2, a1.3, 1.0)] }, &dims).unwrap();
    let p2 = update_overlaps(&conj, &SpectralMeasure { atoms: vec![atom(a2.0, a2.1, a2.2, a2.3, 1.0)] }, &dims).unwrap();
    let flat = |p: &seqmi::model::OrderParameters| seqmi::saddle::flat_overlaps(p);
    let lin_worst = flat(&mixed)
        .iter()
        .zip(flat(&p1).iter().zip(flat(&p2)))
        .map(|(m, (x, y))| (m - (w * x + (1.0 - w) * y)).abs())
        .fold(0.0, f64::max);

    let ok = prox_worst <= 1e-10 && grad_worst <= 1e-5 && d3_worst <= 1e-5 && sqrt_worst <= 1e-9 && z_worst <= 3.0 && lin_worst <= 1e-12;
    let detail = format!(
        "prox residual {prox_worst:.1e} <= 1e-10; grad vs FD {grad_worst:.1e} <= 1e-5; d3 vs FD {d3_worst:.1e} <= 1e-5; \
         sqrt round trip {sqrt_worst:.1e} <= 1e-9; sampler |z| {z_worst:.2} <= 3; spectral linearity {lin_worst:.1e} <= 1e-12"
    );
    verdict(8, "unit property suites", ok, t0, 60, &detail);
}
