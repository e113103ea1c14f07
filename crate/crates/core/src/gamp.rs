//! GAMP and relaxed BP on a finite dataset.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::erm::{risk_gradient, summary_statistics, EmpiricalStats};
use crate::error::{Error, Result};
use crate::linalg;
use crate::loss::{flatten, unflatten, Loss};
use crate::prox::{moreau_prox, prox_jacobians, ProxOptions, ProxProblem};

/// Upper bound on `d * n` directed messages for rBP.
pub const MAX_MESSAGES: usize = 10_000_000;

const CHUNK: usize = 64;

const MIN_STEP: f64 = 1.0 / 64.0;
const REGROW: f64 = 1.25;

struct StepControl {
    base: f64,
    step: f64,
    adaptive: bool,
}

impl StepControl {
    fn new(config: &GampConfig) -> Self {
        let base = 1.0 - config.damping;
        Self {
            base,
            step: base,
            adaptive: config.adaptive,
        }
    }

    fn update(&mut self, residual: f64, prev: Option<f64>) -> f64 {
        if let (true, Some(prev)) = (self.adaptive, prev) {
            self.step = if residual > prev {
                (self.step * 0.5).max(MIN_STEP.min(self.base))
            } else {
                (self.step * REGROW).min(self.base)
            };
        }
        self.step
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GampConfig {
    pub max_iters: usize,
    pub tol: f64,
    /// `w <- (1 - damping) w_proposed + damping w_old`.
    pub damping: f64,
    /// Halve the step `1 - damping` whenever the residual grows; regrow it
    /// toward `1 - damping` while the residual falls.
    pub adaptive: bool,
    /// Memory terms `-V f` in `omega` and `A w` in `b`.
    pub onsager: bool,
    /// Keep running until `max_iters` even after convergence.
    pub fixed_iterations: bool,
    #[serde(skip)]
    pub prox: ProxOptions,
}

impl Default for GampConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-10,
            damping: 0.3,
            adaptive: true,
            onsager: true,
            fixed_iterations: false,
            prox: ProxOptions::default(),
        }
    }
}

impl GampConfig {
    /// Undamped, fixed-length run for comparisons with state evolution.
    pub fn tracking(iterations: usize) -> Self {
        Self {
            max_iters: iterations,
            damping: 0.0,
            adaptive: false,
            fixed_iterations: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.damping) || !(self.tol > 0.0) {
            return Err(Error::Validation("GAMP needs damping in [0, 1) and tol > 0".into()));
        }
        Ok(())
    }
}

/// Iteration state, named after the algorithm's variables.
#[derive(Clone, Debug)]
pub struct GampState {
    /// `d x r`, row `i` is `w_i`.
    pub w_hat: DMatrix<f64>,
    pub c_hat: Vec<DMatrix<f64>>,
    /// Per sample, `L x r`.
    pub f: Vec<DMatrix<f64>>,
    /// Per sample, full `Lr x Lr`.
    pub variance: Vec<DMatrix<f64>>,
    pub omega: Vec<DMatrix<f64>>,
    pub gamma: DMatrix<f64>,
    pub a: Vec<DMatrix<f64>>,
    pub c: DMatrix<f64>,
    /// `d x r`.
    pub b: DMatrix<f64>,
    pub iteration: usize,
}

impl GampState {
    fn new(d: usize, n: usize, l: usize, r: usize) -> Self {
        Self {
            w_hat: DMatrix::zeros(d, r),
            c_hat: vec![DMatrix::identity(r, r); d],
            f: vec![DMatrix::zeros(l, r); n],
            variance: vec![DMatrix::zeros(l * r, l * r); n],
            omega: vec![DMatrix::zeros(l, r); n],
            gamma: DMatrix::zeros(r, r),
            a: vec![DMatrix::zeros(r, r); d],
            c: DMatrix::zeros(r, r),
            b: DMatrix::zeros(d, r),
            iteration: 0,
        }
    }

    /// RMS over samples of the entries of `V_mu` outside the token-diagonal blocks.
    pub fn offdiag_rms(&self) -> f64 {
        let r = self.w_hat.ncols();
        let mut acc = 0.0;
        let mut cnt = 0usize;
        for v in &self.variance {
            for i in 0..v.nrows() {
                for j in 0..v.ncols() {
                    if i / r != j / r {
                        acc += v[(i, j)] * v[(i, j)];
                        cnt += 1;
                    }
                }
            }
        }
        if cnt == 0 {
            0.0
        } else {
            (acc / cnt as f64).sqrt()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrackPoint {
    pub iteration: usize,
    pub stats: EmpiricalStats,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct GampReport {
    pub state: GampState,
    pub w_hat: DMatrix<f64>,
    /// Statistics of `w^t` for `t = 0, 1, ...`.
    pub trajectory: Vec<TrackPoint>,
    pub converged: bool,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
}

fn small_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 1 {
        let x = m[(0, 0)];
        return (x.abs() > 1e-300 && x.is_finite()).then(|| DMatrix::from_element(1, 1, 1.0 / x));
    }
    linalg::inverse_with_sv(m).ok()
}

/// Output-channel quantities for one factor.
struct FactorOut {
    f: DMatrix<f64>,
    eta: DMatrix<f64>,
    g: DMatrix<f64>,
}

fn factor(
    loss: &dyn Loss,
    omega: &DMatrix<f64>,
    variance: &DMatrix<f64>,
    y: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    class: &[usize],
    opts: &ProxOptions,
) -> Result<FactorOut> {
    let (l, r) = omega.shape();
    let p = small_inverse(&linalg::symmetrize(variance))
        .ok_or_else(|| Error::Validation("singular V in the output channel".into()))?;
    let p = linalg::symmetrize(&p);
    let problem = ProxProblem::full(omega.clone(), p.clone(), y.clone(), gamma.clone(), class.to_vec());
    let x = moreau_prox(&problem, loss, opts)?.x;
    let f = unflatten(&(&p * (flatten(&x) - flatten(omega))), l, r);
    let eta = loss.d3(y, &x, gamma, class);
    let jac = prox_jacobians(&problem, loss, &x, opts)?.d_anchor;
    let n = l * r;
    let g = linalg::symmetrize(&(&p * (jac - DMatrix::identity(n, n))));
    Ok(FactorOut { f, eta, g })
}

fn par_map<T: Send, F>(n: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync,
{
    let chunks: Vec<Result<Vec<T>>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|ch| (ch * CHUNK..((ch + 1) * CHUNK).min(n)).map(&f).collect())
        .collect();
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Tokens transposed to `d x n`, so that sample `mu` is a contiguous column.
fn columns(data: &Dataset) -> Vec<DMatrix<f64>> {
    data.tokens.iter().map(|x| x.transpose()).collect()
}

/// `(1/d) sum_i x_{l i} x_{k i} c_i` as an `Lr x Lr` block matrix.
fn variance_block(cols: &[DMatrix<f64>], mu: usize, c_hat: &[DMatrix<f64>], skip: Option<usize>) -> DMatrix<f64> {
    let l = cols.len();
    let r = c_hat[0].nrows();
    let d = cols[0].nrows();
    let mut v = DMatrix::zeros(l * r, l * r);
    for i in 0..d {
        if Some(i) == skip {
            continue;
        }
        add_outer(&mut v, cols, mu, i, &c_hat[i], 1.0);
    }
    v / d as f64
}

/// `v += s x_{l i} x_{k i} m` on every `(l, k)` block.
fn add_outer(v: &mut DMatrix<f64>, cols: &[DMatrix<f64>], mu: usize, i: usize, m: &DMatrix<f64>, s: f64) {
    let r = m.nrows();
    for (la, xl) in cols.iter().enumerate() {
        let a = xl[(i, mu)] * s;
        if a == 0.0 {
            continue;
        }
        for (ka, xk) in cols.iter().enumerate() {
            let p = a * xk[(i, mu)];
            for u in 0..r {
                for w in 0..r {
                    v[(la * r + u, ka * r + w)] += p * m[(u, w)];
                }
            }
        }
    }
}

/// `-(1/d) sum_{l,k} x_{l i} x_{k i} g_{lk}` for one sample.
fn a_term(cols: &[DMatrix<f64>], mu: usize, i: usize, g: &DMatrix<f64>, r: usize, d: f64) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(r, r);
    for (la, xl) in cols.iter().enumerate() {
        for (ka, xk) in cols.iter().enumerate() {
            let p = xl[(i, mu)] * xk[(i, mu)];
            a -= g.view((la * r, ka * r), (r, r)) * (p / d);
        }
    }
    a
}

fn check_spec(data: &Dataset, r: usize) -> Result<()> {
    if r == 0 || data.dim() == 0 {
        return Err(Error::Validation("GAMP needs r >= 1 and d >= 1".into()));
    }
    Ok(())
}

/// Runs GAMP from `w = 0`, `c_hat = I`, `f = 0`.
pub fn gamp_run(data: &Dataset, loss: &dyn Loss, lambda: f64, r: usize, config: &GampConfig) -> Result<GampReport> {
    config.validate()?;
    check_spec(data, r)?;
    let d = data.dim();
    let n = data.n();
    let l = data.seq_len();
    let df = d as f64;
    let sd = df.sqrt();
    let cols = columns(data);
    let mut st = GampState::new(d, n, l, r);
    let mut trajectory = vec![TrackPoint {
        iteration: 0,
        stats: summary_statistics(&st.w_hat, &data.population),
        residual: f64::NAN,
    }];
    let mut history = Vec::new();
    let mut control = StepControl::new(config);
    let mut converged = false;
    for t in 0..config.max_iters {
        st.variance = par_map(n, |mu| Ok(variance_block(&cols, mu, &st.c_hat, None)))?;
        st.gamma = linalg::symmetrize(&(st.w_hat.transpose() * &st.w_hat / df));
        let z: Vec<DMatrix<f64>> = data.tokens.iter().map(|x| x * &st.w_hat / sd).collect();
        st.omega = (0..n)
            .map(|mu| {
                let mut om = DMatrix::from_fn(l, r, |tok, a| z[tok][(mu, a)]);
                if config.onsager {
                    om -= unflatten(&(&st.variance[mu] * flatten(&st.f[mu])), l, r);
                }
                om
            })
            .collect();
        let outs = par_map(n, |mu| {
            factor(loss, &st.omega[mu], &st.variance[mu], &data.labels[mu], &st.gamma, &data.classes[mu], &config.prox).map_err(
                |e| Error::SampleProx {
                    sample: mu,
                    iteration: t,
                    source: Box::new(e),
                },
            )
        })?;
        st.f = outs.iter().map(|o| o.f.clone()).collect();
        st.a = par_map(d, |i| {
            let mut a = DMatrix::zeros(r, r);
            for (mu, o) in outs.iter().enumerate() {
                a += a_term(&cols, mu, i, &o.g, r, df);
            }
            Ok(linalg::symmetrize(&a))
        })?;
        let mut c = DMatrix::zeros(r, r);
        for o in &outs {
            c += &o.eta + o.eta.transpose();
        }
        st.c = c / df;
        let mut b = DMatrix::zeros(d, r);
        for (tok, x) in data.tokens.iter().enumerate() {
            let ft = DMatrix::from_fn(n, r, |mu, a| st.f[mu][(tok, a)]);
            b += x.transpose() * ft / sd;
        }
        if config.onsager {
            for i in 0..d {
                let wi = st.w_hat.row(i).transpose();
                let corr = &st.a[i] * wi;
                for a in 0..r {
                    b[(i, a)] += corr[a];
                }
            }
        }
        st.b = b;
        let solved = par_map(d, |i| {
            let m = DMatrix::identity(r, r) * lambda + &st.c + &st.a[i];
            let inv = small_inverse(&m).ok_or(Error::SingularWeightSolve { coordinate: i })?;
            let w = &inv * st.b.row(i).transpose();
            Ok((w, linalg::symmetrize(&inv)))
        })?;
        let scale = 1.0 + st.w_hat.amax();
        let mut residual = 0.0f64;
        for (i, (w, _)) in solved.iter().enumerate() {
            let diff = (w - st.w_hat.row(i).transpose()).norm();
            residual = residual.max(diff / scale);
        }
        if !residual.is_finite() {
            return Err(Error::Divergence {
                iteration: t,
                residual,
                residual_history: history,
            });
        }
        let step = control.update(residual, history.last().copied());
        for (i, (w, ci)) in solved.into_iter().enumerate() {
            for a in 0..r {
                st.w_hat[(i, a)] = step * w[a] + (1.0 - step) * st.w_hat[(i, a)];
            }
            st.c_hat[i] = ci * step + &st.c_hat[i] * (1.0 - step);
        }
        st.iteration = t + 1;
        history.push(residual);
        trajectory.push(TrackPoint {
            iteration: t + 1,
            stats: summary_statistics(&st.w_hat, &data.population),
            residual,
        });
        if residual <= config.tol && !config.fixed_iterations {
            converged = true;
            break;
        }
    }
    if config.fixed_iterations {
        converged = history.last().is_some_and(|&r| r <= config.tol);
    }
    Ok(GampReport {
        w_hat: st.w_hat.clone(),
        iterations: st.iteration,
        state: st,
        trajectory,
        converged,
        residual_history: history,
    })
}

#[derive(Clone, Debug)]
pub struct RbpReport {
    pub w_hat: DMatrix<f64>,
    /// Final `w_{i -> mu}`, indexed `[mu][i]`.
    pub messages: Vec<Vec<DMatrix<f64>>>,
    pub trajectory: Vec<TrackPoint>,
    pub converged: bool,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
}

/// Relaxed BP with directed messages `i -> mu` and `mu -> i`.
///
/// Cavity quantities are formed as full sums minus the target's own term.
pub fn rbp_run(data: &Dataset, loss: &dyn Loss, lambda: f64, r: usize, config: &GampConfig) -> Result<RbpReport> {
    config.validate()?;
    check_spec(data, r)?;
    let d = data.dim();
    let n = data.n();
    if d.saturating_mul(n) > MAX_MESSAGES {
        return Err(Error::Validation(format!(
            "rBP needs d*n = {} messages, limit is {MAX_MESSAGES}",
            d * n
        )));
    }
    let l = data.seq_len();
    let df = d as f64;
    let sd = df.sqrt();
    let cols = columns(data);
    let rr = DMatrix::identity(r, r);
    // variable-to-factor messages, indexed [mu][i]
    let mut w_msg: Vec<Vec<DMatrix<f64>>> = vec![vec![DMatrix::zeros(r, 1); d]; n];
    let mut c_msg: Vec<Vec<DMatrix<f64>>> = vec![vec![rr.clone(); d]; n];
    let mut marginal = DMatrix::zeros(d, r);
    let mut trajectory = vec![TrackPoint {
        iteration: 0,
        stats: summary_statistics(&marginal, &data.population),
        residual: f64::NAN,
    }];
    let mut history = Vec::new();
    let mut control = StepControl::new(config);
    let mut converged = false;
    let mut iterations = 0;
    for t in 0..config.max_iters {
        // factor-to-variable messages, indexed [mu][i]
        let outs: Vec<Vec<FactorOut>> = par_map(n, |mu| {
            let ws = &w_msg[mu];
            let cs = &c_msg[mu];
            let v_full = variance_block(&cols, mu, cs, None) * df;
            let mut gamma_full = DMatrix::zeros(r, r);
            let mut om_full = DMatrix::<f64>::zeros(l, r);
            for i in 0..d {
                gamma_full += &ws[i] * ws[i].transpose();
                for tok in 0..l {
                    let x = cols[tok][(i, mu)];
                    for a in 0..r {
                        om_full[(tok, a)] += x * ws[i][a];
                    }
                }
            }
            (0..d)
                .map(|i| {
                    let mut v = v_full.clone();
                    add_outer(&mut v, &cols, mu, i, &cs[i], -1.0);
                    let v = v / df;
                    let gamma = (&gamma_full - &ws[i] * ws[i].transpose()) / df;
                    let om = DMatrix::from_fn(l, r, |tok, a| (om_full[(tok, a)] - cols[tok][(i, mu)] * ws[i][a]) / sd);
                    factor(loss, &om, &v, &data.labels[mu], &gamma, &data.classes[mu], &config.prox).map_err(|e| {
                        Error::SampleProx {
                            sample: mu,
                            iteration: t,
                            source: Box::new(e),
                        }
                    })
                })
                .collect()
        })?;
        // variable side: full sums, then cavities
        let per_var = par_map(d, |i| {
            let mut a_full = DMatrix::zeros(r, r);
            let mut c_full = DMatrix::zeros(r, r);
            let mut b_full = DMatrix::zeros(r, 1);
            let mut own = Vec::with_capacity(n);
            for (mu, row) in outs.iter().enumerate() {
                let o = &row[i];
                let a = a_term(&cols, mu, i, &o.g, r, df);
                let c = (&o.eta + o.eta.transpose()) / df;
                let mut b = DMatrix::zeros(r, 1);
                for tok in 0..l {
                    let x = cols[tok][(i, mu)] / sd;
                    for u in 0..r {
                        b[u] += x * o.f[(tok, u)];
                    }
                }
                a_full += &a;
                c_full += &c;
                b_full += &b;
                own.push((a, c, b));
            }
            let solve = |m: DMatrix<f64>, b: &DMatrix<f64>| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
                let inv = small_inverse(&linalg::symmetrize(&m)).ok_or(Error::SingularWeightSolve { coordinate: i })?;
                Ok((&inv * b, linalg::symmetrize(&inv)))
            };
            let base = &rr * lambda;
            let (w_marg, _) = solve(&base + &c_full + &a_full, &b_full)?;
            let msgs = own
                .iter()
                .map(|(a, c, b)| solve(&base + (&c_full - c) + (&a_full - a), &(&b_full - b)))
                .collect::<Result<Vec<_>>>()?;
            Ok((w_marg, msgs))
        })?;
        let scale = 1.0
            + w_msg
                .iter()
                .flat_map(|row| row.iter().map(|w| w.amax()))
                .fold(0.0, f64::max);
        let mut residual = 0.0f64;
        for (i, (_, msgs)) in per_var.iter().enumerate() {
            for (mu, (w, _)) in msgs.iter().enumerate() {
                residual = residual.max((w - &w_msg[mu][i]).norm() / scale);
            }
        }
        if !residual.is_finite() {
            return Err(Error::Divergence {
                iteration: t,
                residual,
                residual_history: history,
            });
        }
        let step = control.update(residual, history.last().copied());
        for (i, (w_marg, msgs)) in per_var.into_iter().enumerate() {
            for a in 0..r {
                marginal[(i, a)] = step * w_marg[a] + (1.0 - step) * marginal[(i, a)];
            }
            for (mu, (w, c)) in msgs.into_iter().enumerate() {
                w_msg[mu][i] = &w * step + &w_msg[mu][i] * (1.0 - step);
                c_msg[mu][i] = &c * step + &c_msg[mu][i] * (1.0 - step);
            }
        }
        iterations = t + 1;
        history.push(residual);
        trajectory.push(TrackPoint {
            iteration: t + 1,
            stats: summary_statistics(&marginal, &data.population),
            residual,
        });
        if residual <= config.tol && !config.fixed_iterations {
            converged = true;
            break;
        }
    }
    Ok(RbpReport {
        w_hat: marginal,
        messages: w_msg,
        trajectory,
        converged,
        iterations,
        residual_history: history,
    })
}

/// `||grad R(w)||_inf` for the regularized empirical risk.
pub fn gd_gradient_norm(w: &DMatrix<f64>, data: &Dataset, loss: &dyn Loss, lambda: f64) -> f64 {
    risk_gradient(w, data, loss, lambda).1.amax()
}

/// Coordinate RMS of the difference between two estimators.
pub fn coordinate_rms(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    ((a - b).norm_squared() / a.nrows() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::loss::{LogisticLoss, LossConfig, LossKind, SquareLoss};
    use crate::model::{ClassLaw, ClusterMap, Dimensions, ModelSpec, SpectralAtom, SpectralMeasure};

    #[test]
    fn step_halves_on_growth_and_regrows() {
        let mut c = StepControl::new(&GampConfig::default());
        assert_eq!(c.update(1.0, None), 0.7);
        assert_eq!(c.update(2.0, Some(1.0)), 0.35);
        assert_eq!(c.update(1.0, Some(2.0)), 0.35 * REGROW);
        for _ in 0..10 {
            c.update(0.5, Some(1.0));
        }
        assert_eq!(c.step, 0.7);
        for _ in 0..20 {
            c.update(2.0, Some(1.0));
        }
        assert_eq!(c.step, MIN_STEP);
        let mut fixed = StepControl::new(&GampConfig {
            adaptive: false,
            ..GampConfig::default()
        });
        assert_eq!(fixed.update(2.0, Some(1.0)), 0.7);
    }

    fn ridge_spec() -> ModelSpec {
        let atom = |pi: f64| SpectralAtom {
            weight: 0.5,
            gamma: ClusterMap::from_fn(&[1], |_, _| 1.0),
            tau: ClusterMap::from_fn(&[1], |_, _| 0.0),
            pi: vec![pi],
        };
        ModelSpec {
            dimensions: Dimensions {
                seq_len: 1,
                student_units: 1,
                teacher_units: 1,
                clusters: vec![1],
                alpha: 2.0,
                lambda: 0.1,
                dim: 40,
            },
            class_law: ClassLaw::uniform(&[1]),
            spectrum: SpectralMeasure {
                atoms: vec![atom(1.0), atom(-1.0)],
            },
            loss: LossConfig::new(LossKind::Square),
        }
    }

    fn normal_equations(data: &Dataset, lambda: f64) -> DMatrix<f64> {
        let d = data.dim();
        let x = &data.tokens[0];
        let y = DMatrix::from_fn(data.n(), 1, |mu, _| data.labels[mu][(0, 0)]);
        let lhs = x.transpose() * x / d as f64 + DMatrix::identity(d, d) * lambda;
        lhs.lu().solve(&(x.transpose() * y / (d as f64).sqrt())).unwrap()
    }

    #[test]
    fn empty_dataset_gives_pure_regularizer() {
        let data = generate_dataset(&ridge_spec(), 10, 0, 1).unwrap();
        let cfg = GampConfig {
            max_iters: 1,
            damping: 0.0,
            ..GampConfig::default()
        };
        let rep = gamp_run(&data, &SquareLoss, 0.5, 1, &cfg).unwrap();
        assert_eq!(rep.w_hat.amax(), 0.0);
        for c in &rep.state.c_hat {
            assert!((c[(0, 0)] - 2.0).abs() < 1e-15);
        }
        let rbp = rbp_run(&data, &SquareLoss, 0.5, 1, &cfg).unwrap();
        assert_eq!(rbp.w_hat.amax(), 0.0);
    }

    #[test]
    fn gamp_fixed_point_is_the_ridge_solution() {
        let data = generate_dataset(&ridge_spec(), 40, 80, 3).unwrap();
        let rep = gamp_run(&data, &SquareLoss, 0.1, 1, &GampConfig::default()).unwrap();
        assert!(rep.converged);
        let exact = normal_equations(&data, 0.1);
        assert!((&rep.w_hat - exact).amax() <= 1e-6);
        assert!(gd_gradient_norm(&rep.w_hat, &data, &SquareLoss, 0.1) <= 1e-6);
    }

    #[test]
    fn rbp_agrees_with_gamp() {
        let data = generate_dataset(&ridge_spec(), 40, 80, 4).unwrap();
        let g = gamp_run(&data, &SquareLoss, 0.1, 1, &GampConfig::default()).unwrap();
        let b = rbp_run(&data, &SquareLoss, 0.1, 1, &GampConfig::default()).unwrap();
        assert!(b.converged);
        assert!(coordinate_rms(&g.w_hat, &b.w_hat) <= 5.0 / 40f64.sqrt());
    }

    #[test]
    fn duplicated_samples_send_identical_messages() {
        let mut data = generate_dataset(&ridge_spec(), 12, 6, 5).unwrap();
        // make sample 1 a copy of sample 0
        for x in data.tokens.iter_mut() {
            let row = x.row(0).clone_owned();
            x.set_row(1, &row);
        }
        data.labels = data.population.labels(&data.tokens);
        let cols = columns(&data);
        let c_hat = vec![DMatrix::identity(1, 1); 12];
        assert_eq!(variance_block(&cols, 0, &c_hat, Some(3)), variance_block(&cols, 1, &c_hat, Some(3)));
        let cfg = GampConfig {
            max_iters: 5,
            ..GampConfig::default()
        };
        let rep = rbp_run(&data, &SquareLoss, 0.1, 1, &cfg).unwrap();
        for i in 0..12 {
            assert!((&rep.messages[0][i] - &rep.messages[1][i]).amax() <= 1e-12);
        }
    }

    #[test]
    fn gamp_is_deterministic() {
        let data = generate_dataset(&ridge_spec(), 30, 60, 9).unwrap();
        let a = gamp_run(&data, &SquareLoss, 0.1, 1, &GampConfig::tracking(6)).unwrap();
        let b = gamp_run(&data, &SquareLoss, 0.1, 1, &GampConfig::tracking(6)).unwrap();
        assert_eq!(a.w_hat, b.w_hat);
        assert_eq!(a.trajectory.len(), 7);
    }

    #[test]
    fn logistic_fixed_point_has_vanishing_gradient() {
        let spec = ModelSpec {
            dimensions: Dimensions {
                seq_len: 1,
                student_units: 1,
                teacher_units: 1,
                clusters: vec![2],
                alpha: 2.0,
                lambda: 0.05,
                dim: 60,
            },
            class_law: ClassLaw::uniform(&[2]),
            spectrum: SpectralMeasure {
                atoms: vec![SpectralAtom {
                    weight: 1.0,
                    gamma: ClusterMap::from_fn(&[2], |_, _| 0.5),
                    tau: ClusterMap::from_fn(&[2], |_, k| if k == 0 { 1.0 } else { -1.0 }),
                    pi: vec![0.0],
                }],
            },
            loss: LossConfig::new(LossKind::Logistic { labels: vec![1.0, -1.0] }),
        };
        let data = generate_dataset(&spec, 60, 120, 2).unwrap();
        let loss = LogisticLoss { labels: vec![1.0, -1.0] };
        let rep = gamp_run(&data, &loss, 0.05, 1, &GampConfig::default()).unwrap();
        assert!(rep.converged);
        let g0 = gd_gradient_norm(&DMatrix::zeros(60, 1), &data, &loss, 0.05);
        assert!(gd_gradient_norm(&rep.w_hat, &data, &loss, 0.05) <= 1e-4 * (1.0 + g0));
    }
}
