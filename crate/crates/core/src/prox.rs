//! Moreau envelopes and proximal maps of the loss.
//!
//! Solves `min_X 1/2 (X - a)^T P (X - a) + l(Y, X, v, c)` over `L x r` matrices
//! with the row-major flattening for the quadratic form. `P` is either
//! block diagonal over tokens (energetic envelope) or a full `Lr x Lr`
//! matrix (GAMP resolvent); both go through the same solver.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::loss::{flatten, unflatten, Loss};

#[derive(Clone, Debug, PartialEq)]
pub struct ProxOptions {
    /// Bound on the stationarity residual, floored at round-off for large anchors.
    pub tol: f64,
    pub max_iter: usize,
    pub lbfgs_memory: usize,
}

impl Default for ProxOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
            lbfgs_memory: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProxProblem {
    pub anchor: DMatrix<f64>,
    /// Full `Lr x Lr` precision.
    pub precision: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub class: Vec<usize>,
}

impl ProxProblem {
    /// Token-diagonal precision built from per-token `r x r` blocks.
    pub fn blockwise(
        anchor: DMatrix<f64>,
        blocks: &[&DMatrix<f64>],
        y: DMatrix<f64>,
        v: DMatrix<f64>,
        class: Vec<usize>,
    ) -> Self {
        let (l, r) = anchor.shape();
        let mut precision = DMatrix::zeros(l * r, l * r);
        for (tok, b) in blocks.iter().enumerate() {
            precision.view_mut((tok * r, tok * r), (r, r)).copy_from(b);
        }
        Self {
            anchor,
            precision,
            y,
            v,
            class,
        }
    }

    pub fn full(
        anchor: DMatrix<f64>,
        precision: DMatrix<f64>,
        y: DMatrix<f64>,
        v: DMatrix<f64>,
        class: Vec<usize>,
    ) -> Self {
        Self {
            anchor,
            precision,
            y,
            v,
            class,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.anchor.len();
        if self.precision.shape() != (n, n) {
            return Err(Error::Validation(format!(
                "precision is {:?}, expected {n}x{n}",
                self.precision.shape()
            )));
        }
        let sym = crate::linalg::symmetrize(&self.precision);
        if crate::linalg::max_asymmetry(&self.precision) > 1e-10 * self.precision.amax().max(1.0)
            || sym.cholesky().is_none()
        {
            return Err(Error::Validation("prox precision is not symmetric positive definite".into()));
        }
        Ok(())
    }

    fn quad(&self, x: &DVector<f64>, a: &DVector<f64>) -> f64 {
        let d = x - a;
        0.5 * d.dot(&(&self.precision * &d))
    }

    fn objective(&self, loss: &dyn Loss, x: &DVector<f64>, a: &DVector<f64>) -> f64 {
        let (l, r) = self.anchor.shape();
        let xm = unflatten(x, l, r);
        self.quad(x, a) + loss.eval(&self.y, &xm, &self.v, &self.class)
    }

    fn gradient(&self, loss: &dyn Loss, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        let (l, r) = self.anchor.shape();
        let xm = unflatten(x, l, r);
        &self.precision * (x - a) + flatten(&loss.grad_x(&self.y, &xm, &self.v, &self.class))
    }

    /// Stationarity residual, using subgradients where the loss has kinks.
    pub fn residual(&self, loss: &dyn Loss, x: &DMatrix<f64>) -> f64 {
        let (l, r) = self.anchor.shape();
        let base = unflatten(&(&self.precision * (flatten(x) - flatten(&self.anchor))), l, r);
        loss.subgradient_distance(&self.y, x, &self.v, &self.class, &base)
    }

    pub fn tolerance(&self, opts: &ProxOptions) -> f64 {
        let scale = self.precision.amax() * self.anchor.amax();
        opts.tol.max(64.0 * f64::EPSILON * scale)
    }
}

#[derive(Clone, Debug)]
pub struct ProxResult {
    pub x: DMatrix<f64>,
    /// Envelope value at `x`.
    pub value: f64,
    /// Stationarity residual at `x`.
    pub residual: f64,
    pub iterations: usize,
    pub closed_form: bool,
    /// Objective after every accepted step (starting point first).
    pub objective_trace: Vec<f64>,
}

fn finish(problem: &ProxProblem, loss: &dyn Loss, x: DMatrix<f64>, iterations: usize, closed_form: bool, trace: Vec<f64>) -> Result<ProxResult> {
    let xf = flatten(&x);
    let value = problem.objective(loss, &xf, &flatten(&problem.anchor));
    if !value.is_finite() {
        return Err(Error::LossBlowup);
    }
    let residual = problem.residual(loss, &x);
    Ok(ProxResult {
        x,
        value,
        residual,
        iterations,
        closed_form,
        objective_trace: trace,
    })
}

/// Minimizer and value of the Moreau envelope.
pub fn moreau_prox(problem: &ProxProblem, loss: &dyn Loss, opts: &ProxOptions) -> Result<ProxResult> {
    if let Some(x) = loss.prox_closed_form(&problem.y, &problem.anchor, &problem.precision, &problem.v, &problem.class) {
        let res = finish(problem, loss, x, 0, true, Vec::new())?;
        if res.residual <= problem.tolerance(opts) {
            #[cfg(debug_assertions)]
            cross_check(problem, loss, opts, &res.x);
            return Ok(res);
        }
        if loss.is_smooth_at(&problem.y, &res.x, &problem.v, &problem.class) {
            return iterate(problem, loss, opts, res.x);
        }
        return Ok(res);
    }
    iterate(problem, loss, opts, problem.anchor.clone())
}

#[cfg(debug_assertions)]
fn cross_check(problem: &ProxProblem, loss: &dyn Loss, opts: &ProxOptions, closed: &DMatrix<f64>) {
    if !loss.is_smooth_at(&problem.y, closed, &problem.v, &problem.class)
        || loss.hess_x(&problem.y, closed, &problem.v, &problem.class).is_none()
    {
        return;
    }
    if let Ok(generic) = iterate(problem, loss, opts, problem.anchor.clone()) {
        let gap = (&generic.x - closed).norm();
        debug_assert!(
            gap <= 1e-6 * (1.0 + closed.norm()),
            "closed-form prox of {} disagrees with the generic solver by {gap:e}",
            loss.name()
        );
    }
}

/// GAMP resolvent: the prox under a full `Lr x Lr` precision `V^{-1}`.
pub fn gamp_resolvent(problem: &ProxProblem, loss: &dyn Loss, opts: &ProxOptions) -> Result<DMatrix<f64>> {
    moreau_prox(problem, loss, opts).map(|r| r.x)
}

fn iterate(problem: &ProxProblem, loss: &dyn Loss, opts: &ProxOptions, start: DMatrix<f64>) -> Result<ProxResult> {
    let (l, r) = problem.anchor.shape();
    let n = l * r;
    let a = flatten(&problem.anchor);
    let tol = problem.tolerance(opts);
    let mut x = flatten(&start);
    let mut f = problem.objective(loss, &x, &a);
    if !f.is_finite() {
        return Err(Error::LossBlowup);
    }
    let mut g = problem.gradient(loss, &x, &a);
    let mut trace = vec![f];
    let mut history: VecDeque<(DVector<f64>, DVector<f64>)> = VecDeque::new();
    for it in 0..opts.max_iter {
        let xm = unflatten(&x, l, r);
        if problem.residual(loss, &xm) <= tol {
            return finish(problem, loss, xm, it, false, trace);
        }
        let hess = if loss.is_smooth_at(&problem.y, &xm, &problem.v, &problem.class) {
            loss.hess_x(&problem.y, &xm, &problem.v, &problem.class)
        } else {
            None
        };
        let dir = match hess {
            Some(h) => newton_direction(&(&problem.precision + h), &g),
            None => lbfgs_direction(&history, &g, &problem.precision),
        };
        let slope = g.dot(&dir);
        let dir = if slope < 0.0 { dir } else { -&g };
        let slope = g.dot(&dir);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x + &dir * step;
            let fc = problem.objective(loss, &cand, &a);
            if !fc.is_finite() {
                step *= 0.5;
                continue;
            }
            // roundoff slack so near-converged Newton steps are not rejected on noise
            if fc <= f + 1e-4 * step * slope + 4.0 * f64::EPSILON * f.abs() {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_)) = accepted else {
            let xm = unflatten(&x, l, r);
            let res = problem.residual(loss, &xm);
            return Err(Error::ProxNonConvergence {
                iterations: it,
                residual: res,
                last_iterate: x.iter().copied().collect(),
            });
        };
        let gn = problem.gradient(loss, &xn, &a);
        let s = &xn - &x;
        let yv = &gn - &g;
        if s.dot(&yv) > 1e-14 * s.norm() * yv.norm() {
            history.push_back((s, yv));
            if history.len() > opts.lbfgs_memory {
                history.pop_front();
            }
        }
        x = xn;
        f = fn_;
        g = gn;
        trace.push(f);
        debug_assert_eq!(x.len(), n);
    }
    let xm = unflatten(&x, l, r);
    let res = problem.residual(loss, &xm);
    if res <= tol {
        return finish(problem, loss, xm, opts.max_iter, false, trace);
    }
    Err(Error::ProxNonConvergence {
        iterations: opts.max_iter,
        residual: res,
        last_iterate: x.iter().copied().collect(),
    })
}

fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let n = h.nrows();
    let mut mu = 0.0;
    for _ in 0..30 {
        let damped = h + DMatrix::identity(n, n) * mu;
        if let Some(ch) = damped.cholesky() {
            return -ch.solve(g);
        }
        mu = if mu == 0.0 { 1e-8 * h.amax().max(1.0) } else { mu * 10.0 };
    }
    -g.clone()
}

fn lbfgs_direction(history: &VecDeque<(DVector<f64>, DVector<f64>)>, g: &DVector<f64>, precision: &DMatrix<f64>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y) in history.iter().rev() {
        let rho = 1.0 / y.dot(s);
        let a = rho * s.dot(&q);
        q -= y * a;
        alphas.push(a);
    }
    // the quadratic part of the objective is the natural initial Hessian
    let mut z = match precision.clone().cholesky() {
        Some(ch) => ch.solve(&q),
        None => q,
    };
    for ((s, y), a) in history.iter().zip(alphas.into_iter().rev()) {
        let rho = 1.0 / y.dot(s);
        let b = rho * y.dot(&z);
        z += s * (a - b);
    }
    -z
}

#[derive(Clone, Debug)]
pub struct ProxJacobians {
    /// `dX/d anchor`, `Lr x Lr`.
    pub d_anchor: DMatrix<f64>,
    /// `dX/dY`, `Lr x Lt`.
    pub d_y: DMatrix<f64>,
    /// True when the finite-difference fallback was used.
    pub finite_difference: bool,
}

pub const JACOBIAN_FD_STEP: f64 = 1e-5;

/// Jacobians of the prox map at its solution `x_star`.
pub fn prox_jacobians(problem: &ProxProblem, loss: &dyn Loss, x_star: &DMatrix<f64>, opts: &ProxOptions) -> Result<ProxJacobians> {
    let p = &problem.precision;
    if loss.is_smooth_at(&problem.y, x_star, &problem.v, &problem.class) {
        let h = loss.hess_x(&problem.y, x_star, &problem.v, &problem.class);
        let hxy = loss.hess_xy(&problem.y, x_star, &problem.v, &problem.class);
        if let (Some(h), Some(hxy)) = (h, hxy) {
            let a = p + h;
            if let Some(lu) = crate::linalg::inverse_with_sv(&a).ok() {
                return Ok(ProxJacobians {
                    d_anchor: &lu * p,
                    d_y: -(&lu * hxy),
                    finite_difference: false,
                });
            }
        }
    }
    finite_difference_jacobians(problem, loss, opts)
}

/// Central differences of the prox map with step `1e-5`.
pub fn finite_difference_jacobians(problem: &ProxProblem, loss: &dyn Loss, opts: &ProxOptions) -> Result<ProxJacobians> {
    let (l, r) = problem.anchor.shape();
    let t = problem.y.ncols();
    let n = l * r;
    let h = JACOBIAN_FD_STEP;
    let mut d_anchor = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut plus = problem.clone();
        let mut minus = problem.clone();
        plus.anchor[(j / r, j % r)] += h;
        minus.anchor[(j / r, j % r)] -= h;
        let col = (flatten(&moreau_prox(&plus, loss, opts)?.x) - flatten(&moreau_prox(&minus, loss, opts)?.x)) / (2.0 * h);
        d_anchor.set_column(j, &col);
    }
    let mut d_y = DMatrix::zeros(n, l * t);
    for j in 0..(l * t) {
        let mut plus = problem.clone();
        let mut minus = problem.clone();
        plus.y[(j / t, j % t)] += h;
        minus.y[(j / t, j % t)] -= h;
        let col = (flatten(&moreau_prox(&plus, loss, opts)?.x) - flatten(&moreau_prox(&minus, loss, opts)?.x)) / (2.0 * h);
        d_y.set_column(j, &col);
    }
    Ok(ProxJacobians {
        d_anchor,
        d_y,
        finite_difference: true,
    })
}
