//! Empirical risk, its gradient, and full-batch gradient descent.
//!
//! `R(w) = sum_mu l(y_mu, x_mu w / sqrt(d), w^T w / d, c_mu) + lambda/2 ||w||^2`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Population};
use crate::error::{Error, Result};
use crate::linalg;
use crate::loss::Loss;
use crate::model::{ClusterMap, OrderParameters};
use crate::saddle::Estimate;

const CHUNK: usize = 256;

/// Per-sample projections `x_mu w / sqrt(d)` as `L x r` matrices.
pub fn projections(w: &DMatrix<f64>, data: &Dataset) -> Vec<DMatrix<f64>> {
    let sd = (data.dim() as f64).sqrt();
    let per_token: Vec<DMatrix<f64>> = data.tokens.iter().map(|x| x * w / sd).collect();
    (0..data.n())
        .map(|mu| DMatrix::from_fn(data.seq_len(), w.ncols(), |l, a| per_token[l][(mu, a)]))
        .collect()
}

struct SampleTerms {
    value: f64,
    grad: DMatrix<f64>,
    d3: DMatrix<f64>,
}

fn sample_terms(w: &DMatrix<f64>, data: &Dataset, loss: &dyn Loss, with_grad: bool) -> Vec<SampleTerms> {
    let d = data.dim() as f64;
    let gamma = w.transpose() * w / d;
    let z = projections(w, data);
    let n = data.n();
    let chunks: Vec<Vec<SampleTerms>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|ch| {
            (ch * CHUNK..((ch + 1) * CHUNK).min(n))
                .map(|mu| {
                    let y = &data.labels[mu];
                    let c = &data.classes[mu];
                    let value = loss.eval(y, &z[mu], &gamma, c);
                    let (grad, d3) = if with_grad {
                        (loss.grad_x(y, &z[mu], &gamma, c), loss.d3(y, &z[mu], &gamma, c))
                    } else {
                        (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
                    };
                    SampleTerms { value, grad, d3 }
                })
                .collect()
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

/// `R(w)` including the regularizer.
pub fn empirical_risk(w: &DMatrix<f64>, data: &Dataset, loss: &dyn Loss, lambda: f64) -> f64 {
    let terms = sample_terms(w, data, loss, false);
    terms.iter().map(|t| t.value).sum::<f64>() + 0.5 * lambda * w.norm_squared()
}

/// `R(w)` and `grad R(w)` (`d x r`).
///
/// `grad = (1/sqrt(d)) sum_mu x_mu^T dl/dX + (1/d) w sum_mu (D_mu + D_mu^T) + lambda w`,
/// with `D_mu` the derivative in the `w^T w / d` slot.
pub fn risk_gradient(w: &DMatrix<f64>, data: &Dataset, loss: &dyn Loss, lambda: f64) -> (f64, DMatrix<f64>) {
    let (d, r) = w.shape();
    let n = data.n();
    let terms = sample_terms(w, data, loss, true);
    let value = terms.iter().map(|t| t.value).sum::<f64>() + 0.5 * lambda * w.norm_squared();
    let mut grad = w * lambda;
    let sd = (d as f64).sqrt();
    for (l, x) in data.tokens.iter().enumerate() {
        let g = DMatrix::from_fn(n, r, |mu, a| terms[mu].grad[(l, a)]);
        grad += x.transpose() * g / sd;
    }
    let mut dsum = DMatrix::zeros(r, r);
    for t in &terms {
        dsum += &t.d3 + t.d3.transpose();
    }
    grad += w * dsum / d as f64;
    (value, grad)
}

/// Exact empirical summary statistics of a weight matrix against the
/// declared population covariances, means and teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalStats {
    pub q: ClusterMap<DMatrix<f64>>,
    pub m: ClusterMap<DVector<f64>>,
    pub theta: ClusterMap<DMatrix<f64>>,
    pub v: DMatrix<f64>,
}

impl EmpiricalStats {
    /// The same statistics read off a set of order parameters (`V` is dropped).
    pub fn from_params(p: &OrderParameters) -> Self {
        Self {
            q: p.q.clone(),
            m: p.m.clone(),
            theta: p.theta.clone(),
            v: p.v.clone(),
        }
    }

    /// Flat row: `q`, `m`, `theta` per `(l, k)` then `v`, all row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let push = |out: &mut Vec<f64>, a: &DMatrix<f64>| {
            for i in 0..a.nrows() {
                for j in 0..a.ncols() {
                    out.push(a[(i, j)]);
                }
            }
        };
        for a in self.q.values() {
            push(&mut out, a);
        }
        for a in self.m.values() {
            out.extend(a.iter());
        }
        for a in self.theta.values() {
            push(&mut out, a);
        }
        push(&mut out, &self.v);
        out
    }

    /// Names matching [`EmpiricalStats::flatten`], shared with the solver tables.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (l, k, a) in self.q.iter() {
            for i in 0..a.nrows() {
                for j in 0..a.ncols() {
                    names.push(format!("q.{l}.{k}.{i}.{j}"));
                }
            }
        }
        for (l, k, a) in self.m.iter() {
            for i in 0..a.len() {
                names.push(format!("m.{l}.{k}.{i}"));
            }
        }
        for (l, k, a) in self.theta.iter() {
            for i in 0..a.nrows() {
                for j in 0..a.ncols() {
                    names.push(format!("theta.{l}.{k}.{i}.{j}"));
                }
            }
        }
        for i in 0..self.v.nrows() {
            for j in 0..self.v.ncols() {
                names.push(format!("v.{i}.{j}"));
            }
        }
        names
    }
}

/// `q = w^T Sigma w / d`, `m = mu^T w / sqrt(d)`, `theta = w^T Sigma w* / d`, `v = w^T w / d`.
pub fn summary_statistics(w: &DMatrix<f64>, pop: &Population) -> EmpiricalStats {
    let d = pop.dim as f64;
    let weighted = |g: &DVector<f64>| DMatrix::from_fn(w.nrows(), w.ncols(), |i, a| g[i] * w[(i, a)]);
    EmpiricalStats {
        q: pop.cov_diag.map(|_, _, g| linalg::symmetrize(&(w.transpose() * weighted(g) / d))),
        m: pop.means.map(|_, _, mu| w.transpose() * mu / d.sqrt()),
        theta: pop.cov_diag.map(|_, _, g| weighted(g).transpose() * &pop.teacher / d),
        v: linalg::symmetrize(&(w.transpose() * w / d)),
    }
}

/// Fresh-sample estimate of the test metric.
///
/// Given the class tuple, `(x_l w / sqrt(d), x_l w* / sqrt(d))` is exactly Gaussian
/// with moments fixed by the population, so test points are drawn in that
/// `L (r + t)`-dimensional space rather than in `R^{L x d}`.
pub fn empirical_test_error(w: &DMatrix<f64>, pop: &Population, loss: &dyn Loss, n_test: usize, seed: u64) -> Result<Estimate> {
    if n_test < 2 {
        return Err(Error::Validation("need at least two test samples".into()));
    }
    let d = pop.dim as f64;
    let (r, t) = (w.ncols(), pop.teacher.ncols());
    let joint = ClusterMap::try_from_fn(&pop.clusters, |l, k| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let g = pop.cov_diag.get(l, k);
        let mu = pop.means.get(l, k);
        let mut stack = DMatrix::zeros(pop.dim, r + t);
        stack.view_mut((0, 0), (pop.dim, r)).copy_from(w);
        stack.view_mut((0, r), (pop.dim, t)).copy_from(&pop.teacher);
        let scaled = DMatrix::from_fn(pop.dim, r + t, |i, j| g[i] * stack[(i, j)]);
        let cov = linalg::symmetrize(&(stack.transpose() * scaled / d));
        let mean = stack.transpose() * mu / d.sqrt();
        Ok((mean, linalg::sym_sqrt(&linalg::clip_psd(&cov))?))
    })?;
    let l_len = pop.clusters.len();
    let v = w.transpose() * w / d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(n_test);
    for _ in 0..n_test {
        let c = &pop.class_law.support[pop.class_law.sample_index(&mut rng)];
        let mut x = DMatrix::zeros(l_len, r);
        let mut y = DMatrix::zeros(l_len, t);
        for l in 0..l_len {
            let (mean, half) = joint.get(l, c[l]);
            let z = DVector::from_fn(r + t, |_, _| rng.sample::<f64, _>(StandardNormal));
            let s = mean + half * z;
            for a in 0..r {
                x[(l, a)] = s[a];
            }
            for b in 0..t {
                y[(l, b)] = s[r + b];
            }
        }
        vals.push(loss.test_eval(&y, &x, &v, c));
    }
    let mean = vals.iter().sum::<f64>() / n_test as f64;
    let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n_test - 1) as f64;
    Ok(Estimate {
        value: mean,
        stderr: (var / n_test as f64).sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightInit {
    Zero,
    Gaussian { sigma: f64 },
    GampWarm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepPolicy {
    Fixed { step: f64 },
    /// Armijo backtracking; the trial step grows by `grow` after each accepted step.
    Backtracking { initial: f64, shrink: f64, grow: f64, armijo: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub step: StepPolicy,
    pub max_epochs: usize,
    /// Stop once `||grad R||_inf` falls below this.
    pub grad_tol: f64,
    pub init: WeightInit,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            step: StepPolicy::Backtracking {
                initial: 1.0,
                shrink: 0.5,
                grow: 2.0,
                armijo: 1e-4,
            },
            max_epochs: 20_000,
            grad_tol: 1e-8,
            init: WeightInit::Zero,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match &self.step {
            StepPolicy::Fixed { step } => *step > 0.0,
            StepPolicy::Backtracking { initial, shrink, grow, armijo } => {
                *initial > 0.0 && *shrink > 0.0 && *shrink < 1.0 && *grow >= 1.0 && *armijo > 0.0 && *armijo < 1.0
            }
        };
        if !ok || !(self.grad_tol > 0.0) {
            return Err(Error::Validation("train config needs positive step sizes and threshold".into()));
        }
        if let WeightInit::Gaussian { sigma } = self.init {
            if !(sigma >= 0.0) {
                return Err(Error::Validation("gaussian init needs sigma >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub w_hat: DMatrix<f64>,
    /// `R(w_hat) / d`.
    pub train_loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
}

/// Consecutive failed backtracking trials before giving up.
pub const STALL_LIMIT: usize = 50;

/// Relative objective slack under which the slope test replaces Armijo.
pub const APPROX_SLACK: f64 = 1e-12;

/// Full-batch gradient descent on `R`.
pub fn erm_train(data: &Dataset, loss: &dyn Loss, lambda: f64, r: usize, config: &TrainConfig, warm: Option<&DMatrix<f64>>) -> Result<TrainResult> {
    config.validate()?;
    let d = data.dim();
    let mut w = match (&config.init, warm) {
        (WeightInit::GampWarm, Some(w0)) => w0.clone(),
        (WeightInit::GampWarm, None) => {
            return Err(Error::Validation("gamp warm start requested without a GAMP estimate".into()))
        }
        (WeightInit::Zero, _) => DMatrix::zeros(d, r),
        (WeightInit::Gaussian { sigma }, _) => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            DMatrix::from_fn(d, r, |_, _| sigma * rng.sample::<f64, _>(StandardNormal))
        }
    };
    if w.shape() != (d, r) {
        return Err(Error::Validation(format!("initial weights are {:?}, expected {d}x{r}", w.shape())));
    }
    let (mut f, mut g) = risk_gradient(&w, data, loss, lambda);
    let mut trace = vec![f];
    let mut step = match config.step {
        StepPolicy::Fixed { step } => step,
        StepPolicy::Backtracking { initial, .. } => initial,
    };
    let mut failed = 0usize;
    let mut iterations = 0;
    while iterations < config.max_epochs {
        let gn = g.amax();
        if !gn.is_finite() || !f.is_finite() {
            return Err(Error::LossBlowup);
        }
        if gn <= config.grad_tol {
            break;
        }
        iterations += 1;
        match config.step {
            StepPolicy::Fixed { step } => {
                w -= &g * step;
                let (nf, ng) = risk_gradient(&w, data, loss, lambda);
                f = nf;
                g = ng;
            }
            StepPolicy::Backtracking { shrink, grow, armijo, .. } => {
                let g2 = g.norm_squared();
                loop {
                    let trial = &w - &g * step;
                    let ft = empirical_risk(&trial, data, loss, lambda);
                    if ft.is_finite() && ft <= f - armijo * step * g2 {
                        w = trial;
                        let (nf, ng) = risk_gradient(&w, data, loss, lambda);
                        f = nf;
                        g = ng;
                        failed = 0;
                        step *= grow;
                        break;
                    }
                    // decrease below the resolution of f: approximate Armijo on the slope
                    if ft.is_finite() && ft <= f + APPROX_SLACK * f.abs() {
                        let (nf, ng) = risk_gradient(&trial, data, loss, lambda);
                        if g.dot(&ng) >= -(1.0 - 2.0 * armijo) * g2 {
                            w = trial;
                            f = nf;
                            g = ng;
                            failed = 0;
                            step *= grow;
                            break;
                        }
                    }
                    failed += 1;
                    if failed >= STALL_LIMIT {
                        return Err(Error::Stalled {
                            steps: failed,
                            objective: f,
                            grad_norm: g.amax(),
                        });
                    }
                    step *= shrink;
                }
            }
        }
        trace.push(f);
    }
    let grad_norm = g.amax();
    Ok(TrainResult {
        train_loss: f / d as f64,
        converged: grad_norm <= config.grad_tol,
        grad_norm,
        w_hat: w,
        iterations,
        objective_trace: trace,
    })
}
