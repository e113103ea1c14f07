//! Zero-temperature saddle-point equations and their time-indexed (state
//! evolution) reading.
//!
//! One sweep maps overlaps to hats through the energetic expectation
//! ([`update_hats`]) and hats back to overlaps through the spectral integrals
//! ([`update_overlaps`]).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{self, EnergeticChannel, ExpectationRule, JointChannel};
use crate::linalg;
use crate::loss::{flatten, Loss};
use crate::model::{ClusterMap, ConjugateParameters, Dimensions, FixedStatistics, ModelSpec, OrderParameters, SpectralMeasure};
use crate::prox::{self, ProxOptions, ProxProblem};

/// Which expression is used for the variance conjugate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceHatForm {
    /// Stein form when `q` is invertible, Jacobian form otherwise.
    #[default]
    Auto,
    /// `theta_hat theta^T q^-1 - alpha E[V^-1 D xi^T q^{-1/2}]`.
    Stein,
    /// `alpha E[V^-1 (I - dprox/danchor)]`.
    Jacobian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// `q = eps I`, `V = I`, `m = 0`, `theta = 0`, `v = eps I`.
    Cold,
    /// Statistics of the message-passing start `w = 0`.
    Algorithmic,
    /// `theta` seeded from the teacher.
    Informed,
    Warm { params: Box<OrderParameters> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_init")]
    pub init: Init,
    #[serde(default = "default_eps")]
    pub eps_init: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub rule: ExpectationRule,
    /// Rule for the test error; defaults to `rule`.
    #[serde(default)]
    pub test_rule: Option<ExpectationRule>,
    #[serde(default)]
    pub record_trajectory: bool,
    #[serde(default)]
    pub variance_hat: VarianceHatForm,
}

fn default_damping() -> f64 {
    0.5
}
fn default_init() -> Init {
    Init::Cold
}
fn default_eps() -> f64 {
    1e-3
}
fn default_tol() -> f64 {
    1e-8
}
fn default_max_iters() -> usize {
    1000
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            damping: default_damping(),
            init: default_init(),
            eps_init: default_eps(),
            tol: default_tol(),
            max_iters: default_max_iters(),
            rule: ExpectationRule::default(),
            test_rule: None,
            record_trajectory: false,
            variance_hat: VarianceHatForm::Auto,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::Validation(format!("damping must lie in [0, 1), got {}", self.damping)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Validation("tol must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Validation("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Hats together with the envelope average computed in the same pass.
#[derive(Clone, Debug)]
pub struct HatUpdate {
    pub conj: ConjugateParameters,
    /// `E[M(c, Y, Xi)]` and its standard error.
    pub envelope: (f64, f64),
    /// Largest standard error over all hat entries.
    pub max_stderr: f64,
    pub used_jacobian: bool,
}

struct Layout {
    r: usize,
    t: usize,
    slots: usize,
}

impl Layout {
    fn per_slot(&self) -> usize {
        2 * self.r * self.r + self.r + self.r * self.t
    }
    fn slot(&self, s: usize) -> usize {
        s * self.per_slot()
    }
    fn global(&self) -> usize {
        self.slots * self.per_slot()
    }
    fn width(&self) -> usize {
        self.global() + self.r * self.r + 1
    }
}

fn variance_inverses(params: &OrderParameters) -> Result<ClusterMap<DMatrix<f64>>> {
    let counts = params.variance.cluster_counts();
    ClusterMap::try_from_fn(&counts, |l, k| {
        let v = params.variance.get(l, k);
        linalg::sym_inv(v).ok_or_else(|| Error::NegativeEigenvalue {
            eigenvalue: linalg::min_eigenvalue(v),
        })
    })
}

/// One evaluation of the hat equations at `params`.
pub fn update_hats(
    params: &OrderParameters,
    fixed: &FixedStatistics,
    spec: &ModelSpec,
    loss: &dyn Loss,
    rule: &ExpectationRule,
    form: VarianceHatForm,
    opts: &ProxOptions,
) -> Result<HatUpdate> {
    let dims = &spec.dimensions;
    let r = dims.student_units;
    let t = dims.teacher_units;
    let alpha = dims.alpha;
    let channel = EnergeticChannel::new(params, fixed)?;
    let v_inv = variance_inverses(params)?;
    let q_invertible = params.q.values().iter().all(linalg::is_invertible_psd);
    let use_jacobian = match form {
        VarianceHatForm::Auto => !q_invertible,
        VarianceHatForm::Stein => false,
        VarianceHatForm::Jacobian => true,
    };
    let layout = Layout {
        r,
        t,
        slots: params.q.len(),
    };
    let width = layout.width();
    let law = &spec.class_law;

    let e = gaussian::expect_over_measure(law, &channel, rule, width, |class, sample| {
        let l = class.len();
        let mut anchor = DMatrix::zeros(l, r);
        let mut y_full = DMatrix::zeros(l, t);
        let mut blocks = Vec::with_capacity(l);
        for (tok, &k) in class.iter().enumerate() {
            let xi = sample.xi.row(tok).transpose();
            let a = &channel.tokens.get(tok, k).q_half * xi + params.m.get(tok, k);
            anchor.set_row(tok, &a.transpose());
            let y = sample.y.row(tok).transpose() + fixed.m_star.get(tok, k);
            y_full.set_row(tok, &y.transpose());
            blocks.push(v_inv.get(tok, k));
        }
        let problem = ProxProblem::blockwise(anchor.clone(), &blocks, y_full.clone(), params.v.clone(), class.to_vec());
        let res = prox::moreau_prox(&problem, loss, opts)?;
        let jac = if use_jacobian {
            Some(prox::prox_jacobians(&problem, loss, &res.x, opts)?.d_anchor)
        } else {
            None
        };
        let mut out = vec![0.0; width];
        for (tok, &k) in class.iter().enumerate() {
            let vi = v_inv.get(tok, k);
            let d = (res.x.row(tok) - anchor.row(tok)).transpose();
            let u = vi * d;
            let xi = sample.xi.row(tok).transpose();
            let ch = channel.tokens.get(tok, k);
            let y_res = sample.y.row(tok).transpose() - ch.y_mean(&xi);
            let base = layout.slot(params.q.slot(tok, k));
            let mut o = base;
            for a in 0..r {
                for b in 0..r {
                    out[o] = u[a] * u[b];
                    o += 1;
                }
            }
            for a in 0..r {
                out[o] = u[a];
                o += 1;
            }
            for a in 0..r {
                for b in 0..t {
                    out[o] = u[a] * y_res[b];
                    o += 1;
                }
            }
            match &jac {
                Some(j) => {
                    let block = j.view((tok * r, tok * r), (r, r));
                    let m = vi * (DMatrix::identity(r, r) - block);
                    for a in 0..r {
                        for b in 0..r {
                            out[o] = m[(a, b)];
                            o += 1;
                        }
                    }
                }
                None => {
                    for a in 0..r {
                        for b in 0..r {
                            out[o] = u[a] * xi[b];
                            o += 1;
                        }
                    }
                }
            }
        }
        let d3 = loss.d3(&y_full, &res.x, &params.v, class);
        let g = layout.global();
        for a in 0..r {
            for b in 0..r {
                out[g + a * r + b] = d3[(a, b)];
            }
        }
        out[g + r * r] = res.value;
        Ok(out)
    })?;

    let mean = &e.mean;
    let counts = params.q.cluster_counts();
    let read = |off: usize, rows: usize, cols: usize| DMatrix::from_fn(rows, cols, |i, j| mean[off + i * cols + j]);
    let mut q_hat = Vec::new();
    let mut m_hat = Vec::new();
    let mut theta_hat = Vec::new();
    let mut variance_hat = Vec::new();
    for (s, (l, k, q)) in params.q.iter().enumerate() {
        let base = layout.slot(s);
        let quu = read(base, r, r);
        let mu = DVector::from_fn(r, |i, _| mean[base + r * r + i]);
        let uy = read(base + r * r + r, r, t);
        let extra = read(base + r * r + r + r * t, r, r);
        let ch = channel.tokens.get(l, k);
        let th = uy * alpha * linalg::sym_pinv(&ch.cov);
        let vh = if use_jacobian {
            extra * alpha
        } else {
            &th * params.theta.get(l, k).transpose() * linalg::sym_pinv(q) - extra * alpha * &ch.q_pinv_half
        };
        q_hat.push(linalg::symmetrize(&(quu * alpha)));
        m_hat.push(mu * alpha);
        theta_hat.push(th);
        variance_hat.push(linalg::symmetrize(&vh));
    }
    let g = layout.global();
    let v_hat = linalg::symmetrize(&(read(g, r, r) * (2.0 * alpha)));
    let split = |vals: Vec<DMatrix<f64>>| {
        let mut it = vals.into_iter();
        ClusterMap::from_fn(&counts, |_, _| it.next().unwrap())
    };
    let mut mit = m_hat.into_iter();
    let conj = ConjugateParameters {
        q_hat: split(q_hat),
        variance_hat: split(variance_hat),
        m_hat: ClusterMap::from_fn(&counts, |_, _| mit.next().unwrap()),
        theta_hat: split(theta_hat),
        v_hat,
    };
    let max_stderr = alpha * e.stderr[..g + r * r].iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(HatUpdate {
        conj,
        envelope: (mean[g + r * r], e.stderr[g + r * r]),
        max_stderr,
        used_jacobian: use_jacobian,
    })
}

/// Per-atom resolvent pieces.
#[derive(Clone, Debug)]
pub struct AtomTerms {
    pub resolvent: DMatrix<f64>,
    pub source: DVector<f64>,
    pub kernel: DMatrix<f64>,
}

/// Resolvent `R`, source `S` and kernel `K` at every atom.
pub fn atom_terms(conj: &ConjugateParameters, nu: &SpectralMeasure, dims: &Dimensions) -> Result<Vec<AtomTerms>> {
    let r = dims.student_units;
    nu.atoms
        .iter()
        .enumerate()
        .map(|(i, atom)| {
            let mut a = DMatrix::identity(r, r) * dims.lambda + &conj.v_hat;
            let mut source = DVector::zeros(r);
            let mut kernel = DMatrix::zeros(r, r);
            let pi = DVector::from_column_slice(&atom.pi);
            for (l, k, &g) in atom.gamma.iter() {
                a += conj.variance_hat.get(l, k) * g;
                source += conj.m_hat.get(l, k) * *atom.tau.get(l, k) + conj.theta_hat.get(l, k) * &pi * g;
                kernel += conj.q_hat.get(l, k) * g;
            }
            kernel += &source * source.transpose();
            let resolvent = linalg::inverse_with_sv(&a).map_err(|smin| Error::SingularResolvent {
                atom: i,
                min_singular: smin,
            })?;
            Ok(AtomTerms {
                resolvent,
                source,
                kernel,
            })
        })
        .collect()
}

/// Spectral-integral side of the saddle-point equations.
pub fn update_overlaps(conj: &ConjugateParameters, nu: &SpectralMeasure, dims: &Dimensions) -> Result<OrderParameters> {
    let terms = atom_terms(conj, nu, dims)?;
    Ok(overlaps_from_terms(&terms, nu, dims))
}

fn overlaps_from_terms(terms: &[AtomTerms], nu: &SpectralMeasure, dims: &Dimensions) -> OrderParameters {
    let r = dims.student_units;
    let t = dims.teacher_units;
    let c = &dims.clusters;
    let mut q = ClusterMap::from_fn(c, |_, _| DMatrix::zeros(r, r));
    let mut variance = ClusterMap::from_fn(c, |_, _| DMatrix::zeros(r, r));
    let mut m = ClusterMap::from_fn(c, |_, _| DVector::zeros(r));
    let mut theta = ClusterMap::from_fn(c, |_, _| DMatrix::zeros(r, t));
    let mut v = DMatrix::zeros(r, r);
    for (atom, term) in nu.atoms.iter().zip(terms) {
        let w = atom.weight;
        let rr = &term.resolvent;
        let rkr = rr * &term.kernel * rr.transpose();
        let rs = rr * &term.source;
        let pi = DVector::from_column_slice(&atom.pi);
        for (l, k, &g) in atom.gamma.iter() {
            *variance.get_mut(l, k) += rr * (w * g);
            *q.get_mut(l, k) += &rkr * (w * g);
            *m.get_mut(l, k) += &rs * (w * *atom.tau.get(l, k));
            *theta.get_mut(l, k) += &rs * pi.transpose() * (w * g);
        }
        v += rkr * w;
    }
    OrderParameters {
        q: q.map(|_, _, a| linalg::symmetrize(a)),
        variance: variance.map(|_, _, a| linalg::symmetrize(a)),
        m,
        theta,
        v: linalg::symmetrize(&v),
    }
}

/// One SE trajectory entry: overlaps at time `t` and the hats computed from them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    pub params: OrderParameters,
    pub conj: ConjugateParameters,
    pub residual: f64,
}

/// Value with a Monte Carlo standard error (zero under quadrature).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub params: OrderParameters,
    pub conj: ConjugateParameters,
    pub residual_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub free_entropy: Estimate,
    pub test_error: Estimate,
    pub train_loss: Estimate,
    /// Largest Monte Carlo standard error of the hats at the final point.
    pub hat_stderr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<TrajectoryPoint>>,
}

fn rel_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    (new - old).norm() / (1.0 + old.norm())
}

fn rel_change_vec(new: &DVector<f64>, old: &DVector<f64>) -> f64 {
    (new - old).norm() / (1.0 + old.norm())
}

/// Max relative change over all overlap blocks (`v` only when the loss sees it).
pub fn overlap_change(new: &OrderParameters, old: &OrderParameters, include_v: bool) -> f64 {
    let mut worst = 0.0f64;
    for (a, b) in new.q.values().iter().zip(old.q.values()) {
        worst = worst.max(rel_change(a, b));
    }
    for (a, b) in new.variance.values().iter().zip(old.variance.values()) {
        worst = worst.max(rel_change(a, b));
    }
    for (a, b) in new.m.values().iter().zip(old.m.values()) {
        worst = worst.max(rel_change_vec(a, b));
    }
    for (a, b) in new.theta.values().iter().zip(old.theta.values()) {
        worst = worst.max(rel_change(a, b));
    }
    if include_v {
        worst = worst.max(rel_change(&new.v, &old.v));
    }
    worst
}

pub fn hat_change(new: &ConjugateParameters, old: &ConjugateParameters, include_v: bool) -> f64 {
    let mut worst = 0.0f64;
    for (a, b) in new.q_hat.values().iter().zip(old.q_hat.values()) {
        worst = worst.max(rel_change(a, b));
    }
    for (a, b) in new.variance_hat.values().iter().zip(old.variance_hat.values()) {
        worst = worst.max(rel_change(a, b));
    }
    for (a, b) in new.m_hat.values().iter().zip(old.m_hat.values()) {
        worst = worst.max(rel_change_vec(a, b));
    }
    for (a, b) in new.theta_hat.values().iter().zip(old.theta_hat.values()) {
        worst = worst.max(rel_change(a, b));
    }
    if include_v {
        worst = worst.max(rel_change(&new.v_hat, &old.v_hat));
    }
    worst
}

fn mix_mat(new: &DMatrix<f64>, old: &DMatrix<f64>, eta: f64) -> DMatrix<f64> {
    new * (1.0 - eta) + old * eta
}

fn damp_overlaps(new: &OrderParameters, old: &OrderParameters, eta: f64) -> OrderParameters {
    if eta == 0.0 {
        return new.clone();
    }
    OrderParameters {
        q: new.q.zip_map(&old.q, |a, b| mix_mat(a, b, eta)),
        variance: new.variance.zip_map(&old.variance, |a, b| mix_mat(a, b, eta)),
        m: new.m.zip_map(&old.m, |a, b| a * (1.0 - eta) + b * eta),
        theta: new.theta.zip_map(&old.theta, |a, b| mix_mat(a, b, eta)),
        v: mix_mat(&new.v, &old.v, eta),
    }
}

fn damp_hats(new: &ConjugateParameters, old: &ConjugateParameters, eta: f64) -> ConjugateParameters {
    if eta == 0.0 {
        return new.clone();
    }
    ConjugateParameters {
        q_hat: new.q_hat.zip_map(&old.q_hat, |a, b| mix_mat(a, b, eta)),
        variance_hat: new.variance_hat.zip_map(&old.variance_hat, |a, b| mix_mat(a, b, eta)),
        m_hat: new.m_hat.zip_map(&old.m_hat, |a, b| a * (1.0 - eta) + b * eta),
        theta_hat: new.theta_hat.zip_map(&old.theta_hat, |a, b| mix_mat(a, b, eta)),
        v_hat: mix_mat(&new.v_hat, &old.v_hat, eta),
    }
}

fn initial_params(spec: &ModelSpec, fixed: &FixedStatistics, config: &SolverConfig) -> OrderParameters {
    let dims = &spec.dimensions;
    match &config.init {
        Init::Cold => OrderParameters::cold(dims, config.eps_init),
        Init::Algorithmic => OrderParameters::algorithmic_start(dims, &spec.spectrum),
        Init::Informed => OrderParameters::informed(dims, fixed, config.eps_init),
        Init::Warm { params } => (**params).clone(),
    }
}

/// Solver state shared by the sweep and the metrics.
pub struct Saddle<'a> {
    pub spec: &'a ModelSpec,
    pub loss: &'a dyn Loss,
    pub fixed: FixedStatistics,
    pub prox: ProxOptions,
}

impl<'a> Saddle<'a> {
    pub fn new(spec: &'a ModelSpec, loss: &'a dyn Loss) -> Result<Self> {
        crate::model::validate_with_loss(spec, loss).into_result()?;
        Ok(Self {
            fixed: spec.fixed_statistics()?,
            spec,
            loss,
            prox: ProxOptions::default(),
        })
    }

    pub fn hats(&self, params: &OrderParameters, rule: &ExpectationRule, form: VarianceHatForm) -> Result<HatUpdate> {
        update_hats(params, &self.fixed, self.spec, self.loss, rule, form, &self.prox)
    }

    pub fn overlaps(&self, conj: &ConjugateParameters) -> Result<OrderParameters> {
        update_overlaps(conj, &self.spec.spectrum, &self.spec.dimensions)
    }

    /// Damped alternation of hats and overlaps, hats first.
    pub fn solve(&self, config: &SolverConfig) -> Result<FixedPointReport> {
        config.validate()?;
        let include_v = self.loss.depends_on_v();
        let eta = config.damping;
        let mut params = initial_params(self.spec, &self.fixed, config);
        let mut conj: Option<ConjugateParameters> = None;
        let mut history = Vec::new();
        let mut trajectory = config.record_trajectory.then(Vec::new);
        let mut converged = false;
        let mut iterations = 0;
        for it in 0..config.max_iters {
            iterations = it + 1;
            let rule = config.rule.for_iteration(it);
            let update = self.hats(&params, &rule, config.variance_hat).map_err(|e| with_iteration(e, it))?;
            let proposed_hats = update.conj;
            let hat_res = conj.as_ref().map_or(f64::INFINITY, |old| hat_change(&proposed_hats, old, include_v));
            let hats = match &conj {
                Some(old) => damp_hats(&proposed_hats, old, eta),
                None => proposed_hats,
            };
            let proposed = self.overlaps(&hats)?;
            let overlap_res = overlap_change(&proposed, &params, include_v);
            let residual = if it == 0 { overlap_res } else { overlap_res.max(hat_res) };
            if let Some(tr) = trajectory.as_mut() {
                tr.push(TrajectoryPoint {
                    iteration: it,
                    params: params.clone(),
                    conj: hats.clone(),
                    residual,
                });
            }
            history.push(residual);
            if !residual.is_finite() || residual > 1e6 {
                return Err(Error::Divergence {
                    iteration: it,
                    residual,
                    residual_history: history,
                });
            }
            params = damp_overlaps(&proposed, &params, eta);
            conj = Some(hats);
            if residual <= config.tol && it > 0 {
                converged = true;
                break;
            }
        }
        let final_rule = config.rule.for_iteration(iterations);
        let update = self.hats(&params, &final_rule, config.variance_hat)?;
        let terms = atom_terms(&update.conj, &self.spec.spectrum, &self.spec.dimensions)?;
        let free_entropy = free_entropy_from(&params, &update, &terms, &self.spec.spectrum, &self.spec.dimensions);
        let train_loss = train_loss_from(&params, &update, &terms, &self.spec.spectrum, &self.spec.dimensions);
        let test_rule = config.test_rule.as_ref().unwrap_or(&config.rule);
        let test_error = test_error(&params, &self.fixed, self.spec, self.loss, test_rule)?;
        Ok(FixedPointReport {
            params,
            conj: update.conj,
            residual_history: history,
            iterations,
            converged,
            free_entropy,
            test_error,
            train_loss,
            hat_stderr: update.max_stderr,
            trajectory,
        })
    }
}

fn with_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::SampleProx { sample, source, .. } => Error::SampleProx {
            sample,
            iteration,
            source,
        },
        other => other,
    }
}

/// Convenience wrapper: builds the loss from the spec and solves.
pub fn solve_fixed_point(spec: &ModelSpec, config: &SolverConfig) -> Result<FixedPointReport> {
    let loss = spec.build_loss();
    Saddle::new(spec, loss.as_ref())?.solve(config)
}

fn free_entropy_from(params: &OrderParameters, hats: &HatUpdate, terms: &[AtomTerms], nu: &SpectralMeasure, dims: &Dimensions) -> Estimate {
    let conj = &hats.conj;
    let mut phi = 0.0;
    for s in 0..params.q.len() {
        let q = &params.q.values()[s];
        let var = &params.variance.values()[s];
        phi += 0.5 * (q * conj.variance_hat.values()[s].transpose()).trace();
        phi -= 0.5 * (var * conj.q_hat.values()[s].transpose()).trace();
        phi -= (&params.theta.values()[s] * conj.theta_hat.values()[s].transpose()).trace();
        phi -= conj.m_hat.values()[s].dot(&params.m.values()[s]);
    }
    phi += 0.5 * (&params.v * &conj.v_hat).trace();
    phi -= dims.alpha * hats.envelope.0;
    for (atom, term) in nu.atoms.iter().zip(terms) {
        phi += 0.5 * atom.weight * (&term.resolvent * &term.kernel).trace();
    }
    Estimate {
        value: phi,
        stderr: dims.alpha * hats.envelope.1,
    }
}

fn train_loss_from(params: &OrderParameters, hats: &HatUpdate, terms: &[AtomTerms], nu: &SpectralMeasure, dims: &Dimensions) -> Estimate {
    let mut eps = dims.alpha * hats.envelope.0;
    for (atom, term) in nu.atoms.iter().zip(terms) {
        let rr = &term.resolvent;
        eps += 0.5 * dims.lambda * atom.weight * (rr * rr * &term.kernel).trace();
    }
    for s in 0..params.q.len() {
        eps -= 0.5 * (&hats.conj.q_hat.values()[s] * &params.variance.values()[s]).trace();
    }
    Estimate {
        value: eps,
        stderr: dims.alpha * hats.envelope.1,
    }
}

/// Replica free entropy at `(params, hats(params))`.
pub fn free_entropy(saddle: &Saddle, params: &OrderParameters, rule: &ExpectationRule) -> Result<Estimate> {
    let hats = saddle.hats(params, rule, VarianceHatForm::Auto)?;
    let dims = &saddle.spec.dimensions;
    let terms = atom_terms(&hats.conj, &saddle.spec.spectrum, dims)?;
    Ok(free_entropy_from(params, &hats, &terms, &saddle.spec.spectrum, dims))
}

/// Asymptotic training loss per dimension at `(params, hats(params))`.
pub fn train_loss(saddle: &Saddle, params: &OrderParameters, rule: &ExpectationRule) -> Result<Estimate> {
    let hats = saddle.hats(params, rule, VarianceHatForm::Auto)?;
    let dims = &saddle.spec.dimensions;
    let terms = atom_terms(&hats.conj, &saddle.spec.spectrum, dims)?;
    Ok(train_loss_from(params, &hats, &terms, &saddle.spec.spectrum, dims))
}

/// `E_{c, X, Y}[l_ts(c, Y, X)]` under the joint law of the overlaps.
pub fn test_error(params: &OrderParameters, fixed: &FixedStatistics, spec: &ModelSpec, loss: &dyn Loss, rule: &ExpectationRule) -> Result<Estimate> {
    let channel = JointChannel::new(params, fixed)?;
    let e = gaussian::expect_joint(&spec.class_law, &channel, rule, 1, |class, x, y| Ok(vec![loss.test_eval(y, x, &params.v, class)]))?;
    Ok(Estimate {
        value: e.mean[0],
        stderr: e.stderr[0],
    })
}

/// Flattened overlap vector, re-exported for tables.
pub fn flat_overlaps(params: &OrderParameters) -> Vec<f64> {
    params.flatten()
}

/// `vec(theta)` convenience for one slot.
pub fn theta_vec(params: &OrderParameters, token: usize, cluster: usize) -> DVector<f64> {
    flatten(params.theta.get(token, cluster))
}
