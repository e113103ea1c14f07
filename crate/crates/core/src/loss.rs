//! Pluggable losses `l(Y, X, v, c)`.
//!
//! `Y` is `L x t` (teacher pre-activations, means included), `X` is `L x r`,
//! `v = w^T w / d` is `r x r`, `c` is the class tuple. Vectorized quantities
//! (Hessians, prox precisions) use the row-major flattening `(l, a) -> l*r + a`.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::Dimensions;

/// Row-major flattening of an `L x r` matrix.
pub fn flatten(x: &DMatrix<f64>) -> DVector<f64> {
    let (l, r) = x.shape();
    DVector::from_fn(l * r, |i, _| x[(i / r, i % r)])
}

pub fn unflatten(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| v[i * cols + j])
}

/// `||a - b|| / max(||a||, ||b||, 1e-12)`.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.norm().max(b.norm()).max(1e-12);
    (a - b).norm() / scale
}

pub trait Loss: Send + Sync + Debug {
    fn name(&self) -> String;

    fn eval(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, v: &DMatrix<f64>, class: &[usize]) -> f64;

    /// Gradient in `X`, shape `L x r`.
    fn grad_x(
        &self,
        y: &DMatrix<f64>,
        x: &DMatrix<f64>,
        v: &DMatrix<f64>,
        class: &[usize],
    ) -> DMatrix<f64>;

    /// Hessian in flattened `X` (`Lr x Lr`); `None` when unavailable or the loss
    /// is not twice differentiable at `x`.
    fn hess_x(
        &self,
        _y: &DMatrix<f64>,
        _x: &DMatrix<f64>,
        _v: &DMatrix<f64>,
        _class: &[usize],
    ) -> Option<DMatrix<f64>> {
        None
    }

    /// Mixed second derivative `d^2 l / dX dY` (`Lr x Lt`).
    fn hess_xy(
        &self,
        _y: &DMatrix<f64>,
        _x: &DMatrix<f64>,
        _v: &DMatrix<f64>,
        _class: &[usize],
    ) -> Option<DMatrix<f64>> {
        None
    }

    /// Derivative with respect to the `v` slot, `r x r`.
    fn d3(&self, _y: &DMatrix<f64>, x: &DMatrix<f64>, _v: &DMatrix<f64>, _class: &[usize]) -> DMatrix<f64> {
        DMatrix::zeros(x.ncols(), x.ncols())
    }

    /// Test metric `l_ts(c, Y, X)`.
    fn test_eval(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, v: &DMatrix<f64>, class: &[usize]) -> f64;

    fn depends_on_v(&self) -> bool {
        false
    }

    fn convex(&self) -> bool {
        true
    }

    /// Strong convexity in `X`; needed to allow `lambda = 0`.
    fn strongly_convex(&self) -> bool {
        false
    }

    fn is_smooth_at(
        &self,
        _y: &DMatrix<f64>,
        _x: &DMatrix<f64>,
        _v: &DMatrix<f64>,
        _class: &[usize],
    ) -> bool {
        true
    }

    /// Distance from `-base` to the subdifferential of `l` in `X` at `x`.
    ///
    /// Equals `||base + grad_x||` wherever the loss is smooth.
    fn subgradient_distance(
        &self,
        y: &DMatrix<f64>,
        x: &DMatrix<f64>,
        v: &DMatrix<f64>,
        class: &[usize],
        base: &DMatrix<f64>,
    ) -> f64 {
        (base + self.grad_x(y, x, v, class)).norm()
    }

    /// Exact minimizer of `1/2 (X-a)^T P (X-a) + l(Y, X, v, c)` when known.
    fn prox_closed_form(
        &self,
        _y: &DMatrix<f64>,
        _anchor: &DMatrix<f64>,
        _precision: &DMatrix<f64>,
        _v: &DMatrix<f64>,
        _class: &[usize],
    ) -> Option<DMatrix<f64>> {
        None
    }

    /// Shape compatibility with the problem dimensions.
    fn check_dimensions(&self, _dims: &Dimensions) -> Result<(), String> {
        Ok(())
    }
}

fn label_of(labels: &[f64], cluster: usize) -> f64 {
    labels.get(cluster).copied().unwrap_or(if cluster == 0 { 1.0 } else { -1.0 })
}

fn check_labels(labels: &[f64], dims: &Dimensions) -> Result<(), String> {
    let kmax = dims.clusters.iter().copied().max().unwrap_or(0);
    if labels.len() < kmax {
        return Err(format!("need {kmax} cluster labels, got {}", labels.len()));
    }
    Ok(())
}

fn misclassification(x: &DMatrix<f64>, labels: &[f64], class: &[usize]) -> f64 {
    let l = x.nrows();
    let wrong = (0..l)
        .filter(|&i| label_of(labels, class[i]) * x[(i, 0)] <= 0.0)
        .count();
    wrong as f64 / l as f64
}

/// `l = 0`, test metric `1`.
#[derive(Clone, Debug, Default)]
pub struct ZeroLoss;

impl Loss for ZeroLoss {
    fn name(&self) -> String {
        "zero".into()
    }
    fn eval(&self, _: &DMatrix<f64>, _: &DMatrix<f64>, _: &DMatrix<f64>, _: &[usize]) -> f64 {
        0.0
    }
    fn grad_x(&self, _: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, _: &[usize]) -> DMatrix<f64> {
        DMatrix::zeros(x.nrows(), x.ncols())
    }
    fn hess_x(&self, _: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, _: &[usize]) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(x.len(), x.len()))
    }
    fn hess_xy(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, _: &[usize]) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(x.len(), y.len()))
    }
    fn test_eval(&self, _: &DMatrix<f64>, _: &DMatrix<f64>, _: &DMatrix<f64>, _: &[usize]) -> f64 {
        1.0
    }
    fn prox_closed_form(
        &self,
        _: &DMatrix<f64>,
        anchor: &DMatrix<f64>,
        _: &DMatrix<f64>,
        _: &DMatrix<f64>,
        _: &[usize],
    ) -> Option<DMatrix<f64>> {
        Some(anchor.clone())
    }
}

/// Teacher-student square loss `1/2 ||Y - X||^2` (needs `r = t`).
#[derive(Clone, Debug, Default)]
pub struct SquareLoss;

impl Loss for SquareLoss {
    fn name(&self) -> String {
        "square".into()
    }
    fn eval(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, _: &[usize]) -> f64 {
        0.5 * (y - x).norm_squared()
    }
    fn grad_x(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, _: &[usize]) -> DMatrix<f64> {
        x - y
    }
    fn hess_x(&self, _: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, _: &[usize]) -> Option<DMatrix<f64>> {
        Some(DMatrix::identity(x.len(), x.len()))
    }
    fn hess_xy(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, _: &[usize]) -> Option<DMatrix<f64>> {
        Some(-DMatrix::identity(x.len(), y.len()))
    }
    fn test_eval(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, _: &[usize]) -> f64 {
        0.5 * (y - x).norm_squared()
    }
    fn strongly_convex(&self) -> bool {
        true
    }
    fn prox_closed_form(
        &self,
        y: &DMatrix<f64>,
        anchor: &DMatrix<f64>,
        precision: &DMatrix<f64>,
        _: &DMatrix<f64>,
        _: &[usize],
    ) -> Option<DMatrix<f64>> {
        let n = precision.nrows();
        let lhs = precision + DMatrix::identity(n, n);
        let rhs = precision * flatten(anchor) + flatten(y);
        let sol = lhs.lu().solve(&rhs)?;
        Some(unflatten(&sol, anchor.nrows(), anchor.ncols()))
    }
    fn check_dimensions(&self, dims: &Dimensions) -> Result<(), String> {
        if dims.student_units != dims.teacher_units {
            return Err("square loss needs student_units == teacher_units".into());
        }
        Ok(())
    }
}

/// Square loss against cluster labels, `1/2 sum_{l,a} (s_{c_l} - x_{l,a})^2`.
#[derive(Clone, Debug)]
pub struct LabelSquareLoss {
    pub labels: Vec<f64>,
}

impl LabelSquareLoss {
    fn targets(&self, x: &DMatrix<f64>, class: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |l, _| label_of(&self.labels, class[l]))
    }
}

impl Loss for LabelSquareLoss {
    fn name(&self) -> String {
        "label_square".into()
    }
    fn eval(&self, _: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, class: &[usize]) -> f64 {
        0.5 * (self.targets(x, class) - x).norm_squared()
    }
    fn grad_x(&self, _: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, class: &[usize]) -> DMatrix<f64> {
        x - self.targets(x, class)
    }
    fn hess_x(&self, _: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, _: &[usize]) -> Option<DMatrix<f64>> {
        Some(DMatrix::identity(x.len(), x.len()))
    }
    fn hess_xy(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, _: &[usize]) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(x.len(), y.len()))
    }
    fn test_eval(&self, _: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, class: &[usize]) -> f64 {
        misclassification(x, &self.labels, class)
    }
    fn strongly_convex(&self) -> bool {
        true
    }
    fn prox_closed_form(
        &self,
        _: &DMatrix<f64>,
        anchor: &DMatrix<f64>,
        precision: &DMatrix<f64>,
        _: &DMatrix<f64>,
        class: &[usize],
    ) -> Option<DMatrix<f64>> {
        let n = precision.nrows();
        let lhs = precision + DMatrix::identity(n, n);
        let rhs = precision * flatten(anchor) + flatten(&self.targets(anchor, class));
        let sol = lhs.lu().solve(&rhs)?;
        Some(unflatten(&sol, anchor.nrows(), anchor.ncols()))
    }
    fn check_dimensions(&self, dims: &Dimensions) -> Result<(), String> {
        check_labels(&self.labels, dims)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic loss on cluster labels, `sum_{l,a} log(1 + exp(-s_{c_l} x_{l,a}))`.
#[derive(Clone, Debug)]
pub struct LogisticLoss {
    pub labels: Vec<f64>,
}

impl Loss for LogisticLoss {
    fn name(&self) -> String {
        "logistic".into()
    }
    fn eval(&self, _: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, class: &[usize]) -> f64 {
        let mut acc = 0.0;
        for l in 0..x.nrows() {
            let s = label_of(&self.labels, class[l]);
            for a in 0..x.ncols() {
                acc += softplus(-s * x[(l, a)]);
            }
        }
        acc
    }
    fn grad_x(&self, _: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, class: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |l, a| {
            let s = label_of(&self.labels, class[l]);
            -s * sigmoid(-s * x[(l, a)])
        })
    }
    fn hess_x(&self, _: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, _: &[usize]) -> Option<DMatrix<f64>> {
        let f = flatten(x);
        let n = f.len();
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            let p = sigmoid(f[i]);
            h[(i, i)] = p * (1.0 - p);
        }
        Some(h)
    }
    fn hess_xy(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, _: &[usize]) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(x.len(), y.len()))
    }
    fn test_eval(&self, _: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, class: &[usize]) -> f64 {
        misclassification(x, &self.labels, class)
    }
    fn check_dimensions(&self, dims: &Dimensions) -> Result<(), String> {
        check_labels(&self.labels, dims)
    }
}

/// Hinge loss on the first unit of every token, `sum_l max(0, 1 - s_{c_l} x_{l,0})`.
#[derive(Clone, Debug)]
pub struct HingeLoss {
    pub labels: Vec<f64>,
}

impl HingeLoss {
    fn margin(&self, x: &DMatrix<f64>, class: &[usize], l: usize) -> f64 {
        1.0 - label_of(&self.labels, class[l]) * x[(l, 0)]
    }
}

impl Loss for HingeLoss {
    fn name(&self) -> String {
        "hinge".into()
    }
    fn eval(&self, _: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, class: &[usize]) -> f64 {
        (0..x.nrows()).map(|l| self.margin(x, class, l).max(0.0)).sum()
    }
    fn grad_x(&self, _: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, class: &[usize]) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(x.nrows(), x.ncols());
        for l in 0..x.nrows() {
            if self.margin(x, class, l) > 0.0 {
                g[(l, 0)] = -label_of(&self.labels, class[l]);
            }
        }
        g
    }
    fn hess_x(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, v: &DMatrix<f64>, class: &[usize]) -> Option<DMatrix<f64>> {
        if self.is_smooth_at(y, x, v, class) {
            Some(DMatrix::zeros(x.len(), x.len()))
        } else {
            None
        }
    }
    fn hess_xy(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, _: &[usize]) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(x.len(), y.len()))
    }
    fn test_eval(&self, _: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, class: &[usize]) -> f64 {
        misclassification(x, &self.labels, class)
    }
    fn is_smooth_at(&self, _: &DMatrix<f64>, x: &DMatrix<f64>, _: &DMatrix<f64>, class: &[usize]) -> bool {
        (0..x.nrows()).all(|l| self.margin(x, class, l).abs() > 1e-9)
    }
    fn subgradient_distance(
        &self,
        _: &DMatrix<f64>,
        x: &DMatrix<f64>,
        _: &DMatrix<f64>,
        class: &[usize],
        base: &DMatrix<f64>,
    ) -> f64 {
        let mut acc = 0.0;
        for l in 0..x.nrows() {
            for a in 1..x.ncols() {
                acc += base[(l, a)].powi(2);
            }
            let s = label_of(&self.labels, class[l]);
            let m = self.margin(x, class, l);
            let g = base[(l, 0)];
            let res = if m > 1e-9 {
                g - s
            } else if m < -1e-9 {
                g
            } else {
                let beta = (g * s).clamp(0.0, 1.0);
                g - s * beta
            };
            acc += res * res;
        }
        acc.sqrt()
    }
    fn prox_closed_form(
        &self,
        _: &DMatrix<f64>,
        anchor: &DMatrix<f64>,
        precision: &DMatrix<f64>,
        _: &DMatrix<f64>,
        class: &[usize],
    ) -> Option<DMatrix<f64>> {
        hinge_prox_active_set(anchor, precision, class, &self.labels)
    }
    fn check_dimensions(&self, dims: &Dimensions) -> Result<(), String> {
        check_labels(&self.labels, dims)
    }
}

/// Token state in the hinge KKT enumeration.
#[derive(Clone, Copy, PartialEq)]
enum HingeState {
    Inactive,
    Active,
    Kink,
}

/// Exact hinge prox by enumerating per-token KKT states (3^L systems).
///
/// The objective is convex and piecewise quadratic, so the first KKT-consistent
/// state assignment is the minimizer.
fn hinge_prox_active_set(
    anchor: &DMatrix<f64>,
    precision: &DMatrix<f64>,
    class: &[usize],
    labels: &[f64],
) -> Option<DMatrix<f64>> {
    let (l, r) = anchor.shape();
    let n = l * r;
    let a = flatten(anchor);
    let pa = precision * &a;
    let total = 3usize.pow(l as u32);
    let tol = 1e-12;
    for code in 0..total {
        let mut states = Vec::with_capacity(l);
        let mut c = code;
        for _ in 0..l {
            states.push(match c % 3 {
                0 => HingeState::Inactive,
                1 => HingeState::Active,
                _ => HingeState::Kink,
            });
            c /= 3;
        }
        let kinks: Vec<usize> = (0..l).filter(|&t| states[t] == HingeState::Kink).collect();
        let m = n + kinks.len();
        // [P  -E][x]   = [P a + active subgradients]
        // [E^T 0][beta]  [s]
        let mut lhs = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        lhs.view_mut((0, 0), (n, n)).copy_from(precision);
        for i in 0..n {
            rhs[i] = pa[i];
        }
        for t in 0..l {
            let s = label_of(labels, class[t]);
            if states[t] == HingeState::Active {
                rhs[t * r] += s;
            }
        }
        for (j, &t) in kinks.iter().enumerate() {
            let s = label_of(labels, class[t]);
            // subgradient of the kink token is -s * beta, moved to the lhs
            lhs[(t * r, n + j)] = -s;
            lhs[(n + j, t * r)] = 1.0;
            rhs[n + j] = s;
        }
        let sol = match lhs.lu().solve(&rhs) {
            Some(s) => s,
            None => continue,
        };
        let x = sol.rows(0, n).into_owned();
        let consistent = (0..l).all(|t| {
            let s = label_of(labels, class[t]);
            let margin = 1.0 - s * x[t * r];
            match states[t] {
                HingeState::Inactive => margin <= tol,
                HingeState::Active => margin >= -tol,
                HingeState::Kink => {
                    let j = kinks.iter().position(|&k| k == t).unwrap();
                    let beta = sol[n + j];
                    (-tol..=1.0 + tol).contains(&beta)
                }
            }
        });
        if consistent {
            return Some(unflatten(&x, l, r));
        }
    }
    None
}

/// Adds `a Tr(v) + b/2 Tr(v^2)` to an inner loss, making it depend on `v`.
#[derive(Clone, Debug)]
pub struct VPenalized {
    pub inner: Arc<dyn Loss>,
    pub trace: f64,
    pub quad: f64,
}

impl Loss for VPenalized {
    fn name(&self) -> String {
        format!("{}+v_penalty", self.inner.name())
    }
    fn eval(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, v: &DMatrix<f64>, class: &[usize]) -> f64 {
        self.inner.eval(y, x, v, class) + self.trace * v.trace() + 0.5 * self.quad * (v * v).trace()
    }
    fn grad_x(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, v: &DMatrix<f64>, class: &[usize]) -> DMatrix<f64> {
        self.inner.grad_x(y, x, v, class)
    }
    fn hess_x(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, v: &DMatrix<f64>, class: &[usize]) -> Option<DMatrix<f64>> {
        self.inner.hess_x(y, x, v, class)
    }
    fn hess_xy(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, v: &DMatrix<f64>, class: &[usize]) -> Option<DMatrix<f64>> {
        self.inner.hess_xy(y, x, v, class)
    }
    fn d3(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, v: &DMatrix<f64>, class: &[usize]) -> DMatrix<f64> {
        let r = v.nrows();
        // d/dv_ij Tr(v^2)/2 = v_ji
        self.inner.d3(y, x, v, class) + DMatrix::identity(r, r) * self.trace + v.transpose() * self.quad
    }
    fn test_eval(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, v: &DMatrix<f64>, class: &[usize]) -> f64 {
        self.inner.test_eval(y, x, v, class)
    }
    fn depends_on_v(&self) -> bool {
        self.trace != 0.0 || self.quad != 0.0 || self.inner.depends_on_v()
    }
    fn convex(&self) -> bool {
        self.inner.convex()
    }
    fn strongly_convex(&self) -> bool {
        self.inner.strongly_convex()
    }
    fn is_smooth_at(&self, y: &DMatrix<f64>, x: &DMatrix<f64>, v: &DMatrix<f64>, class: &[usize]) -> bool {
        self.inner.is_smooth_at(y, x, v, class)
    }
    fn subgradient_distance(
        &self,
        y: &DMatrix<f64>,
        x: &DMatrix<f64>,
        v: &DMatrix<f64>,
        class: &[usize],
        base: &DMatrix<f64>,
    ) -> f64 {
        self.inner.subgradient_distance(y, x, v, class, base)
    }
    fn prox_closed_form(
        &self,
        y: &DMatrix<f64>,
        anchor: &DMatrix<f64>,
        precision: &DMatrix<f64>,
        v: &DMatrix<f64>,
        class: &[usize],
    ) -> Option<DMatrix<f64>> {
        // the v terms are constant in X
        self.inner.prox_closed_form(y, anchor, precision, v, class)
    }
    fn check_dimensions(&self, dims: &Dimensions) -> Result<(), String> {
        self.inner.check_dimensions(dims)
    }
}

/// Serializable loss selector used in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum LossKind {
    Zero,
    Square,
    LabelSquare { labels: Vec<f64> },
    Logistic { labels: Vec<f64> },
    Hinge { labels: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VPenalty {
    #[serde(default)]
    pub trace: f64,
    #[serde(default)]
    pub quad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(flatten)]
    pub kind: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_penalty: Option<VPenalty>,
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            v_penalty: None,
        }
    }

    pub fn build(&self) -> Arc<dyn Loss> {
        let base: Arc<dyn Loss> = match &self.kind {
            LossKind::Zero => Arc::new(ZeroLoss),
            LossKind::Square => Arc::new(SquareLoss),
            LossKind::LabelSquare { labels } => Arc::new(LabelSquareLoss {
                labels: labels.clone(),
            }),
            LossKind::Logistic { labels } => Arc::new(LogisticLoss {
                labels: labels.clone(),
            }),
            LossKind::Hinge { labels } => Arc::new(HingeLoss {
                labels: labels.clone(),
            }),
        };
        match &self.v_penalty {
            Some(p) => Arc::new(VPenalized {
                inner: base,
                trace: p.trace,
                quad: p.quad,
            }),
            None => base,
        }
    }
}
