//! Gaussian channels and the expectation engine.
//!
//! Every expectation is over a class tuple drawn from the class law and a
//! standard normal "core" matrix of shape `L x (r + t)`. Channels turn the core
//! into the variables of interest: `(Xi, Y)` for the energetic term, `(X, Y)` for
//! the test error.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, pairwise_sum};
use crate::model::{ClassLaw, ClusterMap, FixedStatistics, OrderParameters};

/// Evaluation units handled sequentially inside one parallel task.
const CHUNK: usize = 256;

/// Seeded Monte Carlo plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McPlan {
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub antithetic: bool,
    /// Reuse the same draws at every solver iteration.
    #[serde(default = "yes")]
    pub crn: bool,
}

fn yes() -> bool {
    true
}

impl Default for McPlan {
    fn default() -> Self {
        Self {
            n_samples: 4096,
            seed: 0,
            antithetic: true,
            crn: true,
        }
    }
}

impl McPlan {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        Self {
            n_samples,
            seed,
            ..Self::default()
        }
    }

    /// Plan used at solver iteration `t`: unchanged under CRN, reseeded otherwise.
    pub fn for_iteration(&self, t: usize) -> McPlan {
        let mut p = self.clone();
        if !self.crn {
            p.seed = splitmix(self.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        }
        p
    }

    /// Number of independent units (antithetic pairs count once).
    pub fn units(&self) -> usize {
        if self.antithetic {
            (self.n_samples / 2).max(1)
        } else {
            self.n_samples.max(1)
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// How an expectation over the Gaussian core is evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ExpectationRule {
    MonteCarlo(McPlan),
    /// Tensor Gauss-Hermite quadrature; only for cores with at most 6 entries.
    GaussHermite { nodes: usize },
}

impl Default for ExpectationRule {
    fn default() -> Self {
        ExpectationRule::MonteCarlo(McPlan::default())
    }
}

impl ExpectationRule {
    pub fn for_iteration(&self, t: usize) -> Self {
        match self {
            ExpectationRule::MonteCarlo(p) => ExpectationRule::MonteCarlo(p.for_iteration(t)),
            other => other.clone(),
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, ExpectationRule::GaussHermite { .. })
    }
}

pub const MAX_QUADRATURE_DIM: usize = 6;

/// Class-weighted mean and per-entry standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct Expectation {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl Expectation {
    pub fn max_stderr(&self) -> f64 {
        self.stderr.iter().fold(0.0f64, |a, &b| a.max(b))
    }
}

/// Nodes and weights for `E[f(z)]`, `z ~ N(0, 1)` (Golub-Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1 / total).collect(),
    )
}

fn unit_rng(seed: u64, class: usize, unit: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 40) ^ unit as u64);
    rng
}

fn draw_core<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    // filled row by row so the draw order follows the row-major convention
    let mut z = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            z[(i, j)] = rng.sample(StandardNormal);
        }
    }
    z
}

/// Raw standard-normal core of MC sample `sample` for support index `class`.
///
/// With antithetic pairing, sample `2i + 1` is the negation of sample `2i`.
pub fn core_sample(plan: &McPlan, class: usize, sample: usize, rows: usize, cols: usize) -> DMatrix<f64> {
    if plan.antithetic {
        let mut rng = unit_rng(plan.seed, class, sample / 2);
        let z = draw_core(&mut rng, rows, cols);
        if sample % 2 == 1 {
            -z
        } else {
            z
        }
    } else {
        let mut rng = unit_rng(plan.seed, class, sample);
        draw_core(&mut rng, rows, cols)
    }
}

/// Attaches the sample index to integrand failures.
fn at_sample(e: Error, sample: usize) -> Error {
    match e {
        Error::SampleProx { .. } | Error::NonFiniteIntegrand { .. } | Error::Validation(_) => e,
        other => Error::SampleProx {
            sample,
            iteration: 0,
            source: Box::new(other),
        },
    }
}

struct Partial {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

fn check_finite(values: &[f64], class: usize, sample: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteIntegrand { class, sample })
    }
}

fn mc_class<F>(plan: &McPlan, class: usize, rows: usize, cols: usize, width: usize, f: &F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(usize, &DMatrix<f64>) -> Result<Vec<f64>> + Sync,
{
    let units = plan.units();
    let chunks = units.div_ceil(CHUNK);
    let partials: Vec<Result<Partial>> = (0..chunks)
        .into_par_iter()
        .map(|ch| {
            let mut sum = vec![0.0; width];
            let mut sumsq = vec![0.0; width];
            for u in (ch * CHUNK)..((ch + 1) * CHUNK).min(units) {
                let value = if plan.antithetic {
                    let a = core_sample(plan, class, 2 * u, rows, cols);
                    let va = f(class, &a).map_err(|e| at_sample(e, 2 * u))?;
                    check_finite(&va, class, 2 * u)?;
                    let vb = f(class, &(-a)).map_err(|e| at_sample(e, 2 * u + 1))?;
                    check_finite(&vb, class, 2 * u + 1)?;
                    va.iter().zip(&vb).map(|(x, y)| 0.5 * (x + y)).collect::<Vec<_>>()
                } else {
                    let a = core_sample(plan, class, u, rows, cols);
                    let va = f(class, &a).map_err(|e| at_sample(e, u))?;
                    check_finite(&va, class, u)?;
                    va
                };
                if value.len() != width {
                    return Err(Error::Validation(format!(
                        "integrand returned {} entries, expected {width}",
                        value.len()
                    )));
                }
                for i in 0..width {
                    sum[i] += value[i];
                    sumsq[i] += value[i] * value[i];
                }
            }
            Ok(Partial { sum, sumsq })
        })
        .collect();
    let mut sums = Vec::with_capacity(chunks);
    let mut sqs = Vec::with_capacity(chunks);
    for p in partials {
        let p = p?;
        sums.push(p.sum);
        sqs.push(p.sumsq);
    }
    let n = units as f64;
    let mean: Vec<f64> = pairwise_sum(&sums, width).into_iter().map(|s| s / n).collect();
    let sq = pairwise_sum(&sqs, width);
    let stderr = mean
        .iter()
        .zip(sq)
        .map(|(&m, s)| {
            if units < 2 {
                0.0
            } else {
                let var = ((s / n - m * m) * n / (n - 1.0)).max(0.0);
                (var / n).sqrt()
            }
        })
        .collect();
    Ok((mean, stderr))
}

fn gh_class<F>(nodes: usize, class: usize, rows: usize, cols: usize, width: usize, f: &F) -> Result<Vec<f64>>
where
    F: Fn(usize, &DMatrix<f64>) -> Result<Vec<f64>> + Sync,
{
    let dim = rows * cols;
    let (x, w) = gauss_hermite(nodes);
    let total = nodes.pow(dim as u32);
    let chunks = total.div_ceil(CHUNK);
    let partials: Vec<Result<Vec<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|ch| {
            let mut sum = vec![0.0; width];
            for p in (ch * CHUNK)..((ch + 1) * CHUNK).min(total) {
                let mut idx = p;
                let mut weight = 1.0;
                let mut core = DMatrix::zeros(rows, cols);
                for e in 0..dim {
                    let node = idx % nodes;
                    idx /= nodes;
                    core[(e / cols, e % cols)] = x[node];
                    weight *= w[node];
                }
                let v = f(class, &core).map_err(|e| at_sample(e, p))?;
                check_finite(&v, class, p)?;
                for i in 0..width {
                    sum[i] += weight * v[i];
                }
            }
            Ok(sum)
        })
        .collect();
    let mut sums = Vec::with_capacity(chunks);
    for p in partials {
        sums.push(p?);
    }
    Ok(pairwise_sum(&sums, width))
}

/// `sum_c P(c) E_z[f(c, z)]` over a standard-normal core of shape `rows x cols`.
///
/// `f` receives the support index of the class tuple. Classes with zero mass
/// are skipped.
pub fn expect_core<F>(law: &ClassLaw, rows: usize, cols: usize, rule: &ExpectationRule, width: usize, f: F) -> Result<Expectation>
where
    F: Fn(usize, &DMatrix<f64>) -> Result<Vec<f64>> + Sync,
{
    let mut mean = vec![0.0; width];
    let mut var = vec![0.0; width];
    if let ExpectationRule::GaussHermite { nodes } = rule {
        if rows * cols > MAX_QUADRATURE_DIM {
            return Err(Error::Validation(format!(
                "Gauss-Hermite quadrature supports at most {MAX_QUADRATURE_DIM} Gaussian dimensions, got {}",
                rows * cols
            )));
        }
        if *nodes == 0 {
            return Err(Error::Validation("quadrature needs at least one node".into()));
        }
    }
    if let ExpectationRule::MonteCarlo(plan) = rule {
        if plan.n_samples == 0 {
            return Err(Error::Validation("n_samples must be at least 1".into()));
        }
    }
    for (c, &p) in law.probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        match rule {
            ExpectationRule::MonteCarlo(plan) => {
                let (m, se) = mc_class(plan, c, rows, cols, width, &f)?;
                for i in 0..width {
                    mean[i] += p * m[i];
                    var[i] += p * p * se[i] * se[i];
                }
            }
            ExpectationRule::GaussHermite { nodes } => {
                let m = gh_class(*nodes, c, rows, cols, width, &f)?;
                for i in 0..width {
                    mean[i] += p * m[i];
                }
            }
        }
    }
    Ok(Expectation {
        mean,
        stderr: var.into_iter().map(f64::sqrt).collect(),
    })
}

/// Per-(token, cluster) law of `(xi, y)`: `xi ~ N(0, I_r)` and
/// `y | xi ~ N(theta^T q^{-1/2} xi, rho - theta^T q^+ theta)`.
#[derive(Clone, Debug)]
pub struct CondGaussianYGivenXi {
    pub q_half: DMatrix<f64>,
    pub q_pinv_half: DMatrix<f64>,
    /// `theta^T q^{-1/2}`, `t x r`.
    pub mean_map: DMatrix<f64>,
    /// `rho - theta^T q^+ theta`, clipped PSD.
    pub cov: DMatrix<f64>,
    pub cov_half: DMatrix<f64>,
}

impl CondGaussianYGivenXi {
    pub fn new(
        q: &DMatrix<f64>,
        theta: &DMatrix<f64>,
        rho: &DMatrix<f64>,
        token: usize,
        cluster: usize,
    ) -> Result<Self> {
        let q_half = linalg::sym_sqrt(q)?;
        let q_pinv_half = linalg::sym_pinv_sqrt(q)?;
        let proj = linalg::range_projector(q);
        let outside = (theta - &proj * theta).norm();
        if outside > 1e-8 * (1.0 + theta.norm()) {
            return Err(Error::DegenerateOverlap {
                token,
                cluster,
                residual: outside,
            });
        }
        let mean_map = theta.transpose() * &q_pinv_half;
        let schur = linalg::symmetrize(&(rho - &mean_map * mean_map.transpose()));
        let scale = rho.amax().max(1.0);
        let low = linalg::min_eigenvalue(&schur);
        if low < -linalg::NEG_TOL * scale {
            return Err(Error::DegenerateTeacherChannel {
                token,
                cluster,
                eigenvalue: low,
            });
        }
        let cov = linalg::clip_psd(&schur);
        let cov_half = linalg::sym_sqrt(&cov)?;
        Ok(Self {
            q_half,
            q_pinv_half,
            mean_map,
            cov,
            cov_half,
        })
    }

    pub fn y_mean(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.mean_map * xi
    }
}

/// Energetic channel for all (token, cluster) pairs.
#[derive(Clone, Debug)]
pub struct EnergeticChannel {
    pub tokens: ClusterMap<CondGaussianYGivenXi>,
    pub r: usize,
    pub t: usize,
}

/// One draw of the energetic measure; `y` excludes the teacher mean `m*`.
#[derive(Clone, Debug)]
pub struct EnergeticSample {
    pub xi: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl EnergeticChannel {
    pub fn new(params: &OrderParameters, fixed: &FixedStatistics) -> Result<Self> {
        let r = params.v.nrows();
        let t = fixed.rho.values()[0].nrows();
        let counts = params.q.cluster_counts();
        let tokens = ClusterMap::try_from_fn(&counts, |l, k| {
            CondGaussianYGivenXi::new(params.q.get(l, k), params.theta.get(l, k), fixed.rho.get(l, k), l, k)
        })?;
        Ok(Self { tokens, r, t })
    }

    /// Core columns: the first `r` feed `xi`, the last `t` feed the `y` noise.
    pub fn transform(&self, class: &[usize], core: &DMatrix<f64>) -> EnergeticSample {
        let l = class.len();
        let mut xi = DMatrix::zeros(l, self.r);
        let mut y = DMatrix::zeros(l, self.t);
        for (tok, &k) in class.iter().enumerate() {
            let ch = self.tokens.get(tok, k);
            let x_row = DVector::from_fn(self.r, |a, _| core[(tok, a)]);
            let z_row = DVector::from_fn(self.t, |b, _| core[(tok, self.r + b)]);
            let y_row = ch.y_mean(&x_row) + &ch.cov_half * z_row;
            for a in 0..self.r {
                xi[(tok, a)] = x_row[a];
            }
            for b in 0..self.t {
                y[(tok, b)] = y_row[b];
            }
        }
        EnergeticSample { xi, y }
    }

    pub fn core_shape(&self, seq_len: usize) -> (usize, usize) {
        (seq_len, self.r + self.t)
    }
}

/// `E_{c, Xi, Y}[f(c, Xi, Y)]` under the energetic measure.
pub fn expect_over_measure<F>(
    law: &ClassLaw,
    channel: &EnergeticChannel,
    rule: &ExpectationRule,
    width: usize,
    f: F,
) -> Result<Expectation>
where
    F: Fn(&[usize], &EnergeticSample) -> Result<Vec<f64>> + Sync,
{
    let l = channel.tokens.tokens();
    let (rows, cols) = channel.core_shape(l);
    expect_core(law, rows, cols, rule, width, |c, core| {
        let class = &law.support[c];
        f(class, &channel.transform(class, core))
    })
}

/// Draws of the energetic measure for one class tuple.
pub fn sample_energetic_measure(
    params: &OrderParameters,
    fixed: &FixedStatistics,
    class: &[usize],
    plan: &McPlan,
) -> Result<Vec<EnergeticSample>> {
    let ch = EnergeticChannel::new(params, fixed)?;
    let (rows, cols) = ch.core_shape(class.len());
    Ok((0..plan.n_samples)
        .map(|s| ch.transform(class, &core_sample(plan, 0, s, rows, cols)))
        .collect())
}

/// Joint normal law of `(x_l, y_l)` with means `(m, m*)` and covariance
/// `[[q, theta], [theta^T, rho]]`.
#[derive(Clone, Debug)]
pub struct JointXYStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub cov_half: DMatrix<f64>,
}

impl JointXYStats {
    pub fn new(
        q: &DMatrix<f64>,
        theta: &DMatrix<f64>,
        rho: &DMatrix<f64>,
        m: &DVector<f64>,
        m_star: &DVector<f64>,
        token: usize,
        cluster: usize,
    ) -> Result<Self> {
        let r = q.nrows();
        let t = rho.nrows();
        let mut cov = DMatrix::zeros(r + t, r + t);
        cov.view_mut((0, 0), (r, r)).copy_from(q);
        cov.view_mut((0, r), (r, t)).copy_from(theta);
        cov.view_mut((r, 0), (t, r)).copy_from(&theta.transpose());
        cov.view_mut((r, r), (t, t)).copy_from(rho);
        let cov = linalg::symmetrize(&cov);
        let cov_half = linalg::sym_sqrt(&cov).map_err(|e| match e {
            Error::NegativeEigenvalue { eigenvalue } => Error::InconsistentOverlaps {
                token,
                cluster,
                eigenvalue,
            },
            other => other,
        })?;
        let mean = DVector::from_iterator(r + t, m.iter().chain(m_star.iter()).copied());
        Ok(Self {
            mean,
            cov,
            cov_half,
        })
    }
}

#[derive(Clone, Debug)]
pub struct JointChannel {
    pub tokens: ClusterMap<JointXYStats>,
    pub r: usize,
    pub t: usize,
}

impl JointChannel {
    pub fn new(params: &OrderParameters, fixed: &FixedStatistics) -> Result<Self> {
        let r = params.v.nrows();
        let t = fixed.rho.values()[0].nrows();
        let counts = params.q.cluster_counts();
        let tokens = ClusterMap::try_from_fn(&counts, |l, k| {
            JointXYStats::new(
                params.q.get(l, k),
                params.theta.get(l, k),
                fixed.rho.get(l, k),
                params.m.get(l, k),
                fixed.m_star.get(l, k),
                l,
                k,
            )
        })?;
        Ok(Self { tokens, r, t })
    }

    /// Returns `(X, Y)`, both including their means.
    pub fn transform(&self, class: &[usize], core: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let l = class.len();
        let n = self.r + self.t;
        let mut x = DMatrix::zeros(l, self.r);
        let mut y = DMatrix::zeros(l, self.t);
        for (tok, &k) in class.iter().enumerate() {
            let st = self.tokens.get(tok, k);
            let z = DVector::from_fn(n, |i, _| core[(tok, i)]);
            let row = &st.mean + &st.cov_half * z;
            for a in 0..self.r {
                x[(tok, a)] = row[a];
            }
            for b in 0..self.t {
                y[(tok, b)] = row[self.r + b];
            }
        }
        (x, y)
    }
}

/// Draws of the joint `(X, Y)` law for one class tuple.
pub fn sample_joint_xy(
    params: &OrderParameters,
    fixed: &FixedStatistics,
    class: &[usize],
    plan: &McPlan,
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    let ch = JointChannel::new(params, fixed)?;
    let cols = ch.r + ch.t;
    Ok((0..plan.n_samples)
        .map(|s| ch.transform(class, &core_sample(plan, 0, s, class.len(), cols)))
        .collect())
}

/// `E_{c, X, Y}[f(c, X, Y)]` under the joint law.
pub fn expect_joint<F>(
    law: &ClassLaw,
    channel: &JointChannel,
    rule: &ExpectationRule,
    width: usize,
    f: F,
) -> Result<Expectation>
where
    F: Fn(&[usize], &DMatrix<f64>, &DMatrix<f64>) -> Result<Vec<f64>> + Sync,
{
    let l = channel.tokens.tokens();
    expect_core(law, l, channel.r + channel.t, rule, width, |c, core| {
        let class = &law.support[c];
        let (x, y) = channel.transform(class, core);
        f(class, &x, &y)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClusterMap, Dimensions};

    fn scalar_params(q: f64, theta: f64) -> (OrderParameters, FixedStatistics) {
        let dims = Dimensions {
            seq_len: 1,
            student_units: 1,
            teacher_units: 1,
            clusters: vec![1],
            alpha: 1.0,
            lambda: 0.1,
            dim: 10,
        };
        let mut p = OrderParameters::cold(&dims, 0.0);
        *p.q.get_mut(0, 0) = DMatrix::from_element(1, 1, q);
        *p.theta.get_mut(0, 0) = DMatrix::from_element(1, 1, theta);
        let fixed = FixedStatistics {
            rho: ClusterMap::from_fn(&[1], |_, _| DMatrix::from_element(1, 1, 1.0)),
            m_star: ClusterMap::from_fn(&[1], |_, _| DVector::zeros(1)),
        };
        (p, fixed)
    }

    fn one_class() -> ClassLaw {
        ClassLaw::uniform(&[1])
    }

    #[test]
    fn hermite_moments_are_exact() {
        let (x, w) = gauss_hermite(5);
        let moment = |k: i32| x.iter().zip(&w).map(|(a, b)| b * a.powi(k)).sum::<f64>();
        assert!((moment(0) - 1.0).abs() < 1e-13);
        assert!(moment(1).abs() < 1e-13);
        assert!((moment(2) - 1.0).abs() < 1e-12);
        assert!((moment(4) - 3.0).abs() < 1e-11);
        assert!((moment(6) - 15.0).abs() < 1e-10);
    }

    #[test]
    fn scalar_conditional_law() {
        let q = DMatrix::from_element(1, 1, 1.0);
        let th = DMatrix::from_element(1, 1, 0.5);
        let rho = DMatrix::from_element(1, 1, 1.0);
        let ch = CondGaussianYGivenXi::new(&q, &th, &rho, 0, 0).unwrap();
        assert!((ch.mean_map[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((ch.cov[(0, 0)] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn zero_theta_with_singular_q_falls_back() {
        let q = DMatrix::zeros(1, 1);
        let th = DMatrix::zeros(1, 1);
        let rho = DMatrix::from_element(1, 1, 2.0);
        let ch = CondGaussianYGivenXi::new(&q, &th, &rho, 0, 0).unwrap();
        assert_eq!(ch.mean_map[(0, 0)], 0.0);
        assert_eq!(ch.cov[(0, 0)], 2.0);
    }

    #[test]
    fn theta_outside_range_is_degenerate() {
        let q = DMatrix::zeros(1, 1);
        let th = DMatrix::from_element(1, 1, 0.3);
        let rho = DMatrix::from_element(1, 1, 1.0);
        let err = CondGaussianYGivenXi::new(&q, &th, &rho, 0, 0).unwrap_err();
        assert!(matches!(err, Error::DegenerateOverlap { .. }));
    }

    #[test]
    fn constant_integrand_is_exact() {
        let (p, fixed) = scalar_params(1.0, 0.5);
        let ch = EnergeticChannel::new(&p, &fixed).unwrap();
        let e = expect_over_measure(&one_class(), &ch, &ExpectationRule::MonteCarlo(McPlan::new(100, 3)), 1, |_, _| {
            Ok(vec![1.0])
        })
        .unwrap();
        assert_eq!(e.mean, vec![1.0]);
        assert_eq!(e.stderr, vec![0.0]);
    }

    #[test]
    fn energetic_moments_within_three_sigma() {
        let (p, fixed) = scalar_params(1.0, 0.0);
        let ch = EnergeticChannel::new(&p, &fixed).unwrap();
        let plan = McPlan {
            n_samples: 20000,
            seed: 5,
            antithetic: false,
            crn: true,
        };
        let e = expect_over_measure(&one_class(), &ch, &ExpectationRule::MonteCarlo(plan), 2, |_, s| {
            Ok(vec![s.y[(0, 0)], s.xi[(0, 0)].powi(2)])
        })
        .unwrap();
        assert!(e.mean[0].abs() <= 3.0 * e.stderr[0]);
        assert!((e.mean[1] - 1.0).abs() <= 3.0 * e.stderr[1]);
    }

    #[test]
    fn energetic_covariance_matches_blocks() {
        let (p, fixed) = scalar_params(2.0, 0.6);
        let ch = EnergeticChannel::new(&p, &fixed).unwrap();
        let plan = McPlan {
            n_samples: 1_000_000,
            seed: 1,
            antithetic: false,
            crn: true,
        };
        // E[xi y] = theta q^{-1/2}, E[y^2] = rho
        let e = expect_over_measure(&one_class(), &ch, &ExpectationRule::MonteCarlo(plan), 2, |_, s| {
            Ok(vec![s.xi[(0, 0)] * s.y[(0, 0)], s.y[(0, 0)].powi(2)])
        })
        .unwrap();
        let target = 0.6 / 2f64.sqrt();
        assert!((e.mean[0] - target).abs() <= 3.0 * e.stderr[0]);
        assert!((e.mean[1] - 1.0).abs() <= 3.0 * e.stderr[1]);
    }

    #[test]
    fn joint_cross_covariance_matches_theta() {
        let (p, fixed) = scalar_params(1.5, 0.7);
        let ch = JointChannel::new(&p, &fixed).unwrap();
        let plan = McPlan {
            n_samples: 1_000_000,
            seed: 9,
            antithetic: false,
            crn: true,
        };
        let e = expect_joint(&one_class(), &ch, &ExpectationRule::MonteCarlo(plan), 1, |_, x, y| {
            Ok(vec![x[(0, 0)] * y[(0, 0)]])
        })
        .unwrap();
        assert!((e.mean[0] - 0.7).abs() <= 3.0 * e.stderr[0]);
    }

    #[test]
    fn perfectly_correlated_joint_law() {
        let (p, fixed) = scalar_params(1.0, 1.0);
        let draws = sample_joint_xy(&p, &fixed, &[0], &McPlan::new(50, 2)).unwrap();
        for (x, y) in draws {
            assert!((x[(0, 0)] - y[(0, 0)]).abs() < 1e-7);
        }
    }

    #[test]
    fn indefinite_joint_covariance_is_rejected() {
        let (p, fixed) = scalar_params(1.0, 2.0);
        let err = JointChannel::new(&p, &fixed).unwrap_err();
        assert!(matches!(err, Error::InconsistentOverlaps { .. }));
    }

    #[test]
    fn antithetic_samples_negate_the_core() {
        let plan = McPlan::new(10, 4);
        for i in 0..5 {
            let a = core_sample(&plan, 0, 2 * i, 2, 3);
            let b = core_sample(&plan, 0, 2 * i + 1, 2, 3);
            assert_eq!(a, -b);
        }
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let (p, fixed) = scalar_params(1.0, 0.5);
        let ch = EnergeticChannel::new(&p, &fixed).unwrap();
        let rule = ExpectationRule::MonteCarlo(McPlan::new(5000, 17));
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                expect_over_measure(&one_class(), &ch, &rule, 1, |_, s| Ok(vec![(s.y[(0, 0)] * 3.0).sin()])).unwrap()
            })
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.mean[0].to_bits(), b.mean[0].to_bits());
        assert_eq!(a.stderr[0].to_bits(), b.stderr[0].to_bits());
    }

    #[test]
    fn stderr_shrinks_at_root_n_rate() {
        let (p, fixed) = scalar_params(1.0, 0.5);
        let ch = EnergeticChannel::new(&p, &fixed).unwrap();
        let se = |n: usize| {
            let plan = McPlan {
                n_samples: n,
                seed: 23,
                antithetic: false,
                crn: true,
            };
            expect_over_measure(&one_class(), &ch, &ExpectationRule::MonteCarlo(plan), 1, |_, s| {
                Ok(vec![s.y[(0, 0)].powi(2)])
            })
            .unwrap()
            .stderr[0]
        };
        let ratio = se(40000) / se(80000);
        assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn quadrature_matches_known_moments() {
        let (p, fixed) = scalar_params(1.0, 0.5);
        let ch = EnergeticChannel::new(&p, &fixed).unwrap();
        let e = expect_over_measure(&one_class(), &ch, &ExpectationRule::GaussHermite { nodes: 4 }, 2, |_, s| {
            Ok(vec![s.xi[(0, 0)] * s.y[(0, 0)], s.y[(0, 0)].powi(2)])
        })
        .unwrap();
        assert!((e.mean[0] - 0.5).abs() < 1e-12);
        assert!((e.mean[1] - 1.0).abs() < 1e-12);
        assert_eq!(e.stderr, vec![0.0, 0.0]);
    }

    #[test]
    fn quadrature_dimension_guard() {
        let law = ClassLaw::uniform(&[1, 1, 1, 1]);
        let err = expect_core(&law, 4, 2, &ExpectationRule::GaussHermite { nodes: 2 }, 1, |_, _| Ok(vec![1.0]));
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn non_finite_integrand_reports_location() {
        let law = ClassLaw::uniform(&[2]);
        let plan = McPlan {
            n_samples: 10,
            seed: 0,
            antithetic: false,
            crn: true,
        };
        let err = expect_core(&law, 1, 1, &ExpectationRule::MonteCarlo(plan), 1, |c, _| {
            Ok(vec![if c == 1 { f64::NAN } else { 0.0 }])
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteIntegrand { class: 1, sample: 0 }));
    }
}
