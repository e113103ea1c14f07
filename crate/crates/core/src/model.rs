//! Problem definition: dimensions, class law, spectral measure and the
//! replica order parameters shared by every other module.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg;
use crate::loss::{self, Loss, LossConfig};

/// Sizes and scalar hyper-parameters of one problem instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dimensions {
    /// Sequence length `L`.
    pub seq_len: usize,
    /// Student hidden units `r`.
    pub student_units: usize,
    /// Teacher hidden units `t`.
    pub teacher_units: usize,
    /// Clusters per token, `K_l`.
    pub clusters: Vec<usize>,
    /// Sample complexity `n / d`.
    pub alpha: f64,
    /// Ridge strength on the student weights.
    pub lambda: f64,
    /// Ambient dimension; only the finite-d modules read it.
    #[serde(default = "default_dim")]
    pub dim: usize,
}

fn default_dim() -> usize {
    1000
}

impl Dimensions {
    pub fn cluster_count(&self) -> usize {
        self.clusters.iter().sum()
    }
}

/// A total map over `(token, cluster)` keys stored in row-major order.
///
/// Serialized as a list (one entry per token) of lists (one per cluster).
#[derive(Clone, PartialEq)]
pub struct ClusterMap<T> {
    offsets: Vec<usize>,
    values: Vec<T>,
}

impl<T> ClusterMap<T> {
    pub fn from_fn(clusters: &[usize], mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut offsets = Vec::with_capacity(clusters.len() + 1);
        let mut values = Vec::new();
        offsets.push(0);
        for (l, &k) in clusters.iter().enumerate() {
            for c in 0..k {
                values.push(f(l, c));
            }
            offsets.push(values.len());
        }
        Self { offsets, values }
    }

    pub fn try_from_fn<E>(
        clusters: &[usize],
        mut f: impl FnMut(usize, usize) -> std::result::Result<T, E>,
    ) -> std::result::Result<Self, E> {
        let mut offsets = Vec::with_capacity(clusters.len() + 1);
        let mut values = Vec::new();
        offsets.push(0);
        for (l, &k) in clusters.iter().enumerate() {
            for c in 0..k {
                values.push(f(l, c)?);
            }
            offsets.push(values.len());
        }
        Ok(Self { offsets, values })
    }

    /// Builds from nested per-token lists; every token must have `clusters[l]` entries.
    pub fn from_nested(clusters: &[usize], nested: Vec<Vec<T>>) -> Result<Self> {
        if nested.len() != clusters.len() {
            return Err(Error::Validation(format!(
                "expected {} tokens, found {}",
                clusters.len(),
                nested.len()
            )));
        }
        for (l, (row, &k)) in nested.iter().zip(clusters).enumerate() {
            if row.len() != k {
                return Err(Error::Validation(format!(
                    "token {l}: expected {k} clusters, found {}",
                    row.len()
                )));
            }
        }
        let mut offsets = vec![0];
        let mut values = Vec::new();
        for row in nested {
            values.extend(row);
            offsets.push(values.len());
        }
        Ok(Self { offsets, values })
    }

    pub fn tokens(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn clusters(&self, token: usize) -> usize {
        self.offsets[token + 1] - self.offsets[token]
    }

    pub fn cluster_counts(&self) -> Vec<usize> {
        (0..self.tokens()).map(|l| self.clusters(l)).collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Flat slot of `(token, cluster)`.
    pub fn slot(&self, token: usize, cluster: usize) -> usize {
        assert!(cluster < self.clusters(token), "cluster {cluster} out of range for token {token}");
        self.offsets[token] + cluster
    }

    pub fn get(&self, token: usize, cluster: usize) -> &T {
        &self.values[self.slot(token, cluster)]
    }

    pub fn get_mut(&mut self, token: usize, cluster: usize) -> &mut T {
        let s = self.slot(token, cluster);
        &mut self.values[s]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Iterates `(token, cluster, value)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        (0..self.tokens()).flat_map(move |l| {
            (0..self.clusters(l)).map(move |k| (l, k, &self.values[self.offsets[l] + k]))
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(usize, usize, &T) -> U) -> ClusterMap<U> {
        let values = self.iter().map(|(l, k, v)| f(l, k, v)).collect();
        ClusterMap {
            offsets: self.offsets.clone(),
            values,
        }
    }

    pub fn zip_map<U, W>(
        &self,
        other: &ClusterMap<U>,
        mut f: impl FnMut(&T, &U) -> W,
    ) -> ClusterMap<W> {
        assert_eq!(self.offsets, other.offsets, "cluster maps over different key sets");
        ClusterMap {
            offsets: self.offsets.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| f(a, b)).collect(),
        }
    }

    pub fn to_nested(&self) -> Vec<Vec<&T>> {
        (0..self.tokens())
            .map(|l| self.values[self.offsets[l]..self.offsets[l + 1]].iter().collect())
            .collect()
    }
}

impl<T: fmt::Debug> fmt::Debug for ClusterMap<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.to_nested()).finish()
    }
}

impl<T: Serialize> Serialize for ClusterMap<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_nested().serialize(s)
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for ClusterMap<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let nested: Vec<Vec<T>> = Vec::deserialize(d)?;
        let clusters: Vec<usize> = nested.iter().map(Vec::len).collect();
        ClusterMap::from_nested(&clusters, nested).map_err(serde::de::Error::custom)
    }
}

/// Joint law of the class tuple `(c_1, ..., c_L)` (0-based cluster indices).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassLaw {
    pub support: Vec<Vec<usize>>,
    pub probs: Vec<f64>,
}

impl ClassLaw {
    /// Product law with uniform clusters on every token.
    pub fn uniform(clusters: &[usize]) -> Self {
        let mut support: Vec<Vec<usize>> = vec![vec![]];
        for &k in clusters {
            support = support
                .into_iter()
                .flat_map(|prefix| {
                    (0..k).map(move |c| {
                        let mut t = prefix.clone();
                        t.push(c);
                        t
                    })
                })
                .collect();
        }
        let p = 1.0 / support.len() as f64;
        let probs = vec![p; support.len()];
        Self { support, probs }
    }

    /// Inverse-CDF draw of a support index.
    pub fn sample_index<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }
}

/// One weighted atom of the joint spectral measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralAtom {
    pub weight: f64,
    /// Covariance eigenvalue per `(token, cluster)`.
    pub gamma: ClusterMap<f64>,
    /// sqrt(d)-scaled mean projection per `(token, cluster)`.
    pub tau: ClusterMap<f64>,
    /// Teacher projection, one entry per teacher unit.
    pub pi: Vec<f64>,
}

/// Discrete joint law of (gamma, tau, pi) in the shared eigenbasis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralMeasure {
    pub atoms: Vec<SpectralAtom>,
}

impl SpectralMeasure {
    /// Spectral mean of `gamma_{l,k}`.
    pub fn mean_gamma(&self, token: usize, cluster: usize) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.weight * a.gamma.get(token, cluster))
            .sum()
    }

    /// Mixture `w * self + (1 - w) * other` as a concatenated atom list.
    pub fn mix(&self, w: f64, other: &SpectralMeasure) -> SpectralMeasure {
        let mut atoms: Vec<SpectralAtom> = self
            .atoms
            .iter()
            .map(|a| SpectralAtom {
                weight: a.weight * w,
                ..a.clone()
            })
            .collect();
        atoms.extend(other.atoms.iter().map(|a| SpectralAtom {
            weight: a.weight * (1.0 - w),
            ..a.clone()
        }));
        SpectralMeasure { atoms }
    }

    /// Empirical measure of a finite-d instance with diagonal covariances.
    ///
    /// `cov_diag` and `means` are indexed like a [`ClusterMap`]; `means` are
    /// the actual mean vectors (entries scaled by `1/sqrt(d)`), `teacher` is
    /// `d x t`.
    pub fn from_instance(
        cov_diag: &ClusterMap<DVector<f64>>,
        means: &ClusterMap<DVector<f64>>,
        teacher: &DMatrix<f64>,
    ) -> SpectralMeasure {
        let d = teacher.nrows();
        let clusters = cov_diag.cluster_counts();
        let sd = (d as f64).sqrt();
        let atoms = (0..d)
            .map(|i| SpectralAtom {
                weight: 1.0 / d as f64,
                gamma: ClusterMap::from_fn(&clusters, |l, k| cov_diag.get(l, k)[i]),
                tau: ClusterMap::from_fn(&clusters, |l, k| sd * means.get(l, k)[i]),
                pi: teacher.row(i).iter().copied().collect(),
            })
            .collect();
        SpectralMeasure { atoms }
    }
}

/// Teacher-side overlaps, fixed by the data model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedStatistics {
    /// `rho_{l,k}`, `t x t`.
    pub rho: ClusterMap<DMatrix<f64>>,
    /// `m*_{l,k}`, length `t`.
    pub m_star: ClusterMap<DVector<f64>>,
}

/// Replica-symmetric order parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderParameters {
    /// `q_{l,k}`, `r x r` symmetric PSD.
    pub q: ClusterMap<DMatrix<f64>>,
    /// `V_{l,k}`, `r x r` symmetric positive definite.
    pub variance: ClusterMap<DMatrix<f64>>,
    /// `m_{l,k}`, length `r`.
    pub m: ClusterMap<DVector<f64>>,
    /// `theta_{l,k}`, `r x t`.
    pub theta: ClusterMap<DMatrix<f64>>,
    /// `v = w^T w / d`, `r x r`.
    pub v: DMatrix<f64>,
}

/// Conjugate (hatted) parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugateParameters {
    pub q_hat: ClusterMap<DMatrix<f64>>,
    pub variance_hat: ClusterMap<DMatrix<f64>>,
    pub m_hat: ClusterMap<DVector<f64>>,
    pub theta_hat: ClusterMap<DMatrix<f64>>,
    pub v_hat: DMatrix<f64>,
}

impl OrderParameters {
    /// Cold start: `q = eps I`, `V = I`, `m = 0`, `theta = 0`, `v = eps I`.
    pub fn cold(dims: &Dimensions, eps: f64) -> Self {
        let r = dims.student_units;
        let t = dims.teacher_units;
        let c = &dims.clusters;
        Self {
            q: ClusterMap::from_fn(c, |_, _| DMatrix::identity(r, r) * eps),
            variance: ClusterMap::from_fn(c, |_, _| DMatrix::identity(r, r)),
            m: ClusterMap::from_fn(c, |_, _| DVector::zeros(r)),
            theta: ClusterMap::from_fn(c, |_, _| DMatrix::zeros(r, t)),
            v: DMatrix::identity(r, r) * eps,
        }
    }

    /// Statistics of the GAMP initialization `w = 0`, `c_hat = I`.
    pub fn algorithmic_start(dims: &Dimensions, nu: &SpectralMeasure) -> Self {
        let r = dims.student_units;
        let t = dims.teacher_units;
        let c = &dims.clusters;
        Self {
            q: ClusterMap::from_fn(c, |_, _| DMatrix::zeros(r, r)),
            variance: ClusterMap::from_fn(c, |l, k| DMatrix::identity(r, r) * nu.mean_gamma(l, k)),
            m: ClusterMap::from_fn(c, |_, _| DVector::zeros(r)),
            theta: ClusterMap::from_fn(c, |_, _| DMatrix::zeros(r, t)),
            v: DMatrix::zeros(r, r),
        }
    }

    /// Start seeded from the teacher: theta aligned with rho on the shared units.
    pub fn informed(dims: &Dimensions, fixed: &FixedStatistics, eps: f64) -> Self {
        let r = dims.student_units;
        let t = dims.teacher_units;
        let c = &dims.clusters;
        let embed = DMatrix::from_fn(r, t, |i, j| if i == j { 1.0 } else { 0.0 });
        Self {
            q: fixed
                .rho
                .map(|_, _, rho| &embed * rho * embed.transpose() + DMatrix::identity(r, r) * eps),
            variance: ClusterMap::from_fn(c, |_, _| DMatrix::identity(r, r)),
            m: fixed.m_star.map(|_, _, ms| &embed * ms),
            theta: fixed.rho.map(|_, _, rho| &embed * rho),
            v: DMatrix::identity(r, r) * eps.max(1e-3),
        }
    }

    /// Largest `max|A - A^T|` over the symmetric blocks.
    pub fn max_asymmetry(&self) -> f64 {
        self.q
            .values()
            .iter()
            .chain(self.variance.values())
            .chain(std::iter::once(&self.v))
            .map(linalg::max_asymmetry)
            .fold(0.0, f64::max)
    }

    /// Flattened values in a fixed order, for residuals and tables.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in self.q.values() {
            out.extend(row_major(m));
        }
        for m in self.variance.values() {
            out.extend(row_major(m));
        }
        for v in self.m.values() {
            out.extend(v.iter());
        }
        for m in self.theta.values() {
            out.extend(row_major(m));
        }
        out.extend(row_major(&self.v));
        out
    }

    /// Column names matching [`OrderParameters::flatten`].
    pub fn column_names(dims: &Dimensions) -> Vec<String> {
        let r = dims.student_units;
        let t = dims.teacher_units;
        let mut names = Vec::new();
        let keys: Vec<(usize, usize)> = dims
            .clusters
            .iter()
            .enumerate()
            .flat_map(|(l, &k)| (0..k).map(move |c| (l, c)))
            .collect();
        for (prefix, cols) in [("q", r), ("V", r)] {
            for &(l, k) in &keys {
                for a in 0..r {
                    for b in 0..cols {
                        names.push(format!("{prefix}.{l}.{k}.{a}.{b}"));
                    }
                }
            }
        }
        for &(l, k) in &keys {
            for a in 0..r {
                names.push(format!("m.{l}.{k}.{a}"));
            }
        }
        for &(l, k) in &keys {
            for a in 0..r {
                for b in 0..t {
                    names.push(format!("theta.{l}.{k}.{a}.{b}"));
                }
            }
        }
        for a in 0..r {
            for b in 0..r {
                names.push(format!("v.{a}.{b}"));
            }
        }
        names
    }
}

impl ConjugateParameters {
    pub fn zeros(dims: &Dimensions) -> Self {
        let r = dims.student_units;
        let t = dims.teacher_units;
        let c = &dims.clusters;
        Self {
            q_hat: ClusterMap::from_fn(c, |_, _| DMatrix::zeros(r, r)),
            variance_hat: ClusterMap::from_fn(c, |_, _| DMatrix::zeros(r, r)),
            m_hat: ClusterMap::from_fn(c, |_, _| DVector::zeros(r)),
            theta_hat: ClusterMap::from_fn(c, |_, _| DMatrix::zeros(r, t)),
            v_hat: DMatrix::zeros(r, r),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in self.q_hat.values() {
            out.extend(row_major(m));
        }
        for m in self.variance_hat.values() {
            out.extend(row_major(m));
        }
        for v in self.m_hat.values() {
            out.extend(v.iter());
        }
        for m in self.theta_hat.values() {
            out.extend(row_major(m));
        }
        out.extend(row_major(&self.v_hat));
        out
    }

    pub fn column_names(dims: &Dimensions) -> Vec<String> {
        OrderParameters::column_names(dims)
            .into_iter()
            .map(|n| {
                let (head, tail) = n.split_once('.').unwrap();
                format!("{head}_hat.{tail}")
            })
            .collect()
    }
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Complete problem instance as read from a configuration file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dimensions: Dimensions,
    pub class_law: ClassLaw,
    pub spectrum: SpectralMeasure,
    pub loss: LossConfig,
}

impl ModelSpec {
    pub fn build_loss(&self) -> std::sync::Arc<dyn Loss> {
        self.loss.build()
    }

    pub fn fixed_statistics(&self) -> Result<FixedStatistics> {
        compute_fixed_statistics(&self.spectrum, &self.dimensions)
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        let mut s = self.clone();
        s.dimensions.alpha = alpha;
        s
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut s = self.clone();
        s.dimensions.lambda = lambda;
        s
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

fn check_atom_shape(atom: &SpectralAtom, dims: &Dimensions) -> std::result::Result<(), String> {
    if atom.gamma.cluster_counts() != dims.clusters {
        return Err(format!(
            "gamma has cluster layout {:?}, expected {:?}",
            atom.gamma.cluster_counts(),
            dims.clusters
        ));
    }
    if atom.tau.cluster_counts() != dims.clusters {
        return Err(format!(
            "tau has cluster layout {:?}, expected {:?}",
            atom.tau.cluster_counts(),
            dims.clusters
        ));
    }
    if atom.pi.len() != dims.teacher_units {
        return Err(format!(
            "pi has {} entries, expected {}",
            atom.pi.len(),
            dims.teacher_units
        ));
    }
    Ok(())
}

/// `rho_{l,k} = sum_a w_a gamma_{l,k} pi pi^T`, `m*_{l,k} = sum_a w_a tau_{l,k} pi`.
pub fn compute_fixed_statistics(
    nu: &SpectralMeasure,
    dims: &Dimensions,
) -> Result<FixedStatistics> {
    let t = dims.teacher_units;
    for (i, atom) in nu.atoms.iter().enumerate() {
        check_atom_shape(atom, dims).map_err(|m| Error::Validation(format!("atom {i}: {m}")))?;
    }
    let mut rho = ClusterMap::from_fn(&dims.clusters, |_, _| DMatrix::zeros(t, t));
    let mut m_star = ClusterMap::from_fn(&dims.clusters, |_, _| DVector::zeros(t));
    for atom in &nu.atoms {
        let pi = DVector::from_column_slice(&atom.pi);
        let outer = &pi * pi.transpose();
        for (l, k, &g) in atom.gamma.iter() {
            *rho.get_mut(l, k) += &outer * (atom.weight * g);
            *m_star.get_mut(l, k) += &pi * (atom.weight * atom.tau.get(l, k));
        }
    }
    // exact symmetry
    for r in rho.values_mut() {
        *r = linalg::symmetrize(r);
    }
    Ok(FixedStatistics { rho, m_star })
}

/// One violated invariant, tagged with the offending component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub component: String,
    pub message: String,
}

/// Outcome of [`validate_spec`]; empty iff the spec is runnable.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, component: &str, message: impl Into<String>) {
        self.violations.push(Violation {
            component: component.to_string(),
            message: message.into(),
        });
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            let msg = self
                .violations
                .iter()
                .map(|v| format!("{}: {}", v.component, v.message))
                .collect::<Vec<_>>()
                .join("; ");
            Err(Error::Validation(msg))
        }
    }
}

pub fn validate_spec(spec: &ModelSpec) -> ValidationReport {
    let loss = spec.build_loss();
    validate_with_loss(spec, loss.as_ref())
}

/// Same as [`validate_spec`] but against an explicit loss object.
pub fn validate_with_loss(spec: &ModelSpec, loss: &dyn Loss) -> ValidationReport {
    let mut report = ValidationReport::default();
    let dims = &spec.dimensions;

    if dims.seq_len == 0 || dims.seq_len != dims.clusters.len() {
        report.push(
            "Dimensions",
            format!(
                "seq_len = {} must be positive and equal len(clusters) = {}",
                dims.seq_len,
                dims.clusters.len()
            ),
        );
    }
    if dims.clusters.iter().any(|&k| k == 0) {
        report.push("Dimensions", "every token needs at least one cluster");
    }
    if dims.student_units == 0 || dims.teacher_units == 0 {
        report.push("Dimensions", "student_units and teacher_units must be positive");
    }
    if !(dims.alpha > 0.0) || !dims.alpha.is_finite() {
        report.push("Dimensions", format!("alpha = {} must be positive", dims.alpha));
    }
    if !(dims.lambda >= 0.0) || !dims.lambda.is_finite() {
        report.push("Dimensions", format!("lambda = {} must be nonnegative", dims.lambda));
    } else if dims.lambda == 0.0 && !loss.strongly_convex() {
        report.push(
            "Dimensions",
            "lambda = 0 requires a loss that is strongly convex in X",
        );
    }
    if !report.is_ok() {
        return report;
    }

    let law = &spec.class_law;
    if law.support.len() != law.probs.len() || law.support.is_empty() {
        report.push("ClassLaw", "support and probs must be non-empty and of equal length");
    } else {
        let total: f64 = law.probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            report.push("ClassLaw", format!("probabilities sum to {total}, not 1"));
        }
        if law.probs.iter().any(|&p| !(p >= 0.0)) {
            report.push("ClassLaw", "probabilities must be nonnegative");
        }
        for c in &law.support {
            if c.len() != dims.seq_len || c.iter().zip(&dims.clusters).any(|(&ci, &k)| ci >= k) {
                report.push("ClassLaw", format!("class tuple {c:?} outside the cluster ranges"));
            }
        }
    }

    let nu = &spec.spectrum;
    if nu.atoms.is_empty() {
        report.push("SpectralMeasure", "no atoms");
    }
    let wsum: f64 = nu.atoms.iter().map(|a| a.weight).sum();
    if (wsum - 1.0).abs() > 1e-12 {
        report.push("SpectralMeasure", format!("atom weights sum to {wsum}, not 1"));
    }
    for (i, atom) in nu.atoms.iter().enumerate() {
        if let Err(m) = check_atom_shape(atom, dims) {
            report.push("SpectralMeasure", format!("atom {i}: {m}"));
            continue;
        }
        if atom.weight < 0.0 {
            report.push("SpectralMeasure", format!("atom {i} has negative weight"));
        }
        if atom.gamma.values().iter().any(|&g| !(g >= 0.0)) {
            report.push("SpectralMeasure", format!("atom {i} has a negative gamma"));
        }
    }

    if let Err(m) = loss.check_dimensions(dims) {
        report.push("LossModel", m);
    } else if report.is_ok() {
        for m in loss_derivative_check(loss, dims, 0x5eed) {
            report.push("LossModel", m);
        }
    }
    report
}

/// Finite-difference spot check of `grad_x` and (when relevant) `d3`.
///
/// Returns one message per failed check; relative tolerance 1e-5.
pub fn loss_derivative_check(loss: &dyn Loss, dims: &Dimensions, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = dims.seq_len;
    let r = dims.student_units;
    let t = dims.teacher_units;
    let mut failures = Vec::new();
    let h = 1e-5;
    for trial in 0..5 {
        let class: Vec<usize> = dims.clusters.iter().map(|&k| rng.gen_range(0..k)).collect();
        let y = DMatrix::from_fn(l, t, |_, _| rng.gen_range(-1.5..1.5));
        let x = DMatrix::from_fn(l, r, |_, _| rng.gen_range(-1.5..1.5));
        let a = DMatrix::from_fn(r, r, |_, _| rng.gen_range(-0.5..0.5));
        let v = &a * a.transpose() + DMatrix::identity(r, r) * 0.5;
        if !loss.is_smooth_at(&y, &x, &v, &class) {
            continue;
        }
        let g = loss.grad_x(&y, &x, &v, &class);
        let fd = DMatrix::from_fn(l, r, |i, j| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[(i, j)] += h;
            xm[(i, j)] -= h;
            (loss.eval(&y, &xp, &v, &class) - loss.eval(&y, &xm, &v, &class)) / (2.0 * h)
        });
        let rel = loss::relative_error(&g, &fd);
        if rel > 1e-5 {
            failures.push(format!(
                "grad_x disagrees with finite differences (trial {trial}, relative error {rel:.2e})"
            ));
        }
        let d3 = loss.d3(&y, &x, &v, &class);
        if loss.depends_on_v() {
            let fd3 = DMatrix::from_fn(r, r, |i, j| {
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[(i, j)] += h;
                vm[(i, j)] -= h;
                (loss.eval(&y, &x, &vp, &class) - loss.eval(&y, &x, &vm, &class)) / (2.0 * h)
            });
            let rel = loss::relative_error(&d3, &fd3);
            if rel > 1e-5 {
                failures.push(format!(
                    "d3 disagrees with finite differences (trial {trial}, relative error {rel:.2e})"
                ));
            }
        } else if d3.amax() != 0.0 {
            failures.push("d3 must vanish for a loss without v-dependence".to_string());
        }
    }
    failures
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossKind;

    fn one_atom(pi: f64) -> SpectralAtom {
        SpectralAtom {
            weight: 1.0,
            gamma: ClusterMap::from_fn(&[1], |_, _| 1.0),
            tau: ClusterMap::from_fn(&[1], |_, _| 0.0),
            pi: vec![pi],
        }
    }

    fn dims1() -> Dimensions {
        Dimensions {
            seq_len: 1,
            student_units: 1,
            teacher_units: 1,
            clusters: vec![1],
            alpha: 1.0,
            lambda: 0.1,
            dim: 100,
        }
    }

    #[test]
    fn single_atom_statistics() {
        let nu = SpectralMeasure {
            atoms: vec![one_atom(1.0)],
        };
        let f = compute_fixed_statistics(&nu, &dims1()).unwrap();
        assert_eq!(f.rho.get(0, 0)[(0, 0)], 1.0);
        assert_eq!(f.m_star.get(0, 0)[0], 0.0);
    }

    #[test]
    fn symmetric_pair_statistics() {
        let mut a = one_atom(1.0);
        let mut b = one_atom(-1.0);
        a.weight = 0.5;
        b.weight = 0.5;
        let nu = SpectralMeasure { atoms: vec![a, b] };
        let f = compute_fixed_statistics(&nu, &dims1()).unwrap();
        assert_eq!(f.rho.get(0, 0)[(0, 0)], 1.0);
        assert_eq!(f.m_star.get(0, 0)[0], 0.0);
    }

    #[test]
    fn mismatched_atom_is_rejected() {
        let mut atom = one_atom(1.0);
        atom.pi = vec![1.0, 2.0];
        let nu = SpectralMeasure { atoms: vec![atom] };
        assert!(matches!(
            compute_fixed_statistics(&nu, &dims1()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn cluster_map_is_row_major_and_total() {
        let m = ClusterMap::from_fn(&[2, 3], |l, k| (l, k));
        assert_eq!(m.len(), 5);
        assert_eq!(*m.get(1, 2), (1, 2));
        assert_eq!(m.slot(1, 0), 2);
        assert!(ClusterMap::from_nested(&[2, 3], vec![vec![1, 2], vec![3]]).is_err());
    }

    #[test]
    fn uniform_class_law_is_product() {
        let law = ClassLaw::uniform(&[2, 3]);
        assert_eq!(law.support.len(), 6);
        assert!((law.probs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(law.support[4], vec![1, 1]);
    }

    fn ridge_spec() -> ModelSpec {
        ModelSpec {
            dimensions: dims1(),
            class_law: ClassLaw::uniform(&[1]),
            spectrum: SpectralMeasure {
                atoms: vec![one_atom(1.0)],
            },
            loss: LossConfig::new(LossKind::Square),
        }
    }

    #[test]
    fn well_formed_spec_validates() {
        let report = validate_spec(&ridge_spec());
        assert!(report.is_ok(), "{report:?}");
    }

    #[test]
    fn bad_class_probs_are_reported() {
        let mut spec = ridge_spec();
        spec.class_law.probs = vec![0.9];
        let report = validate_spec(&spec);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].component, "ClassLaw");
    }

    #[test]
    fn toml_round_trip() {
        let spec = ridge_spec();
        let text = spec.to_toml().unwrap();
        let back = ModelSpec::from_toml(&text).unwrap();
        assert_eq!(back.dimensions, spec.dimensions);
        assert_eq!(back.spectrum, spec.spectrum);
        assert_eq!(back.class_law, spec.class_law);
    }
}
