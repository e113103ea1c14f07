//! Finite-dimensional instances of the token mixture.
//!
//! Covariances are diagonal in the canonical basis. Each coordinate carries one
//! spectral atom, so the empirical measure of the instance is the quantized `nu`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassLaw, ClusterMap, FixedStatistics, ModelSpec, SpectralMeasure};

const MAGIC: &[u8; 8] = b"SEQMIDS1";

/// Population law of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub dim: usize,
    pub clusters: Vec<usize>,
    pub class_law: ClassLaw,
    /// Diagonal of `Sigma_{l,k}`.
    pub cov_diag: ClusterMap<DVector<f64>>,
    /// `mu_{l,k}` with `||mu|| = O(1)`; entry `i` is `tau_i / sqrt(d)`.
    pub means: ClusterMap<DVector<f64>>,
    /// `w*`, `d x t`.
    pub teacher: DMatrix<f64>,
    /// Coordinates given to each atom.
    pub atom_counts: Vec<usize>,
}

/// Number of coordinates per atom: `floor(w d)`, remainder to the heaviest atom.
pub fn quantize_weights(weights: &[f64], d: usize) -> Result<Vec<usize>> {
    let live = weights.iter().filter(|&&w| w > 0.0).count();
    if d < live {
        return Err(Error::Validation(format!(
            "dimension {d} is smaller than the number of spectral atoms ({live})"
        )));
    }
    let mut counts: Vec<usize> = weights.iter().map(|w| (w * d as f64).floor() as usize).collect();
    let heaviest = (0..weights.len())
        .max_by(|&a, &b| weights[a].total_cmp(&weights[b]).then(b.cmp(&a)))
        .ok_or_else(|| Error::Validation("spectral measure has no atoms".into()))?;
    let used: usize = counts.iter().sum();
    counts[heaviest] += d - used;
    Ok(counts)
}

impl Population {
    pub fn new(spec: &ModelSpec, d: usize) -> Result<Self> {
        let nu = &spec.spectrum;
        let dims = &spec.dimensions;
        let t = dims.teacher_units;
        let weights: Vec<f64> = nu.atoms.iter().map(|a| a.weight).collect();
        let counts = quantize_weights(&weights, d)?;
        let mut owner = Vec::with_capacity(d);
        for (a, &c) in counts.iter().enumerate() {
            owner.extend(std::iter::repeat(a).take(c));
        }
        for atom in &nu.atoms {
            if atom.pi.len() != t || atom.gamma.cluster_counts() != dims.clusters {
                return Err(Error::Validation("spectral atom shape does not match the dimensions".into()));
            }
        }
        let sd = (d as f64).sqrt();
        let cov_diag = ClusterMap::from_fn(&dims.clusters, |l, k| {
            DVector::from_fn(d, |i, _| *nu.atoms[owner[i]].gamma.get(l, k))
        });
        let means = ClusterMap::from_fn(&dims.clusters, |l, k| {
            DVector::from_fn(d, |i, _| *nu.atoms[owner[i]].tau.get(l, k) / sd)
        });
        let teacher = DMatrix::from_fn(d, t, |i, j| nu.atoms[owner[i]].pi[j]);
        Ok(Self {
            dim: d,
            clusters: dims.clusters.clone(),
            class_law: spec.class_law.clone(),
            cov_diag,
            means,
            teacher,
            atom_counts: counts,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.clusters.len()
    }

    pub fn teacher_units(&self) -> usize {
        self.teacher.ncols()
    }

    /// Empirical spectral measure of the instance, one atom per coordinate.
    pub fn spectrum(&self) -> SpectralMeasure {
        SpectralMeasure::from_instance(&self.cov_diag, &self.means, &self.teacher)
    }

    /// `rho = w*^T Sigma w* / d`, `m* = mu^T w* / sqrt(d)` by direct products.
    pub fn fixed_statistics(&self) -> FixedStatistics {
        let d = self.dim as f64;
        FixedStatistics {
            rho: self.cov_diag.map(|_, _, g| {
                let sw = DMatrix::from_fn(self.dim, self.teacher.ncols(), |i, j| g[i] * self.teacher[(i, j)]);
                crate::linalg::symmetrize(&(self.teacher.transpose() * sw / d))
            }),
            m_star: self.means.map(|_, _, mu| self.teacher.transpose() * mu / d.sqrt()),
        }
    }

    /// Draws `n` samples: per-token `n x d` matrices and class tuples.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> (Vec<DMatrix<f64>>, Vec<Vec<usize>>) {
        let l = self.seq_len();
        let d = self.dim;
        let mut tokens: Vec<DMatrix<f64>> = (0..l).map(|_| DMatrix::zeros(n, d)).collect();
        let mut classes = Vec::with_capacity(n);
        let sds: ClusterMap<Vec<f64>> = self.cov_diag.map(|_, _, g| g.iter().map(|x| x.sqrt()).collect());
        for mu in 0..n {
            let c = self.class_law.support[self.class_law.sample_index(rng)].clone();
            for (tok, x) in tokens.iter_mut().enumerate() {
                let sd = sds.get(tok, c[tok]);
                let mean = self.means.get(tok, c[tok]);
                for i in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    x[(mu, i)] = mean[i] + sd[i] * z;
                }
            }
            classes.push(c);
        }
        (tokens, classes)
    }

    /// `y_mu = x_mu w* / sqrt(d)`, one `L x t` matrix per sample.
    pub fn labels(&self, tokens: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let n = tokens.first().map_or(0, |x| x.nrows());
        let t = self.teacher.ncols();
        let sd = (self.dim as f64).sqrt();
        let per_token: Vec<DMatrix<f64>> = tokens.iter().map(|x| x * &self.teacher / sd).collect();
        (0..n)
            .map(|mu| DMatrix::from_fn(tokens.len(), t, |l, j| per_token[l][(mu, j)]))
            .collect()
    }
}

/// A sampled training set together with its population law.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub population: Population,
    /// One `n x d` matrix per token.
    pub tokens: Vec<DMatrix<f64>>,
    /// One `L x t` label matrix per sample.
    pub labels: Vec<DMatrix<f64>>,
    pub classes: Vec<Vec<usize>>,
    pub seed: u64,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.population.dim
    }

    pub fn seq_len(&self) -> usize {
        self.population.seq_len()
    }

    /// Sample `mu` as an `L x d` matrix.
    pub fn sample(&self, mu: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.seq_len(), self.dim(), |l, i| self.tokens[l][(mu, i)])
    }

    /// Largest deviation between stored labels and `x w* / sqrt(d)`.
    pub fn label_error(&self) -> f64 {
        self.population
            .labels(&self.tokens)
            .iter()
            .zip(&self.labels)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }

    /// Per-`(l, k)` moment checks against the declared mixture.
    ///
    /// Returns the largest z-score over: per-coordinate-averaged class means
    /// projected on `mu_{l,k}`, the mean of `||x - mu||^2 / d`, and the mean of
    /// `x_i / sqrt(gamma_i)` over coordinates.
    pub fn moment_zscores(&self) -> Vec<(usize, usize, f64)> {
        let pop = &self.population;
        let d = pop.dim;
        let mut out = Vec::new();
        for (l, k, g) in pop.cov_diag.iter() {
            let mean = pop.means.get(l, k);
            let rows: Vec<usize> = (0..self.n()).filter(|&mu| self.classes[mu][l] == k).collect();
            if rows.is_empty() {
                continue;
            }
            let cnt = rows.len() as f64;
            let x = &self.tokens[l];
            let trace: f64 = g.sum();
            let trace_sq: f64 = g.iter().map(|v| v * v).sum();
            let mu_norm = mean.norm();
            let mut z = 0.0f64;
            // squared-norm statistic: mean ||x - mu||^2 = Tr Sigma, var 2 Tr Sigma^2
            if trace > 0.0 {
                let s: f64 = rows
                    .iter()
                    .map(|&mu| (0..d).map(|i| (x[(mu, i)] - mean[i]).powi(2)).sum::<f64>())
                    .sum::<f64>()
                    / cnt;
                z = z.max((s - trace).abs() / (2.0 * trace_sq / cnt).sqrt());
            }
            // projection on the mean direction: mean mu^T x = ||mu||^2, var mu^T Sigma mu
            if mu_norm > 0.0 {
                let var: f64 = (0..d).map(|i| mean[i] * mean[i] * g[i]).sum();
                let s: f64 = rows
                    .iter()
                    .map(|&mu| (0..d).map(|i| mean[i] * x[(mu, i)]).sum::<f64>())
                    .sum::<f64>()
                    / cnt;
                if var > 0.0 {
                    z = z.max((s - mu_norm * mu_norm).abs() / (var / cnt).sqrt());
                }
            }
            // whitened coordinate average: mean 0, var 1 / (count * d_live)
            let live: Vec<usize> = (0..d).filter(|&i| g[i] > 0.0).collect();
            if !live.is_empty() {
                let s: f64 = rows
                    .iter()
                    .map(|&mu| live.iter().map(|&i| (x[(mu, i)] - mean[i]) / g[i].sqrt()).sum::<f64>())
                    .sum::<f64>()
                    / (cnt * live.len() as f64);
                z = z.max(s.abs() / (1.0 / (cnt * live.len() as f64)).sqrt());
            }
            out.push((l, k, z));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let pop = &self.population;
        let header = Header {
            dim: pop.dim,
            n: self.n(),
            teacher_units: pop.teacher_units(),
            clusters: pop.clusters.clone(),
            seed: self.seed,
            class_law: pop.class_law.clone(),
            atom_counts: pop.atom_counts.clone(),
        };
        let text = serde_json::to_vec(&header).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(text.len() as u64).to_le_bytes())?;
        w.write_all(&text)?;
        let mut put = |x: f64| w.write_all(&x.to_le_bytes());
        for g in pop.cov_diag.values() {
            g.iter().try_for_each(|&x| put(x))?;
        }
        for m in pop.means.values() {
            m.iter().try_for_each(|&x| put(x))?;
        }
        for i in 0..pop.dim {
            for j in 0..pop.teacher_units() {
                put(pop.teacher[(i, j)])?;
            }
        }
        for x in &self.tokens {
            for mu in 0..x.nrows() {
                for i in 0..x.ncols() {
                    put(x[(mu, i)])?;
                }
            }
        }
        for y in &self.labels {
            for l in 0..y.nrows() {
                for j in 0..y.ncols() {
                    put(y[(l, j)])?;
                }
            }
        }
        for c in &self.classes {
            c.iter().try_for_each(|&k| put(k as f64))?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse("not a dataset container".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 24 {
            return Err(Error::Parse("dataset header too large".into()));
        }
        let mut text = vec![0u8; len];
        r.read_exact(&mut text)?;
        let h: Header = serde_json::from_slice(&text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut get = || -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let (d, n, t, l) = (h.dim, h.n, h.teacher_units, h.clusters.len());
        let cov_diag = ClusterMap::try_from_fn(&h.clusters, |_, _| {
            (0..d).map(|_| get()).collect::<Result<Vec<_>>>().map(DVector::from_vec)
        })?;
        let means = ClusterMap::try_from_fn(&h.clusters, |_, _| {
            (0..d).map(|_| get()).collect::<Result<Vec<_>>>().map(DVector::from_vec)
        })?;
        let teacher = DMatrix::from_row_slice(d, t, &(0..d * t).map(|_| get()).collect::<Result<Vec<_>>>()?);
        let mut tokens = Vec::with_capacity(l);
        for _ in 0..l {
            let vals = (0..n * d).map(|_| get()).collect::<Result<Vec<_>>>()?;
            tokens.push(DMatrix::from_row_slice(n, d, &vals));
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let vals = (0..l * t).map(|_| get()).collect::<Result<Vec<_>>>()?;
            labels.push(DMatrix::from_row_slice(l, t, &vals));
        }
        let mut classes = Vec::with_capacity(n);
        for _ in 0..n {
            let c = (0..l).map(|_| get().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
            classes.push(c);
        }
        let data = Dataset {
            population: Population {
                dim: d,
                clusters: h.clusters,
                class_law: h.class_law,
                cov_diag,
                means,
                teacher,
                atom_counts: h.atom_counts,
            },
            tokens,
            labels,
            classes,
            seed: h.seed,
        };
        if data.label_error() > 1e-12 {
            return Err(Error::Parse("stored labels are inconsistent with teacher and inputs".into()));
        }
        Ok(data)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
    n: usize,
    teacher_units: usize,
    clusters: Vec<usize>,
    seed: u64,
    class_law: ClassLaw,
    atom_counts: Vec<usize>,
}

/// Samples a training set of size `n` at dimension `d`.
pub fn generate_dataset(spec: &ModelSpec, d: usize, n: usize, seed: u64) -> Result<Dataset> {
    let population = Population::new(spec, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tokens, classes) = population.sample(n, &mut rng);
    let labels = population.labels(&tokens);
    Ok(Dataset {
        population,
        tokens,
        labels,
        classes,
        seed,
    })
}

/// `n = round(alpha d)`.
pub fn sample_count(alpha: f64, d: usize) -> usize {
    (alpha * d as f64).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{LossConfig, LossKind};
    use crate::model::{compute_fixed_statistics, Dimensions, SpectralAtom};

    fn spec(clusters: Vec<usize>, atoms: Vec<SpectralAtom>) -> ModelSpec {
        ModelSpec {
            dimensions: Dimensions {
                seq_len: clusters.len(),
                student_units: 1,
                teacher_units: atoms[0].pi.len(),
                clusters: clusters.clone(),
                alpha: 1.0,
                lambda: 0.1,
                dim: 100,
            },
            class_law: ClassLaw::uniform(&clusters),
            spectrum: SpectralMeasure { atoms },
            loss: LossConfig::new(LossKind::Square),
        }
    }

    fn atom(w: f64, clusters: &[usize], g: f64, tau: impl Fn(usize, usize) -> f64, pi: f64) -> SpectralAtom {
        SpectralAtom {
            weight: w,
            gamma: ClusterMap::from_fn(clusters, |_, _| g),
            tau: ClusterMap::from_fn(clusters, tau),
            pi: vec![pi],
        }
    }

    #[test]
    fn quantization_gives_remainder_to_heaviest() {
        assert_eq!(quantize_weights(&[0.3, 0.7], 10).unwrap(), vec![3, 7]);
        assert_eq!(quantize_weights(&[1.0 / 3.0; 3], 10).unwrap(), vec![4, 3, 3]);
        assert_eq!(quantize_weights(&[0.25, 0.5, 0.25], 7).unwrap(), vec![1, 5, 1]);
        assert!(quantize_weights(&[0.5, 0.5], 1).is_err());
    }

    #[test]
    fn isotropic_tokens_have_unit_norm() {
        let s = spec(vec![1], vec![atom(1.0, &[1], 1.0, |_, _| 0.0, 1.0)]);
        let data = generate_dataset(&s, 200, 300, 3).unwrap();
        let norms: Vec<f64> = (0..300).map(|mu| data.tokens[0].row(mu).norm_squared() / 200.0).collect();
        let mean = norms.iter().sum::<f64>() / 300.0;
        // ||x||^2 / d has variance 2 / d per sample
        assert!((mean - 1.0).abs() <= 4.0 * (2.0 / 200.0 / 300.0f64).sqrt(), "{mean}");
    }

    #[test]
    fn symmetric_means_are_recovered() {
        let s = spec(vec![2], vec![atom(1.0, &[2], 0.5, |_, k| if k == 0 { 1.0 } else { -1.0 }, 0.0)]);
        let d = 100;
        let data = generate_dataset(&s, d, 2000, 9).unwrap();
        for k in 0..2 {
            let rows: Vec<usize> = (0..2000).filter(|&mu| data.classes[mu][0] == k).collect();
            let target = data.population.means.get(0, k);
            assert!((target.norm() - 1.0).abs() < 1e-12);
            for i in [0, 17, 99] {
                let m = rows.iter().map(|&mu| data.tokens[0][(mu, i)]).sum::<f64>() / rows.len() as f64;
                let se = (0.5 / rows.len() as f64).sqrt();
                assert!((m - target[i]).abs() <= 4.0 * se, "class {k} coord {i}: {m} vs {}", target[i]);
            }
        }
    }

    #[test]
    fn generator_self_test_passes_at_four_sigma() {
        let clusters = vec![2, 1];
        let atoms = vec![
            atom(0.5, &clusters, 1.0, |l, k| if l == 0 && k == 0 { 1.0 } else { -0.5 }, 1.0),
            atom(0.5, &clusters, 0.25, |_, _| 0.3, -1.0),
        ];
        let s = spec(clusters, atoms);
        let data = generate_dataset(&s, 150, 400, 21).unwrap();
        for (l, k, z) in data.moment_zscores() {
            assert!(z <= 4.0, "({l},{k}) z = {z}");
        }
    }

    #[test]
    fn labels_are_exact_projections() {
        let s = spec(vec![1], vec![atom(0.5, &[1], 1.0, |_, _| 0.0, 1.0), atom(0.5, &[1], 1.0, |_, _| 0.0, -1.0)]);
        let data = generate_dataset(&s, 64, 50, 1).unwrap();
        assert!(data.label_error() <= 1e-12);
        let x = data.sample(7);
        let y = &x * &data.population.teacher / 8.0;
        assert!((y - &data.labels[7]).amax() <= 1e-12);
    }

    #[test]
    fn instance_statistics_match_spectral_integrals() {
        let clusters = vec![2];
        let atoms = vec![
            atom(0.25, &clusters, 2.0, |_, k| k as f64 + 0.5, 1.0),
            atom(0.75, &clusters, 0.5, |_, k| 1.0 - k as f64, -2.0),
        ];
        let s = spec(clusters, atoms);
        let pop = Population::new(&s, 200).unwrap();
        let direct = pop.fixed_statistics();
        let from_nu = compute_fixed_statistics(&pop.spectrum(), &s.dimensions).unwrap();
        let declared = compute_fixed_statistics(&s.spectrum, &s.dimensions).unwrap();
        for (l, k, rho) in direct.rho.iter() {
            assert!((rho - from_nu.rho.get(l, k)).amax() <= 1e-10);
            assert!((rho - declared.rho.get(l, k)).amax() <= 1e-10);
            assert!((direct.m_star.get(l, k) - from_nu.m_star.get(l, k)).amax() <= 1e-10);
        }
    }

    #[test]
    fn container_round_trips() {
        let s = spec(vec![2], vec![atom(1.0, &[2], 0.5, |_, k| if k == 0 { 1.0 } else { -1.0 }, 0.3)]);
        let data = generate_dataset(&s, 30, 20, 5).unwrap();
        let mut buf = Vec::new();
        data.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.population, data.population);
        assert_eq!(back.tokens, data.tokens);
        assert_eq!(back.labels, data.labels);
        assert_eq!(back.classes, data.classes);
        assert_eq!(back.seed, 5);
        buf[0] = b'X';
        assert!(Dataset::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(vec![1], vec![atom(1.0, &[1], 1.0, |_, _| 0.0, 1.0)]);
        let a = generate_dataset(&s, 20, 10, 77).unwrap();
        let b = generate_dataset(&s, 20, 10, 77).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }
}
