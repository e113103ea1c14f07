//! Named model instances used by the verification suite and the CLI.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{ExpectationRule, McPlan};
use crate::loss::{LossConfig, LossKind};
use crate::model::{ClassLaw, ClusterMap, Dimensions, ModelSpec, SpectralAtom, SpectralMeasure};
use crate::saddle::SolverConfig;

pub const NAMES: [&str; 4] = ["ridge", "logistic-gmm", "square-gmm", "multi-token"];

/// A model together with the numerics it is verified with.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Instance {
    pub name: String,
    pub spec: ModelSpec,
    pub solver: SolverConfig,
}

pub fn by_name(name: &str, alpha: f64) -> Result<Instance> {
    match name {
        "ridge" => Ok(ridge(alpha, 0.1)),
        "logistic-gmm" => Ok(logistic_gmm(alpha)),
        "square-gmm" => Ok(square_gmm(alpha)),
        "multi-token" => Ok(multi_token(alpha, 1.5)),
        other => Err(Error::Validation(format!(
            "unknown instance '{other}' (known: {})",
            NAMES.join(", ")
        ))),
    }
}

fn exact_solver(nodes: usize) -> SolverConfig {
    SolverConfig {
        rule: ExpectationRule::GaussHermite { nodes },
        tol: 1e-10,
        ..SolverConfig::default()
    }
}

/// `L = K = r = t = 1`, `Sigma = I`, teacher entries `+-1`, square loss.
pub fn ridge(alpha: f64, lambda: f64) -> Instance {
    let atom = |pi: f64| SpectralAtom {
        weight: 0.5,
        gamma: ClusterMap::from_fn(&[1], |_, _| 1.0),
        tau: ClusterMap::from_fn(&[1], |_, _| 0.0),
        pi: vec![pi],
    };
    Instance {
        name: "ridge".into(),
        spec: ModelSpec {
            dimensions: Dimensions {
                seq_len: 1,
                student_units: 1,
                teacher_units: 1,
                clusters: vec![1],
                alpha,
                lambda,
                dim: 1000,
            },
            class_law: ClassLaw::uniform(&[1]),
            spectrum: SpectralMeasure {
                atoms: vec![atom(1.0), atom(-1.0)],
            },
            loss: LossConfig::new(LossKind::Square),
        },
        solver: exact_solver(4),
    }
}

fn gmm(alpha: f64, loss: LossKind) -> ModelSpec {
    ModelSpec {
        dimensions: Dimensions {
            seq_len: 1,
            student_units: 1,
            teacher_units: 1,
            clusters: vec![2],
            alpha,
            lambda: 0.05,
            dim: 500,
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
        loss: LossConfig::new(loss),
    }
}

/// Binary mixture, means `+-mu` with `||mu|| = 1`, `Sigma = I / 2`, logistic loss
/// on the cluster labels, misclassification test metric.
pub fn logistic_gmm(alpha: f64) -> Instance {
    Instance {
        name: "logistic-gmm".into(),
        spec: gmm(alpha, LossKind::Logistic { labels: vec![1.0, -1.0] }),
        solver: SolverConfig {
            rule: ExpectationRule::GaussHermite { nodes: 48 },
            test_rule: Some(ExpectationRule::MonteCarlo(McPlan::new(1_000_000, 7))),
            tol: 1e-10,
            ..SolverConfig::default()
        },
    }
}

/// Same mixture with the square loss on the labels.
pub fn square_gmm(alpha: f64) -> Instance {
    Instance {
        name: "square-gmm".into(),
        spec: gmm(alpha, LossKind::LabelSquare { labels: vec![1.0, -1.0] }),
        solver: SolverConfig {
            rule: ExpectationRule::GaussHermite { nodes: 4 },
            test_rule: Some(ExpectationRule::MonteCarlo(McPlan::new(1_000_000, 7))),
            tol: 1e-10,
            ..SolverConfig::default()
        },
    }
}

/// Two tokens with one cluster each; the second token's covariance takes the
/// values `1` and `gamma2` on equal halves of the coordinates.
pub fn multi_token(alpha: f64, gamma2: f64) -> Instance {
    let clusters = [1usize, 1];
    let atoms = [(1.0, 1.0), (1.0, -1.0), (gamma2, 1.0), (gamma2, -1.0)]
        .into_iter()
        .map(|(g2, pi)| SpectralAtom {
            weight: 0.25,
            gamma: ClusterMap::from_fn(&clusters, |l, _| if l == 0 { 1.0 } else { g2 }),
            tau: ClusterMap::from_fn(&clusters, |_, _| 0.0),
            pi: vec![pi],
        })
        .collect();
    Instance {
        name: "multi-token".into(),
        spec: ModelSpec {
            dimensions: Dimensions {
                seq_len: 2,
                student_units: 1,
                teacher_units: 1,
                clusters: clusters.to_vec(),
                alpha,
                lambda: 0.1,
                dim: 1000,
            },
            class_law: ClassLaw::uniform(&clusters),
            spectrum: SpectralMeasure { atoms },
            loss: LossConfig::new(LossKind::Square),
        },
        solver: exact_solver(4),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_spec;

    #[test]
    fn every_instance_validates() {
        for name in NAMES {
            let inst = by_name(name, 1.0).unwrap();
            assert!(validate_spec(&inst.spec).is_ok(), "{name}: {:?}", validate_spec(&inst.spec));
            inst.solver.validate().unwrap();
        }
    }

    #[test]
    fn unknown_name_is_a_validation_error() {
        assert!(by_name("attention", 1.0).unwrap_err().is_validation());
    }

    #[test]
    fn gmm_means_have_unit_norm() {
        let inst = logistic_gmm(1.0);
        let fixed = inst.spec.fixed_statistics().unwrap();
        assert_eq!(fixed.rho.get(0, 0)[(0, 0)], 0.0);
        let tau2: f64 = inst.spec.spectrum.atoms.iter().map(|a| a.weight * a.tau.get(0, 0).powi(2)).sum();
        assert!((tau2 - 1.0).abs() < 1e-15);
    }
}
