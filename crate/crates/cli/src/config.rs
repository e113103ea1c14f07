//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use seqmi::erm::TrainConfig;
use seqmi::gamp::GampConfig;
use seqmi::model::ModelSpec;
use seqmi::saddle::SolverConfig;
use seqmi::verify::VerifyOptions;
use seqmi::zoo;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Model zoo instance name.
    pub instance: Option<String>,
    /// Model file, relative to the config file.
    pub spec: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub alphas: Vec<f64>,
    /// Defaults to the model's own lambda.
    pub lambdas: Option<Vec<f64>>,
    #[serde(default = "yes")]
    pub warm_start: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GampSection {
    pub dim: usize,
    pub seeds: Vec<u64>,
    pub save_datasets: bool,
    #[serde(flatten)]
    pub config: GampConfig,
}

impl Default for GampSection {
    fn default() -> Self {
        Self {
            dim: 500,
            seeds: vec![0],
            save_datasets: false,
            config: GampConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErmSection {
    pub dim: usize,
    pub seeds: Vec<u64>,
    pub n_test: usize,
    pub train: TrainConfig,
}

impl Default for ErmSection {
    fn default() -> Self {
        Self {
            dim: 500,
            seeds: (0..10).collect(),
            n_test: 100_000,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub solver: Option<SolverConfig>,
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub gamp: GampSection,
    #[serde(default)]
    pub erm: ErmSection,
    #[serde(default)]
    pub verify: VerifyOptions,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// `error`, `warn`, `info`, `debug` or `trace`.
    pub verbosity: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            verbosity: "info".into(),
        }
    }
}

/// A parsed config together with where it came from.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    /// SHA-256 of the file contents, hex.
    pub hash: String,
}

/// Bad input; maps to the validation exit code.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> anyhow::Result<Loaded> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let config = Self::parse(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.validate(&base_dir)?;
        Ok(Loaded {
            config,
            base_dir,
            hash: hex::encode(Sha256::digest(text.as_bytes())),
        })
    }

    pub fn validate(&self, base_dir: &Path) -> anyhow::Result<()> {
        match (&self.model.instance, &self.model.spec) {
            (Some(_), Some(_)) => return Err(invalid("model: give either `instance` or `spec`, not both")),
            (None, None) => return Err(invalid("model: one of `instance` or `spec` is required")),
            (Some(name), None) if !zoo::NAMES.contains(&name.as_str()) => {
                return Err(invalid(format!("unknown instance '{name}' (known: {})", zoo::NAMES.join(", "))))
            }
            (None, Some(p)) if !base_dir.join(p).is_file() => {
                return Err(invalid(format!("model file {} does not exist", base_dir.join(p).display())))
            }
            _ => {}
        }
        if let Some(s) = &self.sweep {
            if s.alphas.is_empty() {
                return Err(invalid("sweep.alphas must not be empty"));
            }
            if s.alphas.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
                return Err(invalid("sweep.alphas must be positive"));
            }
            if let Some(l) = &s.lambdas {
                if l.is_empty() {
                    return Err(invalid("sweep.lambdas must not be empty"));
                }
                if l.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                    return Err(invalid("sweep.lambdas must be positive"));
                }
            }
        }
        if self.gamp.seeds.is_empty() || self.erm.seeds.is_empty() {
            return Err(invalid("seed lists must not be empty"));
        }
        if self.gamp.dim == 0 || self.erm.dim == 0 {
            return Err(invalid("dimensions must be positive"));
        }
        if let Some(s) = &self.solver {
            s.validate().map_err(|e| invalid(e.to_string()))?;
        }
        self.gamp.config.validate().map_err(|e| invalid(e.to_string()))?;
        self.erm.train.validate().map_err(|e| invalid(e.to_string()))?;
        if !["error", "warn", "info", "debug", "trace"].contains(&self.output.verbosity.as_str()) {
            return Err(invalid(format!("unknown verbosity '{}'", self.output.verbosity)));
        }
        Ok(())
    }

    /// Model and solver settings; explicit `[solver]` wins over the instance defaults.
    pub fn resolve(&self, base_dir: &Path) -> anyhow::Result<(String, ModelSpec, SolverConfig)> {
        let (name, spec, solver) = if let Some(name) = &self.model.instance {
            let inst = zoo::by_name(name, 1.0).map_err(|e| invalid(e.to_string()))?;
            let alpha = self.sweep.as_ref().map_or(inst.spec.dimensions.alpha, |s| s.alphas[0]);
            let inst = zoo::by_name(name, alpha).map_err(|e| invalid(e.to_string()))?;
            (inst.name, inst.spec, inst.solver)
        } else {
            let path = base_dir.join(self.model.spec.as_ref().expect("validated"));
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let spec = ModelSpec::from_toml(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            let name = path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            (name, spec, SolverConfig::default())
        };
        seqmi::model::validate_spec(&spec).into_result().map_err(|e| invalid(e.to_string()))?;
        Ok((name, spec, self.solver.clone().unwrap_or(solver)))
    }

    pub fn alphas(&self, spec: &ModelSpec) -> Vec<f64> {
        self.sweep.as_ref().map_or(vec![spec.dimensions.alpha], |s| s.alphas.clone())
    }

    pub fn lambdas(&self, spec: &ModelSpec) -> Vec<f64> {
        self.sweep
            .as_ref()
            .and_then(|s| s.lambdas.clone())
            .unwrap_or_else(|| vec![spec.dimensions.lambda])
    }
}
