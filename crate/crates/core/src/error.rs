use thiserror::Error;

/// Errors raised by the numerical pipeline.
///
/// Variants map onto the CLI exit-code contract through [`Error::is_validation`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NonSymmetric { asymmetry: f64 },

    #[error("matrix has eigenvalue {eigenvalue:.3e} below the PSD tolerance")]
    NegativeEigenvalue { eigenvalue: f64 },

    #[error("degenerate-overlap: q_({token},{cluster}) is singular but theta has a component outside its range ({residual:.3e})")]
    DegenerateOverlap {
        token: usize,
        cluster: usize,
        residual: f64,
    },

    #[error("degenerate-teacher-channel: Schur complement rho - theta^T q^-1 theta for ({token},{cluster}) has eigenvalue {eigenvalue:.3e}")]
    DegenerateTeacherChannel {
        token: usize,
        cluster: usize,
        eigenvalue: f64,
    },

    #[error("inconsistent-overlaps: joint (x, y) covariance for ({token},{cluster}) has eigenvalue {eigenvalue:.3e}")]
    InconsistentOverlaps {
        token: usize,
        cluster: usize,
        eigenvalue: f64,
    },

    #[error("prox did not converge after {iterations} iterations (residual {residual:.3e})")]
    ProxNonConvergence {
        iterations: usize,
        residual: f64,
        last_iterate: Vec<f64>,
    },

    #[error("loss-blowup: non-finite loss value along the prox path")]
    LossBlowup,

    #[error("non-finite integrand value for class tuple #{class} at sample {sample}")]
    NonFiniteIntegrand { class: usize, sample: usize },

    #[error("singular resolvent at spectral atom {atom} (min singular value {min_singular:.3e})")]
    SingularResolvent { atom: usize, min_singular: f64 },

    #[error("fixed-point iteration diverged at iteration {iteration} (residual {residual:.3e})")]
    Divergence {
        iteration: usize,
        residual: f64,
        residual_history: Vec<f64>,
    },

    #[error("singular estimator solve at coordinate {coordinate}")]
    SingularWeightSolve { coordinate: usize },

    #[error("prox failure at sample {sample}, iteration {iteration}: {source}")]
    SampleProx {
        sample: usize,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stalled: objective failed to decrease for {steps} consecutive backtracked steps (last {objective:.6e}, grad-norm {grad_norm:.3e})")]
    Stalled {
        steps: usize,
        objective: f64,
        grad_norm: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// True for errors that stem from bad input rather than numerics.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Parse(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
