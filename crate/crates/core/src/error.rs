use thiserror::Error;

#[derive(Debug, Error)]
pub enum CradleError {
    #[error("mode index {index} out of range for {num_modes} modes")]
    InvalidMode { index: usize, num_modes: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("cutoff {cutoff} too small for |alpha| = {alpha}: truncated Poisson tail {tail:.3e}")]
    CutoffTooSmall {
        cutoff: usize,
        alpha: f64,
        tail: f64,
    },

    #[error("coefficient blow-up at step {step}: |value| = {magnitude:.3e}")]
    BlowUp { step: usize, magnitude: f64 },

    #[error("non-finite value encountered at step {step}")]
    NonFinite { step: usize },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("covariance is not embeddable: negative spectral mass fraction {fraction:.3e}")]
    NotEmbeddable { fraction: f64 },

    #[error(
        "memory cap exceeded: {steps} steps need {required_bytes} bytes (cap is {cap_steps} steps)"
    )]
    MemoryCap {
        steps: usize,
        cap_steps: usize,
        required_bytes: u64,
    },

    #[error("convergence check failed: {0}")]
    Convergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed data file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CradleError>;
