//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the domain of a physical relation (e.g. a fully buried wheel).
    #[error("domain error: {0}")]
    Domain(String),

    /// Contact geometry at which the closed-form coefficients are singular.
    #[error("singular contact geometry: {0}")]
    Singularity(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Regressor matrix without full column rank.
    #[error("degenerate estimate: regressor rank {rank} < {required}")]
    RankDeficient { rank: usize, required: usize },

    /// Requested torque lies outside what the soil can support for the given load.
    #[error("no equilibrium contact: torque {requested:.6} N*m outside achievable range [{min:.6}, {max:.6}] N*m")]
    Saturation { requested: f64, min: f64, max: f64 },

    /// Load exceeds the bearing capacity within the admissible sinkage range.
    #[error("no equilibrium contact: load {requested:.6} N exceeds bearing capacity {capacity:.6} N")]
    BearingCapacity { requested: f64, capacity: f64 },

    #[error("equilibrium solver did not converge: residual N {residual_normal:.3e} N, M {residual_torque:.3e} N*m")]
    NoConvergence { residual_normal: f64, residual_torque: f64 },

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training produced a non-finite loss; carries the loss history up to the failure.
    #[error("training diverged at iteration {iteration}")]
    Divergence {
        iteration: usize,
        history: Vec<crate::metatrain::LossRecord>,
    },

    #[error("missing checkpoint for model `{0}`")]
    MissingCheckpoint(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Singularity(_) => "singularity",
            Error::Argument(_) => "argument",
            Error::Shape(_) => "shape",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::Saturation { .. } => "saturation",
            Error::BearingCapacity { .. } => "bearing_capacity",
            Error::NoConvergence { .. } => "no_convergence",
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::NonFinite(_) => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::MissingCheckpoint(_) => "missing_checkpoint",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
