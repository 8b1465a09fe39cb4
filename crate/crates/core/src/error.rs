use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid site index {site} for layer {layer} (output grid has {sites} sites)")]
    InvalidSite {
        layer: usize,
        site: usize,
        sites: usize,
    },

    #[error("not PSD: smallest eigenvalue {min_eig:e} is below -{tol:e}")]
    NotPsd { min_eig: f64, tol: f64 },

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
