use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has (near) zero length")]
    ZeroVector,

    #[error("dimension must be at least 2, got {0}")]
    InvalidDimension(usize),

    #[error("band width {0} is outside (0, 1]")]
    InvalidBand(f64),

    #[error("manipulation cost must be positive, got {0}")]
    InvalidCost(f64),

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("draw budget exceeded{}: {draws} draws without a hit (cap {cap})", epoch.map(|k| format!(" in epoch {k}")).unwrap_or_default())]
    DrawBudgetExceeded {
        epoch: Option<usize>,
        draws: u64,
        cap: u64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach an epoch index to a draw-budget failure raised by an inner loop.
    pub fn in_epoch(self, k: usize) -> Self {
        match self {
            Error::DrawBudgetExceeded { draws, cap, .. } => Error::DrawBudgetExceeded {
                epoch: Some(k),
                draws,
                cap,
            },
            other => other,
        }
    }
}
