use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("optimizer failed to find a finite objective value (best point {best:?})")]
    Convergence { best: Vec<f64>, value: f64 },

    #[error("root bracket [{lo}, {hi}] does not straddle the target (f(lo)={f_lo}, f(hi)={f_hi})")]
    Bracket {
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: non-positive response on sampled rows {rows:?}")]
    Validation { rows: Vec<usize> },

    #[error("data error: {0}")]
    Data(String),

    #[error("area {area}: posterior moment E[1/u] undefined (shape {shape} <= 1)")]
    UndefinedMoment { area: String, shape: f64 },

    #[error("area {area}: {message}")]
    Evaluation { area: String, message: String },

    #[error("estimate unavailable: {0}")]
    Unavailable(String),

    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("bias correction undefined: bootstrap mean is zero while the raw leading term is {m1_raw}")]
    Correction { m1_raw: f64 },

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("area {area}: importance weights degenerate")]
    DegenerateWeights { area: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn in_area(self, area: &str) -> Error {
        match self {
            Error::Evaluation { .. } | Error::UndefinedMoment { .. } => self,
            Error::DegenerateWeights { .. } => self,
            other => Error::Evaluation {
                area: area.to_string(),
                message: other.to_string(),
            },
        }
    }
}
