use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto exit codes:
/// invalid input/config -> 2, I/O -> 3, numerical aborts -> 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: {context} ({a_w}x{a_h} vs {b_w}x{b_h})")]
    DimensionMismatch {
        context: &'static str,
        a_w: usize,
        a_h: usize,
        b_w: usize,
        b_h: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("non-finite value detected: {0}")]
    NonFinite(String),

    #[error("conjugate gradient diverged: residual grew for {grew} consecutive iterations (iter {iter}, rel residual {rel_residual:.3e})")]
    CgDivergence {
        iter: usize,
        grew: usize,
        rel_residual: f64,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
