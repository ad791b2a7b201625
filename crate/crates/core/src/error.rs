use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("SRAM overflow in kernel `{kernel}` loading tile `{tile}`: {requested} words requested, {occupied} of {capacity} in use")]
    SramOverflow {
        kernel: String,
        tile: String,
        requested: usize,
        occupied: usize,
        capacity: usize,
    },

    #[error("stale tile handle {handle} in kernel `{kernel}`")]
    StaleHandle { kernel: String, handle: u64 },

    #[error("NaN routing score for token {token}, head {head}, expert {expert}")]
    NanScore { token: usize, head: usize, expert: usize },

    #[error("index {index} out of range (< {bound} required)")]
    IndexOutOfRange { index: usize, bound: usize },

    #[error("inconsistent cluster plan: {0}")]
    Plan(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
