use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("SNR bracket [{lo_db}, {hi_db}] dB does not straddle target BLER {target}: bler(lo)={bler_lo}, bler(hi)={bler_hi}")]
    Bracket {
        lo_db: f64,
        hi_db: f64,
        target: f64,
        bler_lo: f64,
        bler_hi: f64,
    },

    #[error("calibration did not converge after {iterations} probes (last {last_db} dB, bler {last_bler})")]
    NoConvergence {
        iterations: usize,
        last_db: f64,
        last_bler: f64,
    },

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
