use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular network: {0}")]
    SingularNetwork(String),

    #[error("frequency mismatch: {0} Hz vs {1} Hz")]
    FrequencyMismatch(f64, f64),

    #[error("reference impedance mismatch: {0} ohm vs {1} ohm")]
    ImpedanceMismatch(f64, f64),

    #[error("port index {index} out of range for a {ports}-port network")]
    PortOutOfRange { index: usize, ports: usize },

    #[error("no transmission peak in [{lo} Hz, {hi} Hz]")]
    NoPeakInBracket { lo: f64, hi: f64 },

    #[error("no convergence after {iterations} iterations: {what}")]
    NonConvergence { what: String, iterations: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("time step {dt} s exceeds stability limit {limit} s")]
    StepSizeInstability { dt: f64, limit: f64 },

    #[error("record does not contain exactly one transition ({0})")]
    Transition(String),

    #[error("g2 undefined: <a^dag a> = {mean} is not above 3 standard errors ({err})")]
    UndefinedG2 { mean: f64, err: f64 },

    #[error("insufficient records: standard error {err} exceeds tolerance {tol}")]
    InsufficientRecords { err: f64, tol: f64 },

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    #[error("state not representable with Fock cutoff {cutoff}")]
    UnsupportedState { cutoff: usize },

    #[error("CSV schema error at row {row}: {msg}")]
    Schema { row: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad inputs or data rather than numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Schema { .. }
                | Error::DegenerateData(_)
                | Error::FrequencyMismatch(..)
                | Error::ImpedanceMismatch(..)
                | Error::PortOutOfRange { .. }
                | Error::StepSizeInstability { .. }
                | Error::GridMismatch(_)
                | Error::Csv(_)
        )
    }

    pub fn is_nonconvergence(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::SingularNetwork(_) | Error::NoPeakInBracket { .. }
        )
    }
}
