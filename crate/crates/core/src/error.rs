use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("transfer function is not strictly proper (numerator degree {num} >= denominator degree {den})")]
    NotStrictlyProper { num: usize, den: usize },

    #[error("denominator has a zero leading coefficient")]
    ZeroLeadingCoefficient,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("pair (A, B) is not controllable: controllability rank {rank} < {dim}")]
    Uncontrollable { rank: usize, dim: usize },

    #[error("unsupported spectrum: {0}")]
    UnsupportedSpectrum(String),

    #[error("output direction vanishes along the unit-circle eigenvector (C·e1 = {0:e}); the region cannot be auto-bounded")]
    DegenerateOutputDirection(f64),

    #[error("invalid quantizer alphabet: {0}")]
    InvalidAlphabet(String),

    #[error("deadbeat input out of range: infinity norm {norm} exceeds 1")]
    OutOfRange { norm: f64 },

    #[error("capacity exceeded: {what} needs {needed} but the cap is {cap}")]
    CapacityExceeded { what: String, needed: u64, cap: u64 },

    #[error("region expansion limit: region would hold {tiles} tiles (cap {cap}) without a zero boundary")]
    RegionExpansionLimit { tiles: u64, cap: u64 },

    #[error("no convergent point: the probe at gamma_lo = {gamma} did not certify ({reason}); try a gamma = 0 sanity run")]
    NoConvergentPoint { gamma: f64, reason: String },

    #[error("ADC emitted {value} at step {step}, which is not in the alphabet")]
    AlphabetViolation { value: f64, step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input file {path}: {reason}")]
    Parse { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short name used in structured diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotStrictlyProper { .. } => "not_strictly_proper",
            Error::ZeroLeadingCoefficient => "zero_leading_coefficient",
            Error::Dimension(_) => "dimension",
            Error::Uncontrollable { .. } => "uncontrollable",
            Error::UnsupportedSpectrum(_) => "unsupported_spectrum",
            Error::DegenerateOutputDirection(_) => "degenerate_output_direction",
            Error::InvalidAlphabet(_) => "invalid_alphabet",
            Error::OutOfRange { .. } => "out_of_range",
            Error::CapacityExceeded { .. } => "capacity_exceeded",
            Error::RegionExpansionLimit { .. } => "region_expansion_limit",
            Error::NoConvergentPoint { .. } => "no_convergent_point",
            Error::AlphabetViolation { .. } => "alphabet_violation",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
