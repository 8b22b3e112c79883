//! Error types shared across the pipeline.

use std::fmt;

/// Errors produced by volume operations, registration, and file I/O.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Volume intensity is constant; min-max normalization is undefined.
    ConstantIntensity,
    /// A mask operation requires at least one set voxel.
    EmptyMask,
    /// Both masks of a pairwise metric are empty.
    BothEmpty,
    /// The series carries no segmentation masks.
    MissingMasks,
    /// Two grids that must share geometry do not.
    GeometryMismatch(String),
    /// Grid too small for the finite-difference stencil.
    TooSmall(String),
    /// The optimization produced a non-finite loss (diverged).
    NonFiniteLoss,
    /// Parsed or constructed data contains NaN or infinity.
    NonFiniteData(String),
    /// Invalid configuration value.
    ConfigInvalid(String),
    /// File does not start with a valid header.
    BadMagic(String),
    /// Datatype code outside the supported subset.
    UnsupportedDatatype(i16),
    /// File shorter than its header or declared data size.
    TruncatedFile(String),
    /// Underlying filesystem failure.
    IoFailure(String),
    /// Failure while processing one phase of a series, wrapping its cause.
    AtPhase(usize, Box<Error>),
}

impl Error {
    /// Stable machine-parsable category name, used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ConstantIntensity => "ConstantIntensity",
            Error::EmptyMask => "EmptyMask",
            Error::BothEmpty => "BothEmpty",
            Error::MissingMasks => "MissingMasks",
            Error::GeometryMismatch(_) => "GeometryMismatch",
            Error::TooSmall(_) => "TooSmall",
            Error::NonFiniteLoss => "NonFiniteLoss",
            Error::NonFiniteData(_) => "NonFiniteData",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::BadMagic(_) => "BadMagic",
            Error::UnsupportedDatatype(_) => "UnsupportedDatatype",
            Error::TruncatedFile(_) => "TruncatedFile",
            Error::IoFailure(_) => "IoFailure",
            Error::AtPhase(_, inner) => inner.category(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ConstantIntensity => write!(f, "constant intensity: min == max"),
            Error::EmptyMask => write!(f, "mask has no set voxels"),
            Error::BothEmpty => write!(f, "both masks are empty"),
            Error::MissingMasks => write!(f, "series has no masks"),
            Error::GeometryMismatch(msg) => write!(f, "geometry mismatch: {msg}"),
            Error::TooSmall(msg) => write!(f, "grid too small: {msg}"),
            Error::NonFiniteLoss => write!(f, "loss became non-finite (diverged)"),
            Error::NonFiniteData(msg) => write!(f, "non-finite data: {msg}"),
            Error::ConfigInvalid(msg) => write!(f, "invalid configuration: {msg}"),
            Error::BadMagic(msg) => write!(f, "bad file magic: {msg}"),
            Error::UnsupportedDatatype(code) => write!(f, "unsupported datatype code {code}"),
            Error::TruncatedFile(msg) => write!(f, "truncated file: {msg}"),
            Error::IoFailure(msg) => write!(f, "i/o failure: {msg}"),
            Error::AtPhase(t, inner) => write!(f, "phase {t}: {inner}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::IoFailure(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
