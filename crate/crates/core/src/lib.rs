//! Link-level simulator and receiver algorithms for asynchronous MIMO-OFDM
//! unsourced random access.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: partial DFT matrices, chi-square distribution functions,
//!   seedable complex-Gaussian streams.
//! - [`config`]: scenario constants, presets and validation.
//! - [`encoder`] and [`ldpc`]: tree code, codebooks, interleavers and the
//!   LDPC-coded BPSK payload.
//! - [`channel`]: user draws, the exact time-domain OFDM pipeline and the
//!   frequency-domain sparse model.
//! - [`sbl`]: belief-propagation / mean-field sparse Bayesian learning for
//!   joint activity detection and channel estimation.
//! - [`gbcr`]: graph-based path search, validation, collision detection and
//!   successive interference cancellation across preamble slots.
//! - [`flat`]: closed-form flat-fading estimators and constellation-aided
//!   offset refinement.
//! - [`payload`]: de-interleaving, LDPC decoding and message assembly.
//! - [`analysis`]: oracle estimators, bounds and error-analysis formulas.
//! - [`metrics`] and [`runner`]: Monte Carlo orchestration and reporting.

pub mod analysis;
pub mod channel;
pub mod config;
pub mod encoder;
pub mod flat;
pub mod gbcr;
pub mod ldpc;
pub mod metrics;
pub mod numerics;
pub mod payload;
pub mod runner;
pub mod sbl;

pub use num_complex::Complex64;

/// Dense complex matrix used throughout the crate.
pub type CMatrix = nalgebra::DMatrix<Complex64>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("length mismatch in {what}: expected {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("probability level {0} is degenerate")]
    DegenerateLevel(f64),
    #[error("quantile at probability 1 is unbounded")]
    UnboundedQuantile,
    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
