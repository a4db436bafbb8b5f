//! Characterization of 1-, 2- and 3-beam Gaussian optical fields from
//! photon-number statistics.
//!
//! The crate computes quantum universal invariants (QUIs) of Gaussian states
//! along two independent routes: directly from the symmetric-ordering
//! covariance matrix (principal minors of `ΩA`) and from normally ordered
//! intensity moments via closed-form combinations whose phase-sensitive
//! residues are bounded rather than measured.  Around this core it provides
//! the full experimental pipeline: a generative noisy-twin-beam model,
//! compound-beam assembly from photocount channels, click-detector response
//! matrices, expectation-maximization reconstruction of photon-number
//! distributions, Stirling conversions between photon and intensity moments,
//! effective-mode reduction, and a PPT entanglement test expressed in
//! intensity moments.
//!
//! A small exact-rational symbolic engine ([`symbolic`]) re-derives every
//! closed form from first principles (Wick expansion + linear solve), which
//! is how the shipped term tables are validated.

pub mod detect;
pub mod entangle;
pub mod error;
pub mod formulas;
pub mod gauss;
pub mod model;
pub mod moments;
pub mod sample;
pub mod symbolic;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
