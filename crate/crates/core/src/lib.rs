//! Affinely invariant matched sampling for discriminant mixtures of
//! proportional ellipsoidally symmetric (DMPES) covariate distributions.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: DMPES populations, validation, canonical form, population moments.
//! * [`sampler`]: reproducible treated/control panels.
//! * [`matching`]: affinely invariant (and conditionally invariant) matchers.
//! * [`decompose`]: projections along and orthogonal to the discriminant,
//!   exchangeable-structure fits, bias and variance-ratio diagnostics.
//! * [`conditional`]: special/remainder covariate splits.
//! * [`harness`]: Monte Carlo experiments and verification reports.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which the harness uses throughout.

pub mod conditional;
pub mod decompose;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod matching;
pub mod mcstats;
pub mod model;
pub mod sampler;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type DmpesModelF64 = model::DmpesModel<f64>;
pub type DmpesModelF32 = model::DmpesModel<f32>;
pub type ComponentF64 = model::Component<f64>;
pub type DirectionF64 = model::Direction<f64>;
pub type CanonicalMapF64 = model::CanonicalMap<f64>;
pub type AffineMapF64 = model::AffineMap<f64>;
pub type SampleF64 = sampler::Sample<f64>;
pub type SampleF32 = sampler::Sample<f32>;
pub type MatchResultF64 = matching::MatchResult<f64>;
pub type DecompositionF64 = decompose::Decomposition<f64>;
pub type ConditionalModelF64 = conditional::ConditionalDmpesModel<f64>;
