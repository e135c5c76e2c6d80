//! Resource-aware multi-objective architecture search at desk scale.
//!
//! The pipeline: a weight-sharing elastic supernet over 1-D signals is
//! trained with sandwich sampling and subnet mutual distillation
//! ([`supernet`], [`distill`]); subnet latency is simulated with a roofline
//! cost model ([`latsim`]) and learned by surrogate regressors
//! ([`surrogate`]); NSGA-II then searches the accuracy/latency trade-off
//! ([`evolve`]).

pub mod distill;
pub mod error;
pub mod evolve;
pub mod latsim;
pub mod scalar;
pub mod space;
pub mod supernet;
pub mod surrogate;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use space::{ArchEncoding, Architecture, SpaceSpec, StageSpec};
pub use supernet::SupernetParams;

/// Shared weights in single precision, as trained and stored.
pub type SupernetF32 = SupernetParams<f32>;
/// Shared weights in double precision, used by the reference checks.
pub type SupernetF64 = SupernetParams<f64>;
