//! Transformer-based multi-speaker speech recognition.
//!
//! The crate covers the whole pipeline: a small reverse-mode tensor engine
//! ([`numerics`]), the signal layer ([`dsp`]), Transformer blocks with
//! time-restricted self-attention ([`attention`]), the mask-based MVDR
//! beamforming frontend ([`frontend`]), the joint CTC/attention backend with
//! permutation invariant training ([`backend`]), optimization
//! ([`training`]) and the experiment commands driven by the `msar` binary
//! ([`experiment`]).
//!
//! Numeric code is generic over [`Real`]; the aliases below fix the scalar
//! to `f64`, which is what training uses.

pub mod attention;
pub mod backend;
pub mod dsp;
pub mod error;
pub mod experiment;
pub mod frontend;
pub mod numerics;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor = numerics::Tensor<f64>;
pub type Graph = numerics::Graph<f64>;
pub type ParamStore = numerics::ParamStore<f64>;
pub type ComplexMatrix = numerics::ComplexMatrix<f64>;
