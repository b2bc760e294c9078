//! Transport maps between log-concave measures built by flowing along the
//! advection field of a heat-diffusion semigroup, together with the Brenier
//! map in the tractable one-dimensional, radial and Gaussian cases, and the
//! numerical certificates (contraction, log-concavity preservation, mass
//! conservation, correlation inequalities) that relate the two.

pub mod acceptance;
pub mod applications;
pub mod brenier;
pub mod error;
pub mod flow;
pub mod gaussian;
pub mod numerics;
pub mod potentials;
pub mod semigroup;

pub use error::{Error, Result};
