//! Low-order robust H-infinity output-feedback synthesis for descriptor
//! systems with divergence-type algebraic constraints.

pub mod controller;
pub mod coprime;
pub mod error;
pub mod flowdae;
pub mod hinfbt;
pub mod linalg;
pub mod lti;
pub mod margin;
pub mod pipeline;
pub mod riccati;
pub mod simulate;

pub use error::{Error, Result};
