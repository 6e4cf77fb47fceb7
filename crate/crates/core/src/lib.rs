//! Disentangled neural codec for speaker anonymization.

pub mod anonymize;
pub mod data;
pub mod eval;
pub mod losses;
pub mod model;
pub mod quantize;
pub mod signal;
pub mod train;
