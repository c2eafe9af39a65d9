//! Force validation, rate fitting and ε-sweeps.

pub mod fit;
pub mod force;
pub mod sweep;
