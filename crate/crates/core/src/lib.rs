//! Steady subsonic potential flow past an obstacle and its low Mach number
//! limit.
//!
//! The crate solves the incompressible reference flow, minimises the
//! compressible–incompressible difference functional for a given
//! compressibility parameter ε, and measures how the compressible flow
//! approaches the incompressible one as ε → 0.

pub mod compressible;
pub mod error;
pub mod fem;
pub mod gas;
pub mod geometry;
pub mod incompressible;
pub mod io;
pub mod lab;
pub mod quadrature;
pub mod roots;

pub use error::{Error, Result};
