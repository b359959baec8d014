//! Spin, photodynamics and vibronic analysis of paramagnetic point defects.

pub mod constants;
pub mod defect_model;
pub mod error;
pub mod lsq;
pub mod photodynamics;
pub mod psb;
pub mod g2_processing;
pub mod spin_hamiltonian;

pub use error::{Error, Result};

pub use nalgebra;
