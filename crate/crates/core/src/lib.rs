//! Integro-difference spatio-temporal forecasting with CNN-parameterised kernels.

pub mod baseline;
pub mod cnn;
pub mod enkf;
pub mod error;
pub mod grid;
pub mod io;
pub mod kernel;
pub mod likelihood;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
