pub mod container;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod freqnet;
pub mod linalg;
pub mod rng;
pub mod schatten;
pub mod sensitivity;
pub mod solvers;
pub mod spectral;
pub mod stats;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
