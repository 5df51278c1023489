pub mod data;
pub mod dynamics;
pub mod encoder;
pub mod error;
pub mod graphs;
pub mod io;
pub mod metrics;
pub mod model;
pub mod neurosim;
pub mod sheaf;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
