pub mod cells;
pub mod copy_task;
pub mod dense;
pub mod error;
pub mod experiment;
pub mod linear_ops;
pub mod model;
pub mod params;
pub mod rotations;
pub mod training;

pub use error::{DizzyError, Result};
