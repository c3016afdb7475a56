pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod field;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod renderer;
pub mod scene;
pub mod superres;
pub mod trainer;
pub mod triplane;
pub mod wavelet;

pub use error::{Error, Result};
