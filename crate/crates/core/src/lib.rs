pub mod augment;
pub mod config;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod preprocess;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
