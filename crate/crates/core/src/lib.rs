pub mod error;
pub mod inn_core;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod sfe_localizer;
pub mod tamper_sim;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
