//! File formats, the experiment runner, reports and the `pgps` command line
//! on top of `pgps-core`.

pub mod cli;
pub mod error;
pub mod io;
pub mod presets;
pub mod report;
pub mod runner;
pub mod verify;

pub use error::{Error, Result};
pub use report::{EpochRecord, TrainReport};
pub use runner::{run_experiment, Dataset, RunConfig};
