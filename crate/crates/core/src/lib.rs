pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod mil;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod ssm;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
