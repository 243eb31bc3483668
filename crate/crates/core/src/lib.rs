//! Physics-informed state estimation for three-phase distribution grids.

pub mod config;
pub mod dse;
pub mod error;
pub mod grid;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod pinn;
pub mod seeds;
pub mod sim;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
