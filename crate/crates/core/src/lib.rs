pub mod adaptation;
pub mod bench;
pub mod error;
pub mod estimators;
pub mod graph;
pub mod mixture;
pub mod sim;
pub mod solver;
pub mod special;

pub use error::{Error, Result};
