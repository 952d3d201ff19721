pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod grounding;
pub mod mask;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod train;

pub use error::{Error, Result};
