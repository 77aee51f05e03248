pub mod decode;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod mention;
pub mod model;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
