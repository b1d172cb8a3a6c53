pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod kg;
pub mod numerics;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
