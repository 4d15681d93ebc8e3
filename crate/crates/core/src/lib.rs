pub mod cli;
pub mod consistency;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gated_gcn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
