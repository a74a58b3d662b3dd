pub mod checks;
pub mod cli;
pub mod data;
pub mod dct;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rope;
pub mod sca;
pub mod smg;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
