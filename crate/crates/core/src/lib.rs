pub mod analysis;
pub mod autograd;
pub mod bench;
pub mod error;
pub mod experts;
pub mod router;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};
