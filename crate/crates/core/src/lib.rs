pub mod adaptor;
pub mod decoder;
pub mod error;
pub mod finetune;
pub mod harness;
pub mod numeric;
pub mod speech;

pub use error::{Error, Result};
