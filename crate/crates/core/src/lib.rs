pub mod adapter;
pub mod autodiff;
pub mod error;
mod framing;
pub mod gradcheck;
pub mod harness;
pub mod net;
pub mod priors;
pub mod stmap;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use framing::read_header;
