pub mod analysis;
pub mod attacks;
pub mod error;
pub mod tokens;
pub mod fpcode;
pub mod lbit;
pub mod multiuser;
pub mod zerobit;

pub use error::{Error, Result};
