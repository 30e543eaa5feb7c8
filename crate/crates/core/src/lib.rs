pub mod attack;
pub mod adaptation;
pub mod autodiff;
pub mod bo;
pub mod cloud;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
