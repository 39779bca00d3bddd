pub mod env;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod net;
pub mod optim;
pub mod replay;
pub mod rollout;
pub mod routing;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
