pub mod autodiff;
pub mod error;
pub mod encode;
pub mod eventlog;
pub mod graphrep;
pub mod layers;
pub mod models;
pub mod optim;
pub mod pseudoembed;
pub mod trainer;
pub mod tuner;

pub use error::{Error, Result};
