pub mod autodiff;
pub mod bbox;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod kernels;
pub mod net;
pub mod params;
pub mod tracking;
pub mod training;
pub mod update;

pub use bbox::BBox;
pub use error::{Error, Result};
