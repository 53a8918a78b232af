pub mod autodiff;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod lmf;
pub mod losses;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod nn;
pub mod params;
pub mod probe;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
