pub mod autodiff;
mod binio;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod layers;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result, TensorError};
pub use tensor::Tensor;
