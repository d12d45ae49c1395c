pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod networks;
pub mod params;
pub mod pyramid;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Conv2dConfig, Tensor};
