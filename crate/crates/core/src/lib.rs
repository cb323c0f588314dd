pub mod autodiff;
pub mod cull;
pub mod error;
pub mod linalg;
pub mod net;
pub mod phantom;
pub mod stats;
pub mod tensor;
pub mod tps;
pub mod train;

pub use error::{Error, Result};
pub use tensor::ImageTensor;
pub use tps::{LandmarkSet, TpsModel};
