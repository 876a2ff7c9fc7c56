pub mod blocks;
pub mod detect;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod init;
pub mod io;
pub mod model;
pub mod params;
pub mod profile;
pub mod reference;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use model::{build_model, ModelGraph, Network, Variant};
pub use tensor::Tensor;
pub use weights::WeightStore;
