//! Scale-interaction transformer for scalar regression from CNN feature maps.
//!
//! The crate provides a small f64 tensor toolkit with hand-written backward
//! passes, a multi-scale feature pyramid, a pre-norm transformer encoder, and
//! the training loop used by the `sit` command-line tool.

pub mod backbone;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod model;
pub mod ops;
pub mod pyramid;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use model::{build_variant, AblationVariant, ModelConfig, SitModel};
pub use ops::Mode;
pub use rng::RngStream;
pub use tensor::Tensor;
