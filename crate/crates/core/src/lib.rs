//! Sparse-focus change captioning: axial sparse attention, a bitemporal
//! encoder, a transformer caption decoder, caption metrics and analytic
//! cost accounting, all on a small `f64` tensor core with reverse-mode
//! differentiation.

pub mod accounting;
pub mod attention;
pub mod autodiff;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod extractor;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Result, SftError};
pub use tensor::Tensor;
