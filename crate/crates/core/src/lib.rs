//! LBP-guided two-stage generative inpainting.
//!
//! A local binary pattern network first restores the texture-structure map
//! of the missing region; an inpainting network then fills the hole guided
//! by that map, with a spatial attention layer that borrows from both the
//! known region and the hole itself.

pub mod attention;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod image;
pub mod lbp;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Activation, ConvParams, Tape, Tensor, Var};
