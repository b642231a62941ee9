//! One-shot texture segmentation.
//!
//! Given a single reference texture image, segment every pixel of that
//! texture class in a query image. The crate contains the network (a Siamese
//! texture encoder with direction-conditioned convolution branches, a
//! self-gated relation head and a skip-connected decoder) with reverse-mode
//! gradients, episodic data synthesis, the weighted cross-entropy objective,
//! IoU evaluation and the SGD trainer.

pub mod dirmaps;
pub mod episodes;
pub mod error;
pub mod graph;
pub mod imageio;
pub mod net;
pub mod objective;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Scalar, Tensor};
