//! FemtoDet building blocks.
//!
//! Depthwise-separable convolution stacks with Instance Boundary Enhancement
//! (IBE) modules, the exact algebraic fold of IBE back into a plain
//! depthwise-separable convolution, the SharedNeck detector, a four-stage
//! recursive warm-restart training schedule on a synthetic dataset, and the
//! Power / mEPT energy metrics with an analytical cost model.

pub mod archive;
pub mod autograd;
pub mod energy;
pub mod error;
pub mod fold;
pub mod ibe;
pub mod layers;
pub mod net;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{FemtoError, Result};
pub use tensor::{Scalar, Tensor};
