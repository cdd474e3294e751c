//! Joint dense reconstruction and semantic labeling of RGB-D video.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: a small reverse-mode autodiff engine with exactly the layers
//!   the labeling networks need (3×3 convolution, 2×2 max pooling, transposed
//!   convolution, pointwise ops, channel concatenation, softmax cross entropy).
//! - [`daru`]: the data-associated recurrent unit, a per-pixel cell whose
//!   carried state arrives through inter-frame pixel correspondences, plus a
//!   GRU baseline cell.
//! - [`net`]: single-stream and two-stream fully convolutional labelers and
//!   their recurrent variants.
//! - [`geom`], [`mapping`], [`assoc`], [`semfuse`]: camera geometry, TSDF
//!   fusion with point-to-plane ICP tracking, pose-derived pixel association
//!   and fusion of label probabilities into the voxel grid.
//! - [`synth`]: a procedural RGB-D video generator with exact ground truth.
//! - [`pipeline`]: training, inference, metrics and the end-to-end mapping
//!   loop, plus the command implementations behind the `semmap` binary.

pub mod assoc;
pub mod daru;
pub mod error;
pub mod geom;
pub mod image;
pub mod mapping;
pub mod net;
pub mod pipeline;
pub mod semfuse;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
