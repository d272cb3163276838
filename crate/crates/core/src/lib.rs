//! Hierarchical contrastive motion learning at desk scale.
//!
//! A from-scratch CPU implementation of self-supervised motion
//! representation learning for video: cost-volume motion features, flow
//! reconstruction with a Charbonnier photometric loss, multi-level
//! contrastive future prediction, and progressive joint training, validated
//! on a synthetic motion-defined classification task.

pub mod autodiff;
pub mod backbone;
pub mod contrastive;
pub mod dataio;
pub mod error;
pub mod flow;
pub mod model;
pub mod motion;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{HcmlError, Result};
pub use tensor::{Tensor, VideoClip};
