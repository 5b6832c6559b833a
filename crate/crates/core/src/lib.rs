//! Camera-guided modality fusion on plain `f64` token tensors.
//!
//! * [`tensor`]: token tensors, kernels and their vector-Jacobian products.
//! * [`cgmf`]: the fusion module, its weights and analytic gradients.
//! * [`gradcheck`]: central finite-difference verification of those gradients.
//! * [`pipeline`]: frame sampling, patch geometry and synthetic encoder streams.
//! * [`metrics`]: benchmark scoring (relative accuracy, choice accuracy, exact match).
//! * [`io`]: tensor container files, config files and record files.

pub mod cgmf;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod tensor;

pub use cgmf::{
    fuse, fuse_backward, CgmfWeights, FusionConfig, FusionError, FusionInputs, InputGrads,
    Toggles, Variant,
};
pub use tensor::{LayerNormParams, LinearMap, TensorError, TokenTensor};
