//! Camera-guided fusion of visual, spatial and camera token streams.
//!
//! Visual tokens query a per-frame memory built from spatial tokens (biased
//! by a camera-conditioned MLP and reweighted by a query-independent token
//! prior) plus the projected camera token. The attended features are mapped
//! back to the visual width, gated by a SwiGLU-style camera gate, and added
//! to the visual tokens as a residual.

mod ablation;
mod attention;
mod backward;
mod config;
mod fusion;
mod weights;

pub use ablation::{run_variant, Variant};
pub use attention::{attention_probabilities, multi_head_attention, multi_head_attention_vjp};
pub use backward::{fuse_backward, fuse_with_grads, InputGrads};
pub use config::{ConfigError, FusionConfig, Toggles, DEFAULT_HEADS};
pub use fusion::{
    attend, camera_gate, fuse, fuse_timed, gate_and_fuse, geo_bias, project_qkvc, token_weights,
    FusionError, FusionInputs, Projections, StageTiming,
};
pub use weights::{
    CgmfWeights, InitOptions, Mlp, ModuleMut, ModuleRef, WeightGrads, MODULE_NAMES,
};
