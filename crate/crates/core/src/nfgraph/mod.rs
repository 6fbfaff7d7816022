//! Training-time network: layer definitions with manual gradients and the
//! normalizer-free residual structure.

pub mod layers;
pub mod network;
pub mod spec;

pub use layers::{
    avgpool_forward, masked_sign_backward, masked_sign_forward, nf_residual_combine, qrprelu_backward,
    qrprelu_forward, sws_standardize,
};
pub use network::{binconv_forward, Grads, Param, ParamKind, PathMode, Phase, Prepared, Trace, TrainState};
pub use spec::{init_betas, ActKind, BlockPlan, ConvGeom, GraphSpec, Layer, Shape3, Stage};
