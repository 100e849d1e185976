//! The two fast-weight components of the vision TTT layer: a simplified
//! gated linear unit and a 3×3 depthwise convolution. Both run gradient
//! steps on the same negative-inner-product binding loss, and both admit a
//! closed linear-attention form that is checked against the updated-network
//! evaluation inside the step operations themselves.

mod conv;
mod glu;

pub use conv::{
    dwconv_forward, dwconv_grad, dwconv_rebuild, dwconv_recurrent, dwconv_step_and_eval,
    spatial_attention_weights, ConvState, ConvStepOutput, ConvTrajectory, SpatialMap,
};
pub use glu::{
    glu_forward, glu_grads, glu_rebuild, glu_recurrent, glu_step_and_eval, GluGrads, GluState,
    GluStepOutput, GluTrajectory,
};
