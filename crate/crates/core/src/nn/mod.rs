//! Minimal CPU tensor operations with hand-written backward passes.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
mod tensor;

pub use conv::{
    concat_channels, conv2d_backward, conv2d_forward, maxpool2x2_backward, maxpool2x2_forward,
    split_channels, transpose_conv2x2_backward, transpose_conv2x2_forward, Conv2dGrads,
    Conv2dSpec,
};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use layers::{
    fully_connected_backward, fully_connected_forward, relu_backward, relu_forward, relu_inplace,
    DenseGrads,
};
pub use loss::{
    log_softmax, log_softmax_backward, nll_loss, nll_loss_backward, softmax_channel,
    weighted_cross_entropy,
};
pub use optim::{Adam, Optimizer, RmsProp};
pub use tensor::{Parameter, Parameterized, Tensor};
