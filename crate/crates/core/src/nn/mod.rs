//! Dense NCHW tensors, layers with hand-written backward passes, the dilated
//! UNet and its optimizers. All arithmetic is `f64`.

mod layers;
mod loss;
mod optim;
mod tensor;
mod unet;

pub use layers::{
    conv2d, conv2d_backward, dropout, dropout_backward, maxpool2x2, maxpool2x2_backward, relu,
    relu_backward, softmax_channels, upsample2x_concat, upsample2x_concat_backward, Conv2d,
    ConvGrads, ConvSpec, PoolIndices,
};
pub use loss::{weighted_ce_loss, LossOutput, PROB_FLOOR};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};
pub use tensor::Tensor;
pub use unet::{unet_init, Gradients, Mode, UNetConfig, UNetModel};
