//! U-Net segmentation and regression models on a small CPU engine.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod layers;
pub mod loss;
pub mod params;
pub mod tensor;
pub mod unet;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointHeader, MAGIC};
pub use error::{NetError, Result};
pub use loss::{femur_loss, seg_loss, seg_loss_parts, softmax2, SegLossParts, SegTarget};
pub use params::{Grads, ParamId, ParamInfo, ParamStore};
pub use tensor::{Scalar, Tensor};
pub use unet::{count_parameters, Branch, ModelKind, NetConfig, UNet};

/// Shared-encoder network with head and abdomen decoders.
pub fn build_shared_unet(cfg: &NetConfig) -> Result<UNet<f32>> {
    UNet::shared(cfg)
}

/// Single-decoder segmentation network.
pub fn build_single_unet(cfg: &NetConfig) -> Result<UNet<f32>> {
    UNet::single(cfg)
}

pub fn build_femur_unet(cfg: &NetConfig) -> Result<UNet<f32>> {
    UNet::femur(cfg)
}
