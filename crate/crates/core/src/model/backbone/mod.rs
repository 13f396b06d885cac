//! Convolutional feature extractors. Each maps a normalized `(N, 3, H, W)`
//! batch to the final `(N, C, H/32, W/32)` feature map.

pub mod depthwise;
mod efficientnet;
mod layers;
pub mod params;
mod resnet;

use candle_core::Tensor;

pub use efficientnet::{EfficientNet, EfficientNetConfig};
pub use params::{BnControl, Init, ParamKind, ParamStore};
pub use resnet::ResNet50;

use super::registry::BackboneId;
use crate::error::Result;

pub trait Backbone: Send + Sync {
    /// With `train`, batch norm uses batch statistics and updates its
    /// running estimates.
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor>;
}

pub fn build_backbone(id: BackboneId, store: &mut ParamStore) -> Result<Box<dyn Backbone>> {
    Ok(match id {
        BackboneId::ResNet50 => Box::new(ResNet50::new(store)?),
        BackboneId::EfficientNetB1 => Box::new(EfficientNet::new(store, &EfficientNetConfig::B1)?),
        BackboneId::EfficientNetB7 => Box::new(EfficientNet::new(store, &EfficientNetConfig::B7)?),
        BackboneId::EfficientNetV2B1 => Box::new(EfficientNet::new(store, &EfficientNetConfig::V2_B1)?),
    })
}
