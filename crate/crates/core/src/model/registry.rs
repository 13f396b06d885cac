//! Known backbones: published feature width, input normalization, and the
//! canonical source of their ImageNet weights.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BackboneId {
    ResNet50,
    EfficientNetB1,
    EfficientNetB7,
    EfficientNetV2B1,
}

/// Where published pretrained weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightSource {
    pub url: &'static str,
    /// Name of the cached file under the weight cache directory.
    pub file_name: &'static str,
    /// Pinned sha256 (hex). When absent, the digest observed on first
    /// download is pinned next to the cached file and enforced afterwards.
    pub sha256: Option<&'static str>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneInfo {
    pub id: BackboneId,
    /// Identifier used in configs and on the command line.
    pub key: &'static str,
    /// Name used in result tables.
    pub display_name: &'static str,
    /// Channel depth of the final convolutional feature map.
    pub feature_channels: usize,
    /// Total spatial downsampling from input to final feature map.
    pub reduction: usize,
    pub min_input: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub weights: WeightSource,
}

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
const TF_MEAN: [f32; 3] = [0.5, 0.5, 0.5];
const TF_STD: [f32; 3] = [0.5, 0.5, 0.5];

static REGISTRY: [BackboneInfo; 4] = [
    BackboneInfo {
        id: BackboneId::ResNet50,
        key: "resnet50",
        display_name: "ResNet50",
        feature_channels: 2048,
        reduction: 32,
        min_input: 32,
        mean: IMAGENET_MEAN,
        std: IMAGENET_STD,
        weights: WeightSource {
            url: "https://huggingface.co/timm/resnet50.tv_in1k/resolve/main/model.safetensors",
            file_name: "resnet50.tv_in1k.safetensors",
            sha256: None,
        },
    },
    BackboneInfo {
        id: BackboneId::EfficientNetB1,
        key: "efficientnet_b1",
        display_name: "EfficientNetB1",
        feature_channels: 1280,
        reduction: 32,
        min_input: 32,
        mean: IMAGENET_MEAN,
        std: IMAGENET_STD,
        weights: WeightSource {
            url: "https://huggingface.co/timm/efficientnet_b1.ft_in1k/resolve/main/model.safetensors",
            file_name: "efficientnet_b1.ft_in1k.safetensors",
            sha256: None,
        },
    },
    BackboneInfo {
        id: BackboneId::EfficientNetB7,
        key: "efficientnet_b7",
        display_name: "EfficientNetB7",
        feature_channels: 2560,
        reduction: 32,
        min_input: 32,
        mean: IMAGENET_MEAN,
        std: IMAGENET_STD,
        weights: WeightSource {
            url: "https://huggingface.co/timm/tf_efficientnet_b7.ra_in1k/resolve/main/model.safetensors",
            file_name: "tf_efficientnet_b7.ra_in1k.safetensors",
            sha256: None,
        },
    },
    BackboneInfo {
        id: BackboneId::EfficientNetV2B1,
        key: "efficientnet_v2_b1",
        display_name: "EfficientNetV2B1",
        feature_channels: 1280,
        reduction: 32,
        min_input: 32,
        mean: TF_MEAN,
        std: TF_STD,
        weights: WeightSource {
            url: "https://huggingface.co/timm/tf_efficientnetv2_b1.in1k/resolve/main/model.safetensors",
            file_name: "tf_efficientnetv2_b1.in1k.safetensors",
            sha256: None,
        },
    },
];

impl BackboneId {
    pub const ALL: [BackboneId; 4] = [
        BackboneId::ResNet50,
        BackboneId::EfficientNetB1,
        BackboneId::EfficientNetB7,
        BackboneId::EfficientNetV2B1,
    ];

    pub fn info(self) -> &'static BackboneInfo {
        REGISTRY
            .iter()
            .find(|b| b.id == self)
            .expect("every id has a registry entry")
    }

    pub fn key(self) -> &'static str {
        self.info().key
    }

    pub fn known_keys() -> Vec<String> {
        REGISTRY.iter().map(|b| b.key.to_owned()).collect()
    }

    /// Accepts the config key (`efficientnet_b1`) or the display name.
    pub fn lookup(name: &str) -> Result<BackboneId, Error> {
        REGISTRY
            .iter()
            .find(|b| b.key == name || b.display_name == name)
            .map(|b| b.id)
            .ok_or_else(|| Error::UnknownBackbone {
                id: name.to_owned(),
                known: Self::known_keys(),
            })
    }

    /// Spatial size of the final feature map for a square-or-not input,
    /// assuming "same"-style padding at every stride-2 stage.
    pub fn feature_grid(self, input_h: usize, input_w: usize) -> (usize, usize) {
        let r = self.info().reduction;
        (input_h.div_ceil(r), input_w.div_ceil(r))
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::lookup(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_feature_widths() {
        assert_eq!(BackboneId::ResNet50.info().feature_channels, 2048);
        assert_eq!(BackboneId::EfficientNetB1.info().feature_channels, 1280);
        assert_eq!(BackboneId::EfficientNetB7.info().feature_channels, 2560);
        assert_eq!(BackboneId::EfficientNetV2B1.info().feature_channels, 1280);
    }

    #[test]
    fn unknown_id_lists_known() {
        let err = BackboneId::lookup("resnet51").unwrap_err();
        let msg = err.to_string();
        for key in ["resnet50", "efficientnet_b1", "efficientnet_b7", "efficientnet_v2_b1"] {
            assert!(msg.contains(key), "{msg}");
        }
        assert_eq!(BackboneId::lookup("EfficientNetB1").unwrap(), BackboneId::EfficientNetB1);
    }

    #[test]
    fn feature_grid_for_default_input() {
        assert_eq!(BackboneId::ResNet50.feature_grid(512, 512), (16, 16));
        assert_eq!(BackboneId::ResNet50.feature_grid(224, 224), (7, 7));
        assert_eq!(BackboneId::EfficientNetB1.feature_grid(240, 240), (8, 8));
    }
}
