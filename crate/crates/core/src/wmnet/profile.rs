use serde::{Deserialize, Serialize};

use super::noise::{NoiseKind, NoiseSpec};
use crate::data::Shape;
use crate::error::{Error, Result};

/// What a technique embeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WatermarkSpec {
    Bits {
        n: usize,
    },
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl WatermarkSpec {
    pub fn is_bits(&self) -> bool {
        matches!(self, WatermarkSpec::Bits { .. })
    }

    /// Number of real outputs a decoder must emit.
    pub fn arity(&self) -> usize {
        match *self {
            WatermarkSpec::Bits { n } => n,
            WatermarkSpec::Image {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }
}

/// Declarative description of one watermarking technique.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TechniqueProfile {
    pub name: String,
    pub cover_shape: Shape,
    pub watermark: WatermarkSpec,
    pub has_discriminator: bool,
    #[serde(default)]
    pub noise_layers: Vec<NoiseSpec>,
    #[serde(default)]
    pub screen_shoot_robust: bool,
}

impl TechniqueProfile {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.cover_shape;
        if h == 0 || w == 0 || !(c == 1 || c == 3) {
            return Err(Error::InvalidArgument(format!(
                "profile {}: invalid cover shape {:?}",
                self.name, self.cover_shape
            )));
        }
        match self.watermark {
            WatermarkSpec::Bits { n: 0 } => {
                return Err(Error::InvalidArgument(format!(
                    "profile {}: zero-bit watermark",
                    self.name
                )))
            }
            WatermarkSpec::Image {
                height,
                width,
                channels,
            } if height == 0 || width == 0 || !(channels == 1 || channels == 3) => {
                return Err(Error::InvalidArgument(format!(
                    "profile {}: invalid watermark image shape",
                    self.name
                )))
            }
            _ => {}
        }
        for spec in &self.noise_layers {
            spec.validate()?;
        }
        if self.screen_shoot_robust {
            let has = |f: fn(&NoiseKind) -> bool| self.noise_layers.iter().any(|s| f(&s.kind));
            if !(has(|k| matches!(k, NoiseKind::PerspectiveWarp { .. }))
                && has(|k| matches!(k, NoiseKind::MotionBlur { .. }))
                && has(|k| matches!(k, NoiseKind::ColorJitter { .. })))
            {
                return Err(Error::InvalidArgument(format!(
                    "profile {}: screen-shooting robustness needs perspective-warp, motion-blur and color-jitter noise",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Same profile with every spatial size multiplied by `factor`, rounded
    /// to a multiple of 8 (minimum 8).
    pub fn scaled(&self, factor: f64) -> Self {
        let s = |v: usize| (((v as f64 * factor) / 8.0).round() as usize).max(1) * 8;
        let mut p = self.clone();
        p.cover_shape = (
            s(self.cover_shape.0),
            s(self.cover_shape.1),
            self.cover_shape.2,
        );
        if let WatermarkSpec::Image {
            height,
            width,
            channels,
        } = self.watermark
        {
            p.watermark = WatermarkSpec::Image {
                height: s(height),
                width: s(width),
                channels,
            };
        }
        p
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "hidden-like" => Self::hidden_like(),
            "redmark-like" => Self::redmark_like(),
            "pimog-like" => Self::pimog_like(),
            "hiding-images-like" => Self::hiding_images_like(),
            "hidden" => Self::hidden_full(),
            "redmark" => Self::redmark_full(),
            "pimog" => Self::pimog_full(),
            "hiding-images" => Self::hiding_images_full(),
            _ => return None,
        })
    }

    pub const PRESETS: [&'static str; 8] = [
        "hidden-like",
        "redmark-like",
        "pimog-like",
        "hiding-images-like",
        "hidden",
        "redmark",
        "pimog",
        "hiding-images",
    ];

    /// Desk-scale HiDDeN analogue: RGB, bit string, discriminator.
    pub fn hidden_like() -> Self {
        Self {
            name: "hidden-like".into(),
            cover_shape: (32, 32, 3),
            watermark: WatermarkSpec::Bits { n: 16 },
            has_discriminator: true,
            noise_layers: vec![
                NoiseSpec::fresh(NoiseKind::GaussianNoise { std: 0.01 }),
                NoiseSpec::fresh(NoiseKind::Crop { keep: 0.8 }),
                NoiseSpec::fresh(NoiseKind::Dropout { keep: 0.9 }),
            ],
            screen_shoot_robust: false,
        }
    }

    /// Desk-scale ReDMark analogue: grayscale 32×32, no discriminator.
    pub fn redmark_like() -> Self {
        Self {
            name: "redmark-like".into(),
            cover_shape: (32, 32, 1),
            watermark: WatermarkSpec::Bits { n: 8 },
            has_discriminator: false,
            noise_layers: vec![
                NoiseSpec::fresh(NoiseKind::GaussianNoise { std: 0.01 }),
                NoiseSpec::fresh(NoiseKind::JpegProxy { levels: 64 }),
            ],
            screen_shoot_robust: false,
        }
    }

    /// Desk-scale PIMoG analogue: screen-shooting noise set plus discriminator.
    pub fn pimog_like() -> Self {
        Self {
            name: "pimog-like".into(),
            cover_shape: (32, 32, 3),
            watermark: WatermarkSpec::Bits { n: 16 },
            has_discriminator: true,
            noise_layers: screen_shoot_noise(),
            screen_shoot_robust: true,
        }
    }

    /// Desk-scale image-in-image hiding analogue.
    pub fn hiding_images_like() -> Self {
        Self {
            name: "hiding-images-like".into(),
            cover_shape: (32, 32, 3),
            watermark: WatermarkSpec::Image {
                height: 32,
                width: 32,
                channels: 3,
            },
            has_discriminator: false,
            noise_layers: Vec::new(),
            screen_shoot_robust: false,
        }
    }

    pub fn hidden_full() -> Self {
        Self {
            name: "hidden".into(),
            cover_shape: (128, 128, 3),
            watermark: WatermarkSpec::Bits { n: 30 },
            ..Self::hidden_like()
        }
    }

    pub fn redmark_full() -> Self {
        Self {
            name: "redmark".into(),
            watermark: WatermarkSpec::Bits { n: 16 },
            ..Self::redmark_like()
        }
    }

    pub fn pimog_full() -> Self {
        Self {
            name: "pimog".into(),
            cover_shape: (128, 128, 3),
            watermark: WatermarkSpec::Bits { n: 30 },
            ..Self::pimog_like()
        }
    }

    pub fn hiding_images_full() -> Self {
        Self {
            name: "hiding-images".into(),
            cover_shape: (200, 200, 3),
            watermark: WatermarkSpec::Image {
                height: 200,
                width: 200,
                channels: 3,
            },
            ..Self::hiding_images_like()
        }
    }
}

/// Perspective warp, motion blur and colour manipulation.
pub fn screen_shoot_noise() -> Vec<NoiseSpec> {
    vec![
        NoiseSpec::fresh(NoiseKind::PerspectiveWarp { max_shift: 0.04 }),
        NoiseSpec::fresh(NoiseKind::MotionBlur { length: 3 }),
        NoiseSpec::fresh(NoiseKind::ColorJitter {
            brightness: 0.05,
            contrast: 0.1,
        }),
    ]
}
