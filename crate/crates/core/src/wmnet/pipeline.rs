use serde::{Deserialize, Serialize};

use super::nets::{watermark_input, ArchConfig, Decoder, Discriminator, Encoder, Pyramid};
use super::profile::{TechniqueProfile, WatermarkSpec};
use super::train::TrainConfig;
use crate::data::{BitString, Image, Seed, Shape, Watermark};
use crate::error::{shape_mismatch, Error, Result};
use crate::nn::{sigmoid, Graph, Scalar, Tensor, Var};

/// Encoder, decoder, optional discriminator and perceptual pyramid for one
/// technique profile.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline<T = f32> {
    pub profile: TechniqueProfile,
    pub arch: ArchConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub discriminator: Option<Discriminator<T>>,
    pub pyramid: Pyramid<T>,
    /// Configuration of the last training run, if any.
    pub train_config: Option<TrainConfig>,
}

/// Raw decoder output for one image: `N` logits, or per-pixel logits in
/// NCHW order for image watermarks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatermarkEstimate {
    pub spec: WatermarkSpec,
    pub logits: Vec<f64>,
}

impl WatermarkEstimate {
    pub fn new(spec: WatermarkSpec, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != spec.arity() {
            return Err(shape_mismatch(spec.arity(), logits.len()));
        }
        Ok(Self { spec, logits })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&x| sigmoid(x)).collect()
    }

    /// Decoded image watermark `sigmoid(logits)`.
    pub fn to_image(&self) -> Result<Image> {
        match self.spec {
            WatermarkSpec::Image {
                height,
                width,
                channels,
            } => {
                let t = Tensor::from_vec([1, channels, height, width], self.probabilities());
                Image::from_tensor(&t, 0)
            }
            WatermarkSpec::Bits { .. } => {
                Err(Error::KindMismatch("bit estimate has no image form".into()))
            }
        }
    }
}

/// Threshold bit logits: bit `i` is set iff `logit_i > 0`.
pub fn decode_bits(estimate: &WatermarkEstimate) -> Result<Watermark> {
    if !estimate.spec.is_bits() {
        return Err(Error::KindMismatch(
            "decode_bits called on an image estimate".into(),
        ));
    }
    Ok(Watermark::Bits(BitString::new(
        estimate.logits.iter().map(|&x| x > 0.0).collect(),
    )?))
}

/// Anything that maps an image batch to watermark logits differentiably.
pub trait DifferentiableDecoder<T: Scalar>: Sync {
    fn input_shape(&self) -> Shape;
    fn watermark_spec(&self) -> WatermarkSpec;
    /// Logits for the batch `x`, with parameters frozen.
    fn logits(&self, g: &mut Graph<T>, x: Var) -> Var;
}

impl<T: Scalar> DifferentiableDecoder<T> for Decoder<T> {
    fn input_shape(&self) -> Shape {
        Decoder::input_shape(self)
    }

    fn watermark_spec(&self) -> WatermarkSpec {
        Decoder::watermark_spec(self)
    }

    fn logits(&self, g: &mut Graph<T>, x: Var) -> Var {
        self.forward(g, x, false)
    }
}

impl<T: Scalar> DifferentiableDecoder<T> for Pipeline<T> {
    fn input_shape(&self) -> Shape {
        self.profile.cover_shape
    }

    fn watermark_spec(&self) -> WatermarkSpec {
        self.profile.watermark
    }

    fn logits(&self, g: &mut Graph<T>, x: Var) -> Var {
        self.decoder.forward(g, x, false)
    }
}

pub fn build_pipeline(profile: &TechniqueProfile, seed: Seed) -> Result<Pipeline> {
    Pipeline::new(profile, ArchConfig::default(), seed)
}

/// Check that `wm` fits `spec`.
pub fn check_watermark(spec: &WatermarkSpec, wm: &Watermark) -> Result<()> {
    match (spec, wm) {
        (WatermarkSpec::Bits { n }, Watermark::Bits(b)) => {
            if b.len() != *n {
                return Err(shape_mismatch(
                    format!("{n} bits"),
                    format!("{} bits", b.len()),
                ));
            }
        }
        (
            WatermarkSpec::Image {
                height,
                width,
                channels,
            },
            Watermark::Image(im),
        ) => {
            if im.shape() != (*height, *width, *channels) {
                return Err(shape_mismatch(
                    format!("{:?}", (height, width, channels)),
                    format!("{:?}", im.shape()),
                ));
            }
        }
        _ => {
            return Err(Error::KindMismatch(format!(
                "profile expects {} watermark, got {}",
                if spec.is_bits() { "bits" } else { "image" },
                wm.kind_name()
            )))
        }
    }
    Ok(())
}

impl<T: Scalar> Pipeline<T> {
    pub fn new(profile: &TechniqueProfile, arch: ArchConfig, seed: Seed) -> Result<Self> {
        profile.validate()?;
        if arch.width == 0 || (profile.watermark.is_bits() && arch.msg_channels == 0) {
            return Err(Error::InvalidArgument(
                "architecture widths must be positive".into(),
            ));
        }
        let cover = profile.cover_shape;
        Ok(Self {
            profile: profile.clone(),
            arch,
            encoder: Encoder::new(cover, profile.watermark, &arch, seed.derive("encoder"))?,
            decoder: Decoder::new(cover, profile.watermark, &arch, seed.derive("decoder"))?,
            discriminator: profile
                .has_discriminator
                .then(|| Discriminator::new(cover.2, &arch, seed.derive("discriminator"))),
            pyramid: Pyramid::new(cover.2, arch.pyramid_seed),
            train_config: None,
        })
    }

    pub fn cover_shape(&self) -> Shape {
        self.profile.cover_shape
    }

    fn check_cover(&self, im: &Image) -> Result<()> {
        if im.shape() != self.profile.cover_shape {
            return Err(shape_mismatch(
                format!("{:?}", self.profile.cover_shape),
                format!("{:?}", im.shape()),
            ));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.encoder.params.num_scalars()
            + self.decoder.params.num_scalars()
            + self
                .discriminator
                .as_ref()
                .map_or(0, |d| d.params.num_scalars())
    }

    pub fn all_finite(&self) -> bool {
        self.encoder.params.all_finite()
            && self.decoder.params.all_finite()
            && self
                .discriminator
                .as_ref()
                .is_none_or(|d| d.params.all_finite())
    }

    pub fn embed(&self, cover: &Image, wm: &Watermark) -> Result<Image> {
        Ok(self.embed_batch(&[cover], &[wm])?.remove(0))
    }

    pub fn embed_batch(&self, covers: &[&Image], wms: &[&Watermark]) -> Result<Vec<Image>> {
        if covers.len() != wms.len() {
            return Err(shape_mismatch(covers.len(), wms.len()));
        }
        if covers.is_empty() {
            return Ok(Vec::new());
        }
        for (c, w) in covers.iter().zip(wms) {
            self.check_cover(c)?;
            check_watermark(&self.profile.watermark, w)?;
        }
        let mut g = Graph::new();
        let x = g.constant(Image::batch_tensor(covers));
        let m = watermark_batch(&mut g, wms, &self.profile.watermark);
        let y = self.encoder.forward(&mut g, x, m, false);
        (0..covers.len())
            .map(|i| Image::from_tensor(g.value(y), i))
            .collect()
    }

    pub fn extract(&self, image: &Image) -> Result<WatermarkEstimate> {
        Ok(self.extract_batch(&[image])?.remove(0))
    }

    pub fn extract_batch(&self, images: &[&Image]) -> Result<Vec<WatermarkEstimate>> {
        for im in images {
            self.check_cover(im)?;
        }
        decoder_estimates(&self.decoder, images)
    }

    pub fn cast<U: Scalar>(&self) -> Pipeline<U> {
        Pipeline {
            profile: self.profile.clone(),
            arch: self.arch,
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            discriminator: self.discriminator.as_ref().map(Discriminator::cast),
            pyramid: self.pyramid.cast(),
            train_config: self.train_config.clone(),
        }
    }
}

/// Run a decoder over images of its input shape.
pub fn decoder_estimates<T: Scalar, D: DifferentiableDecoder<T> + ?Sized>(
    dec: &D,
    images: &[&Image],
) -> Result<Vec<WatermarkEstimate>> {
    let spec = dec.watermark_spec();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        for im in chunk {
            if im.shape() != dec.input_shape() {
                return Err(shape_mismatch(
                    format!("{:?}", dec.input_shape()),
                    format!("{:?}", im.shape()),
                ));
            }
        }
        let mut g = Graph::new();
        let x = g.constant(Image::batch_tensor(chunk));
        let y = dec.logits(&mut g, x);
        let v = g.value(y);
        for i in 0..chunk.len() {
            out.push(WatermarkEstimate::new(
                spec,
                v.item(i).iter().map(|x| x.as_f64()).collect(),
            )?);
        }
    }
    Ok(out)
}

pub(crate) fn watermark_batch<T: Scalar>(
    g: &mut Graph<T>,
    wms: &[&Watermark],
    spec: &WatermarkSpec,
) -> Var {
    let n = wms.len();
    let t = match spec {
        WatermarkSpec::Bits { n: bits } => Tensor::from_vec(
            [n, *bits, 1, 1],
            wms.iter()
                .flat_map(|w| w.target_values())
                .map(T::from_f64_lossy)
                .collect(),
        ),
        WatermarkSpec::Image { .. } => {
            let ims: Vec<&Image> = wms
                .iter()
                .map(|w| w.image().expect("checked kind"))
                .collect();
            Image::batch_tensor(&ims)
        }
    };
    watermark_input(g, t, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_bit_watermark;

    #[test]
    fn decode_bits_thresholds_strictly() {
        let spec = WatermarkSpec::Bits { n: 3 };
        let est = WatermarkEstimate::new(spec, vec![-2.0, 3.0, 0.1]).unwrap();
        assert_eq!(
            decode_bits(&est).unwrap().bits().unwrap().as_u8(),
            [0, 1, 1]
        );
        let zeros = WatermarkEstimate::new(spec, vec![0.0; 3]).unwrap();
        assert_eq!(
            decode_bits(&zeros).unwrap().bits().unwrap().as_u8(),
            [0, 0, 0]
        );
        let one = WatermarkEstimate::new(WatermarkSpec::Bits { n: 1 }, vec![5.0]).unwrap();
        assert_eq!(decode_bits(&one).unwrap().bits().unwrap().as_u8(), [1]);
        let img = WatermarkEstimate::new(
            WatermarkSpec::Image {
                height: 1,
                width: 1,
                channels: 1,
            },
            vec![0.0],
        )
        .unwrap();
        assert!(decode_bits(&img).is_err());
    }

    #[test]
    fn decode_bits_survives_saturated_reencoding() {
        let spec = WatermarkSpec::Bits { n: 6 };
        let est = WatermarkEstimate::new(spec, vec![-0.3, 2.0, 0.0, 1e-9, -7.0, 4.0]).unwrap();
        let bits = decode_bits(&est).unwrap();
        let saturated = bits
            .target_values()
            .iter()
            .map(|&b| if b > 0.5 { 1e30 } else { -1e30 })
            .collect();
        let again = decode_bits(&WatermarkEstimate::new(spec, saturated).unwrap()).unwrap();
        assert_eq!(bits, again);
    }

    #[test]
    fn build_is_deterministic_and_shapes_hold() {
        let p = TechniqueProfile::redmark_like();
        let a = build_pipeline(&p, Seed(1)).unwrap();
        let b = build_pipeline(&p, Seed(1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(
            a.encoder.params,
            build_pipeline(&p, Seed(2)).unwrap().encoder.params
        );
        assert_eq!(a.decoder.num_outputs(), 8);

        let gray = crate::data::synthetic_image((32, 32, 1), Seed(3)).unwrap();
        let rgb = crate::data::synthetic_image((32, 32, 3), Seed(3)).unwrap();
        let wm = sample_bit_watermark(8, Seed(4)).unwrap();
        let out = a.embed(&gray, &wm).unwrap();
        assert_eq!(out.shape(), gray.shape());
        let (lo, hi) = out.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
        assert!(a.embed(&rgb, &wm).is_err());
        assert!(a.extract(&rgb).is_err());
        assert!(a
            .embed(&gray, &sample_bit_watermark(7, Seed(4)).unwrap())
            .is_err());
        let e1 = a.extract(&out).unwrap();
        assert_eq!(e1.logits.len(), 8);
        assert_eq!(e1, a.extract(&out).unwrap());
    }

    #[test]
    fn image_kind_pipeline() {
        let mut p = TechniqueProfile::hiding_images_like().scaled(0.5);
        p.name = "tiny-hiding".into();
        let pl = build_pipeline(&p, Seed(9)).unwrap();
        let cover = crate::data::synthetic_image((16, 16, 3), Seed(1)).unwrap();
        let secret = Watermark::Image(crate::data::synthetic_image((16, 16, 3), Seed(2)).unwrap());
        let w = pl.embed(&cover, &secret).unwrap();
        let est = pl.extract(&w).unwrap();
        assert_eq!(est.to_image().unwrap().shape(), (16, 16, 3));
        assert!(pl
            .embed(&cover, &sample_bit_watermark(4, Seed(1)).unwrap())
            .is_err());
    }

    #[test]
    fn unsupported_shape_rejected() {
        let mut p = TechniqueProfile::redmark_like();
        p.cover_shape = (30, 32, 1);
        assert!(build_pipeline(&p, Seed(1)).is_err());
    }
}
