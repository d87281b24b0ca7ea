//! Encoder, decoders, discriminator and the fixed perceptual pyramid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::profile::WatermarkSpec;
use crate::data::{Seed, Shape};
use crate::error::{Error, Result};
use crate::nn::{he_normal, Graph, ParamSet, Scalar, Tensor, Var};

const SLOPE: f64 = 0.2;

/// Size knobs shared by every network in a pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Base channel width `w`.
    pub width: usize,
    /// Channels of the message tensor joined at the encoder bottleneck.
    pub msg_channels: usize,
    /// Seed of the frozen perceptual feature pyramid.
    pub pyramid_seed: u64,
}

pub const DEFAULT_PYRAMID_SEED: u64 = 0x7e7;

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            width: 8,
            msg_channels: 4,
            pyramid_seed: DEFAULT_PYRAMID_SEED,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let mut wt: Tensor<T> = he_normal(rng, [cout, cin, k, k], cin * k * k);
        if gain != 1.0 {
            wt = wt.map(|v| v * T::from_f64_lossy(gain));
        }
        let w = ps.push(format!("{name}.weight"), wt);
        let b = ps.push(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]));
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var, train: bool) -> Var {
        let w = ps.bind(g, self.w, train);
        let b = ps.bind(g, self.b, train);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
}

impl Dense {
    fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        fin: usize,
        fout: usize,
    ) -> Self {
        let w = ps.push(
            format!("{name}.weight"),
            he_normal(rng, [fout, fin, 1, 1], fin),
        );
        let b = ps.push(format!("{name}.bias"), Tensor::zeros([1, fout, 1, 1]));
        Self { w, b }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var, train: bool) -> Var {
        let w = ps.bind(g, self.w, train);
        let b = ps.bind(g, self.b, train);
        g.linear(x, w, Some(b))
    }
}

fn act<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    g.leaky_relu(x, T::from_f64_lossy(SLOPE))
}

pub(crate) const GROUP_ENCODER: u16 = 1;
pub(crate) const GROUP_DECODER: u16 = 2;
pub(crate) const GROUP_DISCRIMINATOR: u16 = 3;
pub(crate) const GROUP_PYRAMID: u16 = 4;

/// U-shaped residual encoder. Bit messages enter through a dense layer at
/// the bottleneck; secret images are stacked onto the cover at the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub params: ParamSet<T>,
    cover: Shape,
    watermark: WatermarkSpec,
    msg_channels: usize,
    e1: Conv,
    e2: Conv,
    e3: Conv,
    msg: Option<Dense>,
    mid: Conv,
    d2: Conv,
    d1: Conv,
    out: Conv,
}

/// Watermark as fed to the encoder: `±1` bit vectors `[n, N, 1, 1]` or
/// secret images `[n, c, h, w]`.
pub fn watermark_input<T: Scalar>(
    g: &mut Graph<T>,
    values: Tensor<T>,
    spec: &WatermarkSpec,
) -> Var {
    let t = if spec.is_bits() {
        values.map(|v| {
            if v > T::from_f64_lossy(0.5) {
                T::one()
            } else {
                -T::one()
            }
        })
    } else {
        values
    };
    g.constant(t)
}

impl<T: Scalar> Encoder<T> {
    pub fn new(
        cover: Shape,
        watermark: WatermarkSpec,
        arch: &ArchConfig,
        seed: Seed,
    ) -> Result<Self> {
        let (h, w, c) = cover;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "unsupported shape {cover:?}: encoder needs height and width divisible by 4"
            )));
        }
        let mut rng = seed.rng();
        let mut ps = ParamSet::new(GROUP_ENCODER);
        let wd = arch.width;
        let (in_ch, msg) = match watermark {
            WatermarkSpec::Bits { n } => (
                c,
                Some(Dense::new(
                    &mut ps,
                    &mut rng,
                    "msg",
                    n,
                    arch.msg_channels * (h / 4) * (w / 4),
                )),
            ),
            WatermarkSpec::Image {
                height,
                width,
                channels,
            } => {
                if (height, width) != (h, w) {
                    return Err(Error::InvalidArgument(format!(
                        "unsupported shape: watermark image {height}×{width} must match cover {h}×{w}"
                    )));
                }
                (c + channels, None)
            }
        };
        let msg_ch = if msg.is_some() { arch.msg_channels } else { 0 };
        let e1 = Conv::new(&mut ps, &mut rng, "e1", in_ch, wd, 3, 1, 1.0);
        let e2 = Conv::new(&mut ps, &mut rng, "e2", wd, 2 * wd, 3, 2, 1.0);
        let e3 = Conv::new(&mut ps, &mut rng, "e3", 2 * wd, 2 * wd, 3, 2, 1.0);
        let mid = Conv::new(&mut ps, &mut rng, "mid", 2 * wd + msg_ch, 2 * wd, 3, 1, 1.0);
        let d2 = Conv::new(&mut ps, &mut rng, "d2", 4 * wd, wd, 3, 1, 1.0);
        let d1 = Conv::new(&mut ps, &mut rng, "d1", 2 * wd, wd, 3, 1, 1.0);
        let out = Conv::new(&mut ps, &mut rng, "out", wd, c, 3, 1, 0.1);
        Ok(Self {
            params: ps,
            cover,
            watermark,
            msg_channels: msg_ch,
            e1,
            e2,
            e3,
            msg,
            mid,
            d2,
            d1,
            out,
        })
    }

    /// Watermarked batch `clamp(cover + residual, 0, 1)`.
    pub fn forward(&self, g: &mut Graph<T>, cover: Var, wm: Var, train: bool) -> Var {
        let ps = &self.params;
        let (h, w, _) = self.cover;
        let n = g.shape(cover)[0];
        let x = if self.msg.is_none() {
            g.concat_channels(cover, wm)
        } else {
            cover
        };
        let a1 = self.e1.apply(g, ps, x, train);
        let a1 = act(g, a1);
        let a2 = self.e2.apply(g, ps, a1, train);
        let a2 = act(g, a2);
        let a3 = self.e3.apply(g, ps, a2, train);
        let mut a3 = act(g, a3);
        if let Some(dense) = &self.msg {
            let m = dense.apply(g, ps, wm, train);
            let m = act(g, m);
            let m = g.reshape(m, [n, self.msg_channels, h / 4, w / 4]);
            a3 = g.concat_channels(a3, m);
        }
        let b = self.mid.apply(g, ps, a3, train);
        let b = act(g, b);
        let u2 = g.upsample2x(b);
        let u2 = g.concat_channels(u2, a2);
        let u2 = self.d2.apply(g, ps, u2, train);
        let u2 = act(g, u2);
        let u1 = g.upsample2x(u2);
        let u1 = g.concat_channels(u1, a1);
        let u1 = self.d1.apply(g, ps, u1, train);
        let u1 = act(g, u1);
        let r = self.out.apply(g, ps, u1, train);
        let y = g.add(cover, r);
        g.clamp(y, T::zero(), T::one())
    }

    pub fn watermark_spec(&self) -> WatermarkSpec {
        self.watermark
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            params: self.params.cast(),
            cover: self.cover,
            watermark: self.watermark,
            msg_channels: self.msg_channels,
            e1: self.e1,
            e2: self.e2,
            e3: self.e3,
            msg: self.msg,
            mid: self.mid,
            d2: self.d2,
            d1: self.d1,
            out: self.out,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum DecoderBody {
    Bits {
        convs: Vec<Conv>,
        fc1: Dense,
        fc2: Dense,
    },
    Image {
        down: Vec<Conv>,
        up: Vec<Conv>,
        head: Conv,
    },
}

/// Bit decoder (conv stack + two dense layers) or image decoder (conv
/// autoencoder). Outputs logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub params: ParamSet<T>,
    input: Shape,
    watermark: WatermarkSpec,
    body: DecoderBody,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(
        input: Shape,
        watermark: WatermarkSpec,
        arch: &ArchConfig,
        seed: Seed,
    ) -> Result<Self> {
        let (h, w, c) = input;
        let mut rng = seed.rng();
        let mut ps = ParamSet::new(GROUP_DECODER);
        let wd = arch.width;
        let body = match watermark {
            WatermarkSpec::Bits { n } => {
                let plan = [
                    (c, wd, 2),
                    (wd, 2 * wd, 2),
                    (2 * wd, 2 * wd, 1),
                    (2 * wd, 4 * wd, 2),
                ];
                let (mut oh, mut ow) = (h, w);
                let convs = plan
                    .iter()
                    .enumerate()
                    .map(|(i, &(ci, co, s))| {
                        oh = oh.div_ceil(s);
                        ow = ow.div_ceil(s);
                        Conv::new(&mut ps, &mut rng, &format!("c{i}"), ci, co, 3, s, 1.0)
                    })
                    .collect();
                let fc1 = Dense::new(&mut ps, &mut rng, "fc1", 4 * wd * oh * ow, 8 * wd);
                let fc2 = Dense::new(&mut ps, &mut rng, "fc2", 8 * wd, n);
                DecoderBody::Bits { convs, fc1, fc2 }
            }
            WatermarkSpec::Image {
                height,
                width,
                channels,
            } => {
                if (height, width) != (h, w) || h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "unsupported shape: image decoder needs watermark {height}×{width} equal to input {h}×{w}, divisible by 4"
                    )));
                }
                let down = vec![
                    Conv::new(&mut ps, &mut rng, "down0", c, wd, 3, 1, 1.0),
                    Conv::new(&mut ps, &mut rng, "down1", wd, 2 * wd, 3, 2, 1.0),
                    Conv::new(&mut ps, &mut rng, "down2", 2 * wd, 2 * wd, 3, 2, 1.0),
                ];
                let up = vec![
                    Conv::new(&mut ps, &mut rng, "up1", 2 * wd, wd, 3, 1, 1.0),
                    Conv::new(&mut ps, &mut rng, "up0", wd, wd, 3, 1, 1.0),
                ];
                let head = Conv::new(&mut ps, &mut rng, "head", wd, channels, 3, 1, 1.0);
                DecoderBody::Image { down, up, head }
            }
        };
        Ok(Self {
            params: ps,
            input,
            watermark,
            body,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn watermark_spec(&self) -> WatermarkSpec {
        self.watermark
    }

    /// Logits `[n, N, 1, 1]` for bits, `[n, c, h, w]` for images.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, train: bool) -> Var {
        let ps = &self.params;
        match &self.body {
            DecoderBody::Bits { convs, fc1, fc2 } => {
                let mut y = x;
                for cv in convs {
                    y = cv.apply(g, ps, y, train);
                    y = act(g, y);
                }
                let y = fc1.apply(g, ps, y, train);
                let y = act(g, y);
                fc2.apply(g, ps, y, train)
            }
            DecoderBody::Image { down, up, head } => {
                let mut y = x;
                for cv in down {
                    y = cv.apply(g, ps, y, train);
                    y = act(g, y);
                }
                for cv in up {
                    y = g.upsample2x(y);
                    y = cv.apply(g, ps, y, train);
                    y = act(g, y);
                }
                head.apply(g, ps, y, train)
            }
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.watermark.arity()
    }

    pub fn cast<U: Scalar>(&self) -> Decoder<U> {
        Decoder {
            params: self.params.cast(),
            input: self.input,
            watermark: self.watermark,
            body: self.body.clone(),
        }
    }
}

/// Two strided convolutions, global pooling, one logit ("watermarked").
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub params: ParamSet<T>,
    c1: Conv,
    c2: Conv,
    fc: Dense,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(channels: usize, arch: &ArchConfig, seed: Seed) -> Self {
        let mut rng = seed.rng();
        let mut ps = ParamSet::new(GROUP_DISCRIMINATOR);
        let wd = arch.width;
        let c1 = Conv::new(&mut ps, &mut rng, "c1", channels, wd, 3, 2, 1.0);
        let c2 = Conv::new(&mut ps, &mut rng, "c2", wd, 2 * wd, 3, 2, 1.0);
        let fc = Dense::new(&mut ps, &mut rng, "fc", 2 * wd, 1);
        Self {
            params: ps,
            c1,
            c2,
            fc,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, train: bool) -> Var {
        let ps = &self.params;
        let y = self.c1.apply(g, ps, x, train);
        let y = act(g, y);
        let y = self.c2.apply(g, ps, y, train);
        let y = act(g, y);
        let y = g.global_avg_pool(y);
        self.fc.apply(g, ps, y, train)
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator {
            params: self.params.cast(),
            c1: self.c1,
            c2: self.c2,
            fc: self.fc,
        }
    }
}

/// Frozen random feature pyramid behind the perceptual distance: four
/// stride-2 stages of 8/16/32/64 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid<T> {
    params: ParamSet<T>,
    stages: Vec<Conv>,
    channels: usize,
}

pub(crate) const PYRAMID_WIDTHS: [usize; 4] = [8, 16, 32, 64];

impl<T: Scalar> Pyramid<T> {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = Seed(seed).derive(&format!("pyramid-{channels}")).rng();
        let mut ps = ParamSet::new(GROUP_PYRAMID);
        let mut cin = channels;
        let stages = PYRAMID_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &co)| {
                let cv = Conv::new(&mut ps, &mut rng, &format!("p{i}"), cin, co, 3, 2, 1.0);
                cin = co;
                cv
            })
            .collect();
        Self {
            params: ps,
            stages,
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Unit-normalized features of every stage.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let eps = T::from_f64_lossy(1e-10);
        let mut y = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for cv in &self.stages {
            y = cv.apply(g, &self.params, y, false);
            y = act(g, y);
            out.push(g.channel_normalize(y, eps));
        }
        out
    }

    /// Mean over stages of the spatially averaged squared distance between
    /// normalized feature vectors.
    pub fn distance(&self, g: &mut Graph<T>, a: Var, b: Var) -> Var {
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        let k = T::from_f64_lossy(1.0 / fa.len() as f64);
        let mut total: Option<Var> = None;
        for ((&x, &y), &c) in fa.iter().zip(&fb).zip(&PYRAMID_WIDTHS) {
            let d = g.mse(x, y);
            let d = g.scale(d, T::from_usize(c).unwrap() * k);
            total = Some(match total {
                Some(t) => g.add(t, d),
                None => d,
            });
        }
        total.expect("pyramid has stages")
    }

    pub fn cast<U: Scalar>(&self) -> Pyramid<U> {
        Pyramid {
            params: self.params.cast(),
            stages: self.stages.clone(),
            channels: self.channels,
        }
    }
}
