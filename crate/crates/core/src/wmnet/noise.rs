//! Differentiable distortion layers inserted between encoder and decoder
//! during training.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Image, Seed};
use crate::error::{Error, Result};
use crate::nn::{Graph, Scalar, SpatialMap, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseKind {
    /// Additive white noise, `std ∈ [0, 0.5]`.
    GaussianNoise { std: f64 },
    /// `size × size` box blur with edge clamping; odd `size ≤ 9`.
    Blur { size: usize },
    /// Keep a random rectangle covering `keep` of the area, zero the rest.
    Crop { keep: f64 },
    /// Random homography moving each corner by up to `max_shift` of the side.
    PerspectiveWarp { max_shift: f64 },
    /// Line kernel of `length` pixels at a random angle; `length ≤ 9`.
    MotionBlur { length: usize },
    /// Per-channel contrast and brightness jitter.
    ColorJitter { brightness: f64, contrast: f64 },
    /// Zero each pixel independently with probability `1 - keep`.
    Dropout { keep: f64 },
    /// 3×3 blur followed by rounding to `levels` intensity levels, with a
    /// straight-through gradient for the rounding. Not a JPEG model.
    JpegProxy { levels: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedPolicy {
    FreshPerBatch,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    #[serde(default = "fresh")]
    pub seed_policy: SeedPolicy,
}

fn fresh() -> SeedPolicy {
    SeedPolicy::FreshPerBatch
}

impl NoiseSpec {
    pub fn fresh(kind: NoiseKind) -> Self {
        Self {
            kind,
            seed_policy: SeedPolicy::FreshPerBatch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("noise {self:?}: {what}")));
        match self.kind {
            NoiseKind::GaussianNoise { std } if !(0.0..=0.5).contains(&std) => {
                bad("std outside [0, 0.5]")
            }
            NoiseKind::Blur { size } if size == 0 || size % 2 == 0 || size > 9 => {
                bad("size must be odd and ≤ 9")
            }
            NoiseKind::Crop { keep } if !(keep > 0.0 && keep <= 1.0) => bad("keep outside (0, 1]"),
            NoiseKind::PerspectiveWarp { max_shift } if !(0.0..=0.25).contains(&max_shift) => {
                bad("max_shift outside [0, 0.25]")
            }
            NoiseKind::MotionBlur { length } if length == 0 || length > 9 => {
                bad("length outside [1, 9]")
            }
            NoiseKind::ColorJitter {
                brightness,
                contrast,
            } if !(0.0..=0.5).contains(&brightness) || !(0.0..=0.5).contains(&contrast) => {
                bad("jitter strengths outside [0, 0.5]")
            }
            NoiseKind::Dropout { keep } if !(keep > 0.0 && keep <= 1.0) => {
                bad("keep outside (0, 1]")
            }
            NoiseKind::JpegProxy { levels } if !(2..=256).contains(&levels) => {
                bad("levels outside [2, 256]")
            }
            _ => Ok(()),
        }
    }
}

/// Apply one distortion to a standalone image.
pub fn apply_noise(image: &Image, spec: &NoiseSpec, seed: Seed) -> Result<Image> {
    spec.validate()?;
    let mut g = Graph::<f32>::new();
    let x = g.constant(image.to_tensor());
    let mut rng = seed.rng();
    let y = noise_graph(&mut g, x, spec, &mut rng);
    Image::from_tensor(g.value(y), 0)
}

/// Append the distortion to `g`. Output is clamped to `[0, 1]`. Random
/// geometry is drawn once and shared across the batch; per-pixel noise is
/// drawn per element.
pub fn noise_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    spec: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> Var {
    let shape = g.shape(x);
    let [_, c, h, w] = shape;
    let t = T::from_f64_lossy;
    let y = match spec.kind {
        NoiseKind::GaussianNoise { std } => {
            if std == 0.0 {
                return x;
            }
            let normal = Normal::new(0.0, std).expect("valid std");
            let n = shape.iter().product();
            let noise = Tensor::from_vec(shape, (0..n).map(|_| t(normal.sample(rng))).collect());
            let nv = g.constant(noise);
            g.add(x, nv)
        }
        NoiseKind::Blur { size } => {
            if size == 1 {
                return x;
            }
            let taps = box_taps(size);
            g.spatial(x, Arc::new(kernel_map((h, w), &taps)))
        }
        NoiseKind::Crop { keep } => {
            if keep >= 1.0 {
                return x;
            }
            let side = keep.sqrt();
            let ch = ((h as f64 * side).round() as usize).clamp(1, h);
            let cw = ((w as f64 * side).round() as usize).clamp(1, w);
            let y0 = rng.random_range(0..=h - ch);
            let x0 = rng.random_range(0..=w - cw);
            let mut mask = vec![T::zero(); shape.iter().product()];
            for (pi, plane) in mask.chunks_mut(h * w).enumerate() {
                let _ = pi;
                for yy in y0..y0 + ch {
                    plane[yy * w + x0..yy * w + x0 + cw].fill(T::one());
                }
            }
            let m = g.constant(Tensor::from_vec(shape, mask));
            g.mul(x, m)
        }
        NoiseKind::PerspectiveWarp { max_shift } => {
            if max_shift == 0.0 {
                return x;
            }
            g.spatial(x, Arc::new(perspective_map((h, w), max_shift, rng)))
        }
        NoiseKind::MotionBlur { length } => {
            if length == 1 {
                return x;
            }
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let taps = line_taps(length, angle);
            g.spatial(x, Arc::new(kernel_map((h, w), &taps)))
        }
        NoiseKind::ColorJitter {
            brightness,
            contrast,
        } => {
            let mut scale = Vec::with_capacity(c);
            let mut shift = Vec::with_capacity(c);
            let k = 1.0
                + if contrast > 0.0 {
                    rng.random_range(-contrast..=contrast)
                } else {
                    0.0
                };
            let b0 = if brightness > 0.0 {
                rng.random_range(-brightness..=brightness)
            } else {
                0.0
            };
            for _ in 0..c {
                let kc = k
                    * (1.0
                        + if contrast > 0.0 {
                            rng.random_range(-contrast..=contrast) * 0.25
                        } else {
                            0.0
                        });
                let bc = b0
                    + if brightness > 0.0 {
                        rng.random_range(-brightness..=brightness) * 0.25
                    } else {
                        0.0
                    };
                scale.push(t(kc));
                shift.push(t(0.5 * (1.0 - kc) + bc));
            }
            g.channel_affine(x, scale, shift)
        }
        NoiseKind::Dropout { keep } => {
            if keep >= 1.0 {
                return x;
            }
            let mask = (0..shape.iter().product::<usize>())
                .map(|_| {
                    if rng.random::<f64>() < keep {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let m = g.constant(Tensor::from_vec(shape, mask));
            g.mul(x, m)
        }
        NoiseKind::JpegProxy { levels } => {
            let blurred = g.spatial(x, Arc::new(kernel_map((h, w), &box_taps(3))));
            let q = t((levels - 1) as f64);
            let residual = g
                .value(blurred)
                .map(|v| (v.max(T::zero()).min(T::one()) * q).round() / q - v);
            let r = g.constant(residual);
            g.add(blurred, r)
        }
    };
    g.clamp(y, T::zero(), T::one())
}

fn box_taps(size: usize) -> Vec<(isize, isize, f64)> {
    let r = (size / 2) as isize;
    let wgt = 1.0 / (size * size) as f64;
    (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx, wgt)))
        .collect()
}

/// Taps along a centred line of `length` pixels, combined with bilinear
/// splatting so sub-pixel positions keep unit total weight.
fn line_taps(length: usize, angle: f64) -> Vec<(isize, isize, f64)> {
    let mut acc: std::collections::BTreeMap<(isize, isize), f64> = Default::default();
    let (s, c) = angle.sin_cos();
    let per = 1.0 / length as f64;
    for i in 0..length {
        let d = i as f64 - (length - 1) as f64 / 2.0;
        let (py, px) = (d * s, d * c);
        let (y0, x0) = (py.floor(), px.floor());
        let (fy, fx) = (py - y0, px - x0);
        for (oy, ox, wgt) in [
            (0, 0, (1.0 - fy) * (1.0 - fx)),
            (0, 1, (1.0 - fy) * fx),
            (1, 0, fy * (1.0 - fx)),
            (1, 1, fy * fx),
        ] {
            if wgt > 0.0 {
                *acc.entry((y0 as isize + oy, x0 as isize + ox)).or_default() += wgt * per;
            }
        }
    }
    acc.into_iter()
        .map(|((dy, dx), wgt)| (dy, dx, wgt))
        .collect()
}

/// Convolution by a small kernel with edge clamping, as a spatial map.
fn kernel_map<T: Scalar>(hw: (usize, usize), taps: &[(isize, isize, f64)]) -> SpatialMap<T> {
    let (h, w) = hw;
    let rows = (0..h * w)
        .map(|o| {
            let (y, x) = ((o / w) as isize, (o % w) as isize);
            let mut row: Vec<(u32, T)> = Vec::with_capacity(taps.len());
            for &(dy, dx, wgt) in taps {
                let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                let sx = (x + dx).clamp(0, w as isize - 1) as usize;
                row.push(((sy * w + sx) as u32, T::from_f64_lossy(wgt)));
            }
            row
        })
        .collect();
    SpatialMap::from_rows(hw, hw, rows)
}

/// Bilinear sampling map for a resize with half-pixel centres.
pub fn resize_map<T: Scalar>(in_hw: (usize, usize), out_hw: (usize, usize)) -> SpatialMap<T> {
    let ys = crate::data::axis_weights(in_hw.0, out_hw.0);
    let xs = crate::data::axis_weights(in_hw.1, out_hw.1);
    let rows = ys
        .iter()
        .flat_map(|&(y0, y1, fy)| {
            xs.iter().map(move |&(x0, x1, fx)| {
                let w = in_hw.1;
                vec![
                    (
                        (y0 * w + x0) as u32,
                        T::from_f64_lossy((1.0 - fy) * (1.0 - fx)),
                    ),
                    ((y0 * w + x1) as u32, T::from_f64_lossy((1.0 - fy) * fx)),
                    ((y1 * w + x0) as u32, T::from_f64_lossy(fy * (1.0 - fx))),
                    ((y1 * w + x1) as u32, T::from_f64_lossy(fy * fx)),
                ]
            })
        })
        .collect();
    SpatialMap::from_rows(in_hw, out_hw, rows)
}

fn perspective_map<T: Scalar>(
    hw: (usize, usize),
    max_shift: f64,
    rng: &mut ChaCha8Rng,
) -> SpatialMap<T> {
    let (h, w) = hw;
    let (hf, wf) = (h as f64, w as f64);
    let dst = [(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)];
    let mut src = dst;
    for p in &mut src {
        p.0 += rng.random_range(-max_shift..=max_shift) * wf;
        p.1 += rng.random_range(-max_shift..=max_shift) * hf;
    }
    let hm = homography(&dst, &src);
    let rows = (0..h * w)
        .map(|o| {
            let (u, v) = ((o % w) as f64 + 0.5, (o / w) as f64 + 0.5);
            let den = hm[6] * u + hm[7] * v + 1.0;
            let sx = (hm[0] * u + hm[1] * v + hm[2]) / den - 0.5;
            let sy = (hm[3] * u + hm[4] * v + hm[5]) / den - 0.5;
            let sx = sx.clamp(0.0, wf - 1.0);
            let sy = sy.clamp(0.0, hf - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            vec![
                (
                    (y0 * w + x0) as u32,
                    T::from_f64_lossy((1.0 - fy) * (1.0 - fx)),
                ),
                ((y0 * w + x1) as u32, T::from_f64_lossy((1.0 - fy) * fx)),
                ((y1 * w + x0) as u32, T::from_f64_lossy(fy * (1.0 - fx))),
                ((y1 * w + x1) as u32, T::from_f64_lossy(fy * fx)),
            ]
        })
        .collect();
    SpatialMap::from_rows(hw, hw, rows)
}

/// Homography (h33 = 1) taking each `from[i]` to `to[i]`.
fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> [f64; 8] {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = from[i];
        let (u, v) = to[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let piv = (col..8)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        a.swap(col, piv);
        let p = a[col][col];
        for v in &mut a[col][col..] {
            *v /= p;
        }
        let pivot = a[col];
        for (r, row) in a.iter_mut().enumerate() {
            if r != col {
                let f = row[col];
                for (v, pv) in row[col..].iter_mut().zip(&pivot[col..]) {
                    *v -= f * pv;
                }
            }
        }
    }
    let mut out = [0.0; 8];
    for i in 0..8 {
        out[i] = a[i][8];
    }
    out
}
