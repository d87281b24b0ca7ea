//! Image-quality and watermark-agreement measures, and report aggregation.

use serde::{Deserialize, Serialize};

use crate::attack::AttackResult;
use crate::data::{Image, Watermark};
use crate::error::{shape_mismatch, Error, Result};
use crate::nn::Graph;
use crate::wmnet::Pyramid;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Per-image measures between the attacked and the watermarked image, and
/// between the extracted and the target watermark.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub psnr: f64,
    pub ssim: f64,
    pub lpips_proxy: f64,
    pub mse: f64,
    /// Bit error rate against the target watermark (bit kinds only).
    pub ber: Option<f64>,
    pub cosine: f64,
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_mismatch(
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(1 / mse)` for unit-range images, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB)
    }
}

/// Mean SSIM over all 8×8 windows (stride 1, uniform weights, population
/// statistics), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_windowed(a, b, SSIM_WINDOW)
}

/// SSIM with a `k×k` window.
pub fn ssim_windowed(a: &Image, b: &Image, k: usize) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w, c) = a.shape();
    if k == 0 || h < k || w < k {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {k}×{k}, got {h}×{w}"
        )));
    }
    let n = (k * k) as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        let p = a.get(y, x, ch) as f64;
                        let q = b.get(y, x, ch) as f64;
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
        total += acc / ((h - k + 1) * (w - k + 1)) as f64;
    }
    Ok(total / c as f64)
}

/// Perceptual distance through the frozen random pyramid seeded by
/// `pyramid_seed`.
pub fn lpips_proxy(a: &Image, b: &Image, pyramid_seed: u64) -> Result<f64> {
    same_shape(a, b)?;
    if a == b {
        return Ok(0.0);
    }
    let pyr = Pyramid::<f64>::new(a.channels(), pyramid_seed);
    Ok(pyramid_distance(&pyr, a, b))
}

pub(crate) fn pyramid_distance(pyr: &Pyramid<f64>, a: &Image, b: &Image) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(a.to_tensor());
    let y = g.constant(b.to_tensor());
    let d = pyr.distance(&mut g, x, y);
    g.value(d).value().max(0.0)
}

fn bit_pair<'a>(a: &'a Watermark, b: &'a Watermark) -> Result<(&'a [bool], &'a [bool])> {
    match (a, b) {
        (Watermark::Bits(x), Watermark::Bits(y)) => {
            if x.len() != y.len() {
                return Err(shape_mismatch(
                    format!("{} bits", x.len()),
                    format!("{} bits", y.len()),
                ));
            }
            Ok((x.bits(), y.bits()))
        }
        _ => Err(Error::KindMismatch(
            "bit error rate needs two bit watermarks".into(),
        )),
    }
}

/// Fraction of differing bits.
pub fn ber(a: &Watermark, b: &Watermark) -> Result<f64> {
    let (x, y) = bit_pair(a, b)?;
    Ok(x.iter().zip(y).filter(|(p, q)| p != q).count() as f64 / x.len() as f64)
}

pub fn bit_accuracy(a: &Watermark, b: &Watermark) -> Result<f64> {
    Ok(1.0 - ber(a, b)?)
}

/// Cosine similarity; bits are mapped to ±1, images are mean-centred.
pub fn cosine_similarity(a: &Watermark, b: &Watermark) -> Result<f64> {
    let (u, v): (Vec<f64>, Vec<f64>) = match (a, b) {
        (Watermark::Bits(_), Watermark::Bits(_)) => {
            let (x, y) = bit_pair(a, b)?;
            let pm = |s: &[bool]| {
                s.iter()
                    .map(|&t| if t { 1.0 } else { -1.0 })
                    .collect::<Vec<_>>()
            };
            (pm(x), pm(y))
        }
        (Watermark::Image(x), Watermark::Image(y)) => {
            same_shape(x, y)?;
            let centred = |im: &Image| {
                let m = im.pixels().iter().map(|&p| p as f64).sum::<f64>() / im.len() as f64;
                im.pixels()
                    .iter()
                    .map(|&p| p as f64 - m)
                    .collect::<Vec<_>>()
            };
            (centred(x), centred(y))
        }
        _ => {
            return Err(Error::KindMismatch(
                "cosine similarity needs watermarks of one kind".into(),
            ))
        }
    };
    let dot: f64 = u.iter().zip(&v).map(|(p, q)| p * q).sum();
    let nu = u.iter().map(|p| p * p).sum::<f64>().sqrt();
    let nv = v.iter().map(|p| p * p).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(if u == v { 1.0 } else { 0.0 });
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Visualization of `attacked − cover`: `0.5 + gain·diff`, clamped.
pub fn residual(cover: &Image, attacked: &Image, gain: f64) -> Result<Image> {
    same_shape(cover, attacked)?;
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::InvalidArgument(
            "residual gain must be positive".into(),
        ));
    }
    let (h, w, c) = cover.shape();
    let px = cover
        .pixels()
        .iter()
        .zip(attacked.pixels())
        .map(|(&p, &q)| (0.5 + gain * (q as f64 - p as f64)) as f32)
        .collect();
    Image::from_clamped(h, w, c, px)
}

/// All image and watermark measures for one attacked image. Images smaller
/// than the SSIM window use a window as large as the image.
pub fn metric_record(
    watermarked: &Image,
    attacked: &Image,
    extracted: &Watermark,
    beta: &Watermark,
    pyramid_seed: u64,
) -> Result<MetricRecord> {
    let m = mse(watermarked, attacked)?;
    let (h, w, _) = watermarked.shape();
    Ok(MetricRecord {
        psnr: psnr_from_mse(m),
        ssim: ssim_windowed(watermarked, attacked, SSIM_WINDOW.min(h).min(w))?,
        lpips_proxy: lpips_proxy(watermarked, attacked, pyramid_seed)?,
        mse: m,
        ber: match extracted {
            Watermark::Bits(_) => Some(ber(extracted, beta)?),
            Watermark::Image(_) => None,
        },
        cosine: cosine_similarity(extracted, beta)?,
    })
}

/// One row of a report: mean metrics plus success and removal rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub technique: String,
    /// Fine-tuning epochs of the surrogate (black-box rows).
    pub epoch: Option<usize>,
    /// Harvested pairs used for fine-tuning (black-box rows).
    pub images: Option<usize>,
    pub pert_limit: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips_proxy: f64,
    pub mse: f64,
    pub ber: Option<f64>,
    pub cosine: f64,
    /// Percentages in `[0, 100]`.
    pub asr: f64,
    pub removal_rate: f64,
    pub count: usize,
}

/// Mean metrics and rates over attack results. `technique` and `pert_limit`
/// label the row; `epoch` and `images` start unset.
pub fn aggregate(
    technique: &str,
    pert_limit: f64,
    results: &[AttackResult],
) -> Result<AggregateRow> {
    if results.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot aggregate an empty result list".into(),
        ));
    }
    let n = results.len() as f64;
    let mean =
        |f: &dyn Fn(&MetricRecord) -> f64| results.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
    let bers: Option<Vec<f64>> = results.iter().map(|r| r.metrics.ber).collect();
    Ok(AggregateRow {
        technique: technique.into(),
        epoch: None,
        images: None,
        pert_limit,
        psnr: mean(&|m| m.psnr),
        ssim: mean(&|m| m.ssim),
        lpips_proxy: mean(&|m| m.lpips_proxy),
        mse: mean(&|m| m.mse),
        ber: bers.map(|b| b.iter().sum::<f64>() / n),
        cosine: mean(&|m| m.cosine),
        asr: 100.0 * results.iter().filter(|r| r.success).count() as f64 / n,
        removal_rate: 100.0 * results.iter().filter(|r| r.removal).count() as f64 / n,
        count: results.len(),
    })
}
