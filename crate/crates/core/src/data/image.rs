use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::nn::{Scalar, Tensor};

/// `[height, width, channels]` intensities in `[0, 1]`, stored row-major
/// with interleaved channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

/// `(height, width, channels)`.
pub type Shape = (usize, usize, usize);

pub(crate) const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(shape_mismatch(height * width * channels, pixels.len()));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Build from arbitrary reals, clamping into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut pixels: Vec<f32>,
    ) -> Result<Self> {
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, pixels)
    }

    pub fn filled(shape: Shape, value: f32) -> Result<Self> {
        Self::new(
            shape.0,
            shape.1,
            shape.2,
            vec![value; shape.0 * shape.1 * shape.2],
        )
    }

    pub fn from_fn(shape: Shape, f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        let (h, w, c) = shape;
        let mut px = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    px.push(f(y, x, ch));
                }
            }
        }
        Self::from_clamped(h, w, c, px)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> Shape {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &p| {
                (lo.min(p), hi.max(p))
            })
    }

    /// `[1, c, h, w]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w, c) = self.shape();
        let mut data = vec![T::zero(); h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = T::from_f64_lossy(self.get(y, x, ch) as f64);
                }
            }
        }
        Tensor::from_vec([1, c, h, w], data)
    }

    /// Stack images into one `[n, c, h, w]` batch.
    pub fn batch_tensor<T: Scalar>(images: &[&Image]) -> Tensor<T> {
        let parts: Vec<Tensor<T>> = images.iter().map(|im| im.to_tensor()).collect();
        Tensor::stack(&parts.iter().collect::<Vec<_>>())
    }

    /// Item `index` of an NCHW tensor, clamped into `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        let item = t.item(index);
        let mut px = vec![0.0f32; h * w * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    px[(y * w + x) * c + ch] = item[(ch * h + y) * w + x].as_f64() as f32;
                }
            }
        }
        Self::from_clamped(h, w, c, px)
    }

    /// Grayscale ↔ RGB. RGB→gray uses BT.601 luma, gray→RGB replicates, so
    /// gray→RGB→gray is the identity.
    pub fn to_channels(&self, channels: usize) -> Result<Self> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (3, 1) => {
                let px = self
                    .pixels
                    .chunks(3)
                    .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
                    .collect();
                Self::from_clamped(self.height, self.width, 1, px)
            }
            (1, 3) => {
                let px = self.pixels.iter().flat_map(|&p| [p, p, p]).collect();
                Self::new(self.height, self.width, 3, px)
            }
            (_, c) => Err(Error::InvalidArgument(format!(
                "unsupported channel count {c}"
            ))),
        }
    }

    /// Round every pixel to the nearest 8-bit level.
    pub fn quantize8(&self) -> Self {
        Self {
            pixels: self
                .pixels
                .iter()
                .map(|&p| to_u8(p) as f32 / 255.0)
                .collect(),
            ..self.clone()
        }
    }

    /// Bilinear resize with half-pixel centres (corner alignment off);
    /// sample coordinates are clamped to the border.
    pub fn resize(&self, out_height: usize, out_width: usize) -> Result<Self> {
        if out_height == 0 || out_width == 0 {
            return Err(Error::InvalidArgument(format!(
                "resize target must be positive, got {out_height}x{out_width}"
            )));
        }
        if (out_height, out_width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let ys = axis_weights(self.height, out_height);
        let xs = axis_weights(self.width, out_width);
        let c = self.channels;
        let mut px = Vec::with_capacity(out_height * out_width * c);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for ch in 0..c {
                    let top =
                        self.get(y0, x0, ch) as f64 * (1.0 - fx) + self.get(y0, x1, ch) as f64 * fx;
                    let bot =
                        self.get(y1, x0, ch) as f64 * (1.0 - fx) + self.get(y1, x1, ch) as f64 * fx;
                    px.push((top * (1.0 - fy) + bot * fy) as f32);
                }
            }
        }
        Self::from_clamped(out_height, out_width, c, px)
    }

    /// Resize then convert channels to match `shape`.
    pub fn adapt(&self, shape: Shape) -> Result<Self> {
        self.resize(shape.0, shape.1)?.to_channels(shape.2)
    }
}

fn to_u8(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per output index along one axis: `(lower source, upper source, upper weight)`.
pub fn axis_weights(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Decode an 8-bit PNG and convert to `target_channels` (1 or 3). Alpha is dropped.
pub fn load_image(path: impl AsRef<Path>, target_channels: usize) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let corrupt = |e: png::DecodingError| match e {
        png::DecodingError::IoError(source)
            if source.kind() != std::io::ErrorKind::UnexpectedEof =>
        {
            Error::Unreadable {
                path: path.to_path_buf(),
                source,
            }
        }
        other => Error::CorruptImage {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(corrupt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::CorruptImage {
            path: path.to_path_buf(),
            reason: "image too large".into(),
        })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(corrupt)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
            depth: info.bit_depth as u8,
        });
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let src_channels = info.color_type.samples();
    let keep = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 1,
        _ => 3,
    };
    let mut px = Vec::with_capacity(h * w * keep);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        for p in row[..w * src_channels].chunks(src_channels) {
            for &v in &p[..keep] {
                px.push(v as f32 / 255.0);
            }
        }
    }
    Image::new(h, w, keep, px)?.to_channels(target_channels)
}

/// Encode as an 8-bit grayscale or RGB PNG (nearest 8-bit level per pixel).
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let unwritable = |source: std::io::Error| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(unwritable)?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        image.width as u32,
        image.height as u32,
    );
    enc.set_color(if image.channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(e) => unwritable(e),
        other => unwritable(std::io::Error::other(other.to_string())),
    };
    let mut writer = enc.write_header().map_err(to_io)?;
    let bytes: Vec<u8> = image.pixels.iter().map(|&p| to_u8(p)).collect();
    writer.write_image_data(&bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_gray_png(path: &Path, w: u32, h: u32, bytes: &[u8]) {
        let file = File::create(path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().unwrap();
        wr.write_image_data(bytes).unwrap();
    }

    #[test]
    fn load_black_white_and_midlevel() {
        let dir = tempfile::tempdir().unwrap();
        let black = dir.path().join("black.png");
        write_gray_png(&black, 2, 2, &[0; 4]);
        assert!(load_image(&black, 1)
            .unwrap()
            .pixels()
            .iter()
            .all(|&p| p == 0.0));
        let white = dir.path().join("white.png");
        write_gray_png(&white, 2, 2, &[255; 4]);
        let im = load_image(&white, 3).unwrap();
        assert_eq!(im.shape(), (2, 2, 3));
        assert!(im.pixels().iter().all(|&p| p == 1.0));
        let mid = dir.path().join("mid.png");
        write_gray_png(&mid, 1, 1, &[128]);
        let v = load_image(&mid, 1).unwrap().get(0, 0, 0);
        assert!((v as f64 - 128.0 / 255.0).abs() < 1e-6);
        assert!((v - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        assert!(matches!(
            load_image(&missing, 1),
            Err(Error::Unreadable { .. })
        ));

        let garbage = dir.path().join("garbage.png");
        std::fs::write(&garbage, b"definitely not a png").unwrap();
        assert!(matches!(
            load_image(&garbage, 1),
            Err(Error::CorruptImage { .. })
        ));

        let deep = dir.path().join("deep.png");
        let file = File::create(&deep).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 1, 1);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        enc.write_header()
            .unwrap()
            .write_image_data(&[1, 2])
            .unwrap();
        assert!(matches!(
            load_image(&deep, 1),
            Err(Error::UnsupportedBitDepth { depth: 16, .. })
        ));
    }

    #[test]
    fn save_round_trip_quantizes_to_nearest_level() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let zeros = Image::filled((3, 4, 3), 0.0).unwrap();
        save_image(&zeros, &p).unwrap();
        assert_eq!(load_image(&p, 3).unwrap(), zeros);

        let half = Image::filled((2, 2, 1), 0.5).unwrap();
        save_image(&half, &p).unwrap();
        let v = load_image(&p, 1).unwrap().get(0, 0, 0) as f64;
        let want = (0.5f64 * 255.0).round() / 255.0;
        assert!((v - want).abs() < 1e-7);
        assert!((v - 0.49803).abs() < 1e-5 || (v - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn save_to_missing_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("no/such/dir/x.png");
        let im = Image::filled((2, 2, 1), 0.2).unwrap();
        assert!(matches!(save_image(&im, &p), Err(Error::Unwritable { .. })));
    }

    #[test]
    fn resize_contracts() {
        let im = Image::new(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(im.resize(2, 2).unwrap(), im);
        let out = im.resize(2, 4).unwrap();
        for row in out.pixels().chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
        let c = Image::filled((5, 7, 3), 0.3).unwrap();
        for (h, w) in [(1, 1), (3, 11), (16, 16)] {
            assert!(c
                .resize(h, w)
                .unwrap()
                .pixels()
                .iter()
                .all(|&p| (p - 0.3).abs() < 1e-6));
        }
        assert!(im.resize(0, 3).is_err());
    }

    #[test]
    fn channel_conversion_and_tensor_round_trip() {
        let g = Image::from_fn((3, 2, 1), |y, x, _| (y * 2 + x) as f32 / 6.0).unwrap();
        let back = g.to_channels(3).unwrap().to_channels(1).unwrap();
        for (a, b) in g.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
        let rgb =
            Image::from_fn((3, 4, 3), |y, x, c| ((y + 2 * x + 3 * c) % 5) as f32 / 4.0).unwrap();
        let t = rgb.to_tensor::<f32>();
        assert_eq!(t.shape(), [1, 3, 3, 4]);
        assert_eq!(Image::from_tensor(&t, 0).unwrap(), rgb);
    }

    #[test]
    fn constructor_rejects_out_of_range() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.5, 0.5]).is_err());
        assert!(
            Image::from_clamped(1, 2, 1, vec![-3.0, f32::NAN])
                .unwrap()
                .pixels()
                == [0.0, 0.0]
        );
    }
}
