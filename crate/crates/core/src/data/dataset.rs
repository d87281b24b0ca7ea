use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{load_image, Shape};
use super::{Image, Seed, Watermark};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
    AttackPairs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub image: Image,
    pub watermark: Option<Watermark>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    items: Vec<DatasetItem>,
}

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Seeded procedural images: gradients, smooth noise and shapes.
    Synthetic,
    /// Every `*.png` under `path` (non-recursive).
    Directory {
        path: PathBuf,
        #[serde(default)]
        with_replacement: bool,
    },
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, items: Vec<DatasetItem>) -> Result<Self> {
        if let Some(first) = items.first() {
            let s = first.image.shape();
            if let Some(bad) = items.iter().find(|it| it.image.shape() != s) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{s:?}"),
                    got: format!("{:?} (item {})", bad.image.shape(), bad.id),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            split,
            items,
        })
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn shape(&self) -> Option<Shape> {
        self.items.first().map(|it| it.image.shape())
    }

    pub fn images(&self) -> impl Iterator<Item = &Image> {
        self.items.iter().map(|it| &it.image)
    }

    /// First `n` items.
    pub fn take(&self, n: usize) -> Self {
        Self {
            name: self.name.clone(),
            split: self.split,
            items: self.items[..n.min(self.items.len())].to_vec(),
        }
    }
}

/// Build `count` images of `shape`, deterministically ordered under `seed`.
pub fn build_dataset(
    name: &str,
    source: &DatasetSource,
    count: usize,
    shape: Shape,
    split: Split,
    seed: Seed,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "dataset count must be at least 1".into(),
        ));
    }
    if shape.0 == 0 || shape.1 == 0 || !(shape.2 == 1 || shape.2 == 3) {
        return Err(Error::InvalidArgument(format!(
            "invalid dataset shape {shape:?}"
        )));
    }
    let items = match source {
        DatasetSource::Synthetic => (0..count)
            .map(|i| {
                let s = seed.derive_index("synthetic", i as u64);
                Ok(DatasetItem {
                    id: format!("syn-{:016x}", s.0),
                    image: synthetic_image(shape, s)?,
                    watermark: None,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        DatasetSource::Directory {
            path,
            with_replacement,
        } => {
            let files = list_pngs(path)?;
            if files.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "no PNG images in {}",
                    path.display()
                )));
            }
            let mut rng = seed.derive("directory-order").rng();
            let chosen: Vec<PathBuf> = if *with_replacement {
                (0..count)
                    .map(|_| files[rng.random_range(0..files.len())].clone())
                    .collect()
            } else {
                if count > files.len() {
                    return Err(Error::InvalidArgument(format!(
                        "requested {count} images but {} holds only {}",
                        path.display(),
                        files.len()
                    )));
                }
                let mut shuffled = files;
                shuffled.shuffle(&mut rng);
                shuffled.truncate(count);
                shuffled
            };
            chosen
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let image = load_image(f, shape.2)?.resize(shape.0, shape.1)?;
                    let stem = f
                        .file_name()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    Ok(DatasetItem {
                        id: if *with_replacement {
                            format!("{stem}#{i}")
                        } else {
                            stem
                        },
                        image,
                        watermark: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Dataset::new(name, split, items)
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|source| Error::Unreadable {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for entry in rd {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) && p.is_file() {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Procedural cover: a colour gradient, a smooth value-noise texture, and
/// up to four filled shapes.
pub fn synthetic_image(shape: Shape, seed: Seed) -> Result<Image> {
    let (h, w, c) = shape;
    let mut rng = seed.rng();
    let mut px = vec![0.0f32; h * w * c];

    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let lo: Vec<f32> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
    let hi: Vec<f32> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
    for y in 0..h {
        for x in 0..w {
            let t = 0.5
                + 0.5 * ((x as f32 / w as f32 - 0.5) * dx + (y as f32 / h as f32 - 0.5) * dy) * 1.4;
            let t = t.clamp(0.0, 1.0);
            for ch in 0..c {
                px[(y * w + x) * c + ch] = lo[ch] * (1.0 - t) + hi[ch] * t;
            }
        }
    }

    let grid = rng.random_range(2..=6usize);
    let amp: f32 = rng.random_range(0.05..0.3);
    let coarse: Vec<f32> = (0..grid * grid * c)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let coarse = Image::from_clamped(
        grid,
        grid,
        c,
        coarse.iter().map(|v| 0.5 + 0.5 * v).collect(),
    )?;
    let noise = coarse.resize(h, w)?;
    for (p, n) in px.iter_mut().zip(noise.pixels()) {
        *p += amp * (2.0 * n - 1.0);
    }

    let shapes = rng.random_range(0..=4usize);
    for _ in 0..shapes {
        let color: Vec<f32> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
        let alpha: f32 = rng.random_range(0.4..1.0);
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let r = rng.random_range(0.1..0.35) * h.min(w) as f32;
        let is_circle: bool = rng.random();
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                let inside = if is_circle {
                    fy * fy + fx * fx <= r * r
                } else {
                    fy.abs() <= r && fx.abs() <= r * 0.7
                };
                if inside {
                    for ch in 0..c {
                        let p = &mut px[(y * w + x) * c + ch];
                        *p = *p * (1.0 - alpha) + color[ch] * alpha;
                    }
                }
            }
        }
    }
    Image::from_clamped(h, w, c, px)
}
