//! Images, watermarks, datasets and seeded randomness shared by every
//! other module.

mod dataset;
mod image;
mod seed;
mod watermark;

pub use dataset::{build_dataset, synthetic_image, Dataset, DatasetItem, DatasetSource, Split};
pub(crate) use image::LUMA;
pub use image::{axis_weights, load_image, save_image, Image, Shape};
pub use seed::Seed;
pub use watermark::{sample_bit_watermark, BitString, Watermark};
