//! On-disk pair sets: one PNG per watermarked image plus a JSON manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AttackPair;
use crate::data::{load_image, save_image, BitString, Watermark};
use crate::error::{Error, Result};

pub const PAIR_MANIFEST: &str = "pairs.json";

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Payload {
    Bits { hex: String, len: usize },
    Image { file: String, channels: usize },
}

#[derive(Serialize, Deserialize)]
struct Entry {
    id: String,
    source: String,
    file: String,
    channels: usize,
    payload: Payload,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    pairs: Vec<Entry>,
}

fn file_stem(i: usize, id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{i:05}-{clean}")
}

/// Write `pairs` under `dir`. Images are stored as 8-bit PNG, so a reload
/// returns quantized pixels.
pub fn save_pairs(dir: impl AsRef<Path>, pairs: &[AttackPair]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| Error::Unwritable {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let stem = file_stem(i, &p.id);
        let file = format!("{stem}.png");
        save_image(&p.watermarked, dir.join(&file))?;
        let payload = match &p.wm {
            Watermark::Bits(b) => Payload::Bits {
                hex: b.to_hex(),
                len: b.len(),
            },
            Watermark::Image(im) => {
                let f = format!("{stem}.wm.png");
                save_image(im, dir.join(&f))?;
                Payload::Image {
                    file: f,
                    channels: im.channels(),
                }
            }
        };
        entries.push(Entry {
            id: p.id.clone(),
            source: p.source.clone(),
            file,
            channels: p.watermarked.channels(),
            payload,
        });
    }
    let m = Manifest {
        version: 1,
        pairs: entries,
    };
    let path = dir.join(PAIR_MANIFEST);
    let json = serde_json::to_vec_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, json).map_err(|source| Error::Unwritable { path, source })
}

pub fn load_pairs(dir: impl AsRef<Path>) -> Result<Vec<AttackPair>> {
    let dir = dir.as_ref();
    let path = dir.join(PAIR_MANIFEST);
    let bytes = std::fs::read(&path).map_err(|source| Error::Unreadable {
        path: path.clone(),
        source,
    })?;
    let m: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if m.version != 1 {
        return Err(Error::Config(format!(
            "unsupported pair manifest version {}",
            m.version
        )));
    }
    m.pairs
        .into_iter()
        .map(|e| {
            let wm = match e.payload {
                Payload::Bits { hex, len } => Watermark::Bits(BitString::from_hex(&hex, len)?),
                Payload::Image { file, channels } => {
                    Watermark::Image(load_image(dir.join(file), channels)?)
                }
            };
            Ok(AttackPair {
                id: e.id,
                source: e.source,
                watermarked: load_image(dir.join(&e.file), e.channels)?,
                wm,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_bit_watermark, synthetic_image, Seed};

    #[test]
    fn round_trip_quantizes_images_only() {
        let dir = tempfile::tempdir().unwrap();
        let pairs: Vec<AttackPair> = (0..3)
            .map(|i| AttackPair {
                id: format!("img/{i}"),
                source: "t".into(),
                watermarked: synthetic_image((8, 8, 3), Seed(i)).unwrap(),
                wm: if i == 2 {
                    Watermark::Image(synthetic_image((8, 8, 1), Seed(9)).unwrap())
                } else {
                    sample_bit_watermark(13, Seed(i)).unwrap()
                },
            })
            .collect();
        save_pairs(dir.path(), &pairs).unwrap();
        let back = load_pairs(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.watermarked.quantize8(), b.watermarked);
        }
        assert_eq!(back[0].wm, pairs[0].wm);
        assert!(load_pairs(dir.path().join("missing")).is_err());
    }
}
