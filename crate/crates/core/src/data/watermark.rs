use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Image, Seed};
use crate::error::{Error, Result};

/// Payload carried by a watermarked image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Watermark {
    Bits(BitString),
    Image(Image),
}

/// Non-empty vector of bits.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct BitString(Vec<bool>);

impl BitString {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidArgument(
                "bit string must be non-empty".into(),
            ));
        }
        Ok(Self(bits))
    }

    /// From 0/1 values; anything else is rejected.
    pub fn from_u8(bits: &[u8]) -> Result<Self> {
        let v = bits
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::InvalidArgument(format!(
                    "bit value {other} is not 0 or 1"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn as_u8(&self) -> Vec<u8> {
        self.0.iter().map(|&b| b as u8).collect()
    }

    /// First `n` bits (or all of them when shorter).
    pub fn truncated(&self, n: usize) -> Self {
        Self(self.0[..n.min(self.0.len())].to_vec())
    }

    /// Pack MSB-first into bytes, hex encoded. The length is not encoded.
    pub fn to_hex(&self) -> String {
        let mut bytes = vec![0u8; self.0.len().div_ceil(8)];
        for (i, &b) in self.0.iter().enumerate() {
            if b {
                bytes[i / 8] |= 0x80 >> (i % 8);
            }
        }
        hex::encode(bytes)
    }

    pub fn from_hex(s: &str, len: usize) -> Result<Self> {
        let bytes =
            hex::decode(s).map_err(|e| Error::InvalidArgument(format!("bad hex {s:?}: {e}")))?;
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::InvalidArgument(format!(
                "hex {s:?} does not hold exactly {len} bits"
            )));
        }
        Self::new(
            (0..len)
                .map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0)
                .collect(),
        )
    }
}

impl TryFrom<Vec<u8>> for BitString {
    type Error = Error;
    fn try_from(v: Vec<u8>) -> Result<Self> {
        Self::from_u8(&v)
    }
}

impl From<BitString> for Vec<u8> {
    fn from(b: BitString) -> Self {
        b.as_u8()
    }
}

impl Watermark {
    pub fn bits(&self) -> Option<&BitString> {
        match self {
            Watermark::Bits(b) => Some(b),
            Watermark::Image(_) => None,
        }
    }

    pub fn image(&self) -> Option<&Image> {
        match self {
            Watermark::Image(im) => Some(im),
            Watermark::Bits(_) => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Watermark::Bits(_) => "bits",
            Watermark::Image(_) => "image",
        }
    }

    /// Flattened real-valued target: bits as 0/1, images as their pixels in
    /// NCHW order.
    pub fn target_values(&self) -> Vec<f64> {
        match self {
            Watermark::Bits(b) => b.bits().iter().map(|&x| x as u8 as f64).collect(),
            Watermark::Image(im) => im.to_tensor::<f64>().into_vec(),
        }
    }
}

/// `n` i.i.d. uniform bits from the seeded generator.
pub fn sample_bit_watermark(n: usize, seed: Seed) -> Result<Watermark> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "watermark length must be at least 1".into(),
        ));
    }
    let mut rng = seed.rng();
    Ok(Watermark::Bits(BitString::new(
        (0..n).map(|_| rng.random::<bool>()).collect(),
    )?))
}
