//! Versioned binary container for trained networks.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "DLOVECKP"
//! version  u32
//! hlen     u64      length of the JSON header
//! header   hlen bytes of UTF-8 JSON
//! tensors  f32 values, concatenated in header order
//! sha256   32 bytes over everything before it
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::nets::{ArchConfig, Decoder};
use super::pipeline::Pipeline;
use super::profile::TechniqueProfile;
use super::train::TrainConfig;
use crate::data::Seed;
use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"DLOVECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    net: String,
    name: String,
    shape: [usize; 4],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    profile: TechniqueProfile,
    arch: ArchConfig,
    pyramid_seed: u64,
    train_config: Option<TrainConfig>,
    #[serde(default)]
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn entries<'a>(net: &str, ps: &'a ParamSet<f32>, out: &mut Vec<(TensorEntry, &'a Tensor<f32>)>) {
    for (name, t) in ps.iter() {
        out.push((
            TensorEntry {
                net: net.into(),
                name: name.into(),
                shape: t.shape(),
            },
            t,
        ));
    }
}

fn write_container(path: &Path, header: &Header, tensors: &[&Tensor<f32>]) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf =
        Vec::with_capacity(json.len() + 64 + tensors.iter().map(|t| 4 * t.len()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|source| Error::Unwritable {
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    std::fs::write(path, buf).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

fn read_container(path: &Path) -> Result<(Header, Vec<Tensor<f32>>)> {
    let buf = std::fs::read(path).map_err(|source| Error::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if buf.len() < 8 + 4 + 8 + 32 || &buf[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let hend = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&body[20..hend]).map_err(|e| bad(&e.to_string()))?;
    let mut rest = &body[hend..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if rest.len() < 4 * n {
            return Err(bad("truncated tensor data"));
        }
        let data = rest[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::from_vec(e.shape, data));
        rest = &rest[4 * n..];
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok((header, tensors))
}

fn restore(
    net: &str,
    ps: &mut ParamSet<f32>,
    header: &Header,
    tensors: &[Tensor<f32>],
) -> Result<()> {
    let found: Vec<(&TensorEntry, &Tensor<f32>)> = header
        .tensors
        .iter()
        .zip(tensors)
        .filter(|(e, _)| e.net == net)
        .collect();
    if found.len() != ps.len() {
        return Err(Error::Checkpoint(format!(
            "{net}: checkpoint holds {} tensors, architecture has {}",
            found.len(),
            ps.len()
        )));
    }
    for (i, (e, t)) in found.into_iter().enumerate() {
        if e.name != ps.name(i) || t.shape() != ps.tensor(i).shape() {
            return Err(Error::Checkpoint(format!(
                "{net}: tensor {} {:?} does not match {} {:?}",
                e.name,
                t.shape(),
                ps.name(i),
                ps.tensor(i).shape()
            )));
        }
        *ps.tensor_mut(i) = t.clone();
    }
    Ok(())
}

pub fn save_pipeline(p: &Pipeline, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
    let mut list = Vec::new();
    entries("encoder", &p.encoder.params, &mut list);
    entries("decoder", &p.decoder.params, &mut list);
    if let Some(d) = &p.discriminator {
        entries("discriminator", &d.params, &mut list);
    }
    let header = Header {
        kind: "pipeline".into(),
        profile: p.profile.clone(),
        arch: p.arch,
        pyramid_seed: p.arch.pyramid_seed,
        train_config: p.train_config.clone(),
        extra,
        tensors: list.iter().map(|(e, _)| e.clone()).collect(),
    };
    let ts: Vec<&Tensor<f32>> = list.iter().map(|(_, t)| *t).collect();
    write_container(path.as_ref(), &header, &ts)
}

/// Load a pipeline and the free-form `extra` metadata stored with it.
pub fn load_pipeline(path: impl AsRef<Path>) -> Result<(Pipeline, serde_json::Value)> {
    let (header, tensors) = read_container(path.as_ref())?;
    if header.kind != "pipeline" {
        return Err(Error::Checkpoint(format!(
            "expected a pipeline checkpoint, found {}",
            header.kind
        )));
    }
    let mut p = Pipeline::new(&header.profile, header.arch, Seed(0))?;
    if !header.tensors.iter().any(|e| e.net == "discriminator") {
        p.discriminator = None;
    }
    restore("encoder", &mut p.encoder.params, &header, &tensors)?;
    restore("decoder", &mut p.decoder.params, &header, &tensors)?;
    if let Some(d) = p.discriminator.as_mut() {
        restore("discriminator", &mut d.params, &header, &tensors)?;
    }
    p.train_config = header.train_config;
    Ok((p, header.extra))
}

/// Standalone decoder checkpoint; `profile` records its input and
/// watermark layout.
pub fn save_decoder(
    dec: &Decoder<f32>,
    profile: &TechniqueProfile,
    arch: &ArchConfig,
    path: impl AsRef<Path>,
    extra: serde_json::Value,
) -> Result<()> {
    let mut list = Vec::new();
    entries("decoder", &dec.params, &mut list);
    let header = Header {
        kind: "decoder".into(),
        profile: profile.clone(),
        arch: *arch,
        pyramid_seed: arch.pyramid_seed,
        train_config: None,
        extra,
        tensors: list.iter().map(|(e, _)| e.clone()).collect(),
    };
    let ts: Vec<&Tensor<f32>> = list.iter().map(|(_, t)| *t).collect();
    write_container(path.as_ref(), &header, &ts)
}

pub fn load_decoder(
    path: impl AsRef<Path>,
) -> Result<(
    Decoder<f32>,
    TechniqueProfile,
    ArchConfig,
    serde_json::Value,
)> {
    let (header, tensors) = read_container(path.as_ref())?;
    if header.kind != "decoder" {
        return Err(Error::Checkpoint(format!(
            "expected a decoder checkpoint, found {}",
            header.kind
        )));
    }
    let mut dec = Decoder::new(
        header.profile.cover_shape,
        header.profile.watermark,
        &header.arch,
        Seed(0),
    )?;
    restore("decoder", &mut dec.params, &header, &tensors)?;
    Ok((dec, header.profile, header.arch, header.extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wmnet::build_pipeline;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let p = build_pipeline(&TechniqueProfile::hidden_like(), Seed(3)).unwrap();
        save_pipeline(&p, &path, serde_json::json!({"note": 1})).unwrap();
        let (q, extra) = load_pipeline(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(extra["note"], 1);

        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_pipeline(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, b"nonsense").unwrap();
        assert!(load_pipeline(&path).is_err());
    }

    #[test]
    fn decoder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let p = build_pipeline(&TechniqueProfile::redmark_like(), Seed(3)).unwrap();
        save_decoder(
            &p.decoder,
            &p.profile,
            &p.arch,
            &path,
            serde_json::Value::Null,
        )
        .unwrap();
        let (d, prof, _, _) = load_decoder(&path).unwrap();
        assert_eq!(d, p.decoder);
        assert_eq!(prof, p.profile);
        assert!(load_pipeline(&path).is_err());
    }
}
