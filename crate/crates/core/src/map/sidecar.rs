//! Per-image feature sidecar files.
//!
//! ```text
//! magic     6 bytes "OCFEAT"
//! count     u32
//! count x { u f32, v f32, label u16, score f32, descriptor f32 x D }
//! global descriptor f32 x Dg
//! ```
//!
//! The descriptor dimensions are not stored; readers pass them in.

use super::{Keypoint, Label};
use crate::geometry::Pixel;
use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use std::io::{self, Cursor, Read};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 6] = b"OCFEAT";

#[derive(Debug, Error)]
pub enum SidecarError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not a feature file (bad magic)")]
    BadMagic,
    #[error("feature file is truncated")]
    Truncated,
    #[error("feature file has {0} unexpected trailing bytes (wrong descriptor dimensions?)")]
    TrailingBytes(usize),
    #[error("descriptor dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub keypoints: Vec<Keypoint>,
    pub global_descriptor: Vec<f32>,
}

pub fn encode_features(keypoints: &[Keypoint], global_descriptor: &[f32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(keypoints.len() as u32).unwrap();
    for kp in keypoints {
        out.write_f32::<LE>(kp.px.x as f32).unwrap();
        out.write_f32::<LE>(kp.px.y as f32).unwrap();
        out.write_u16::<LE>(kp.semantic_label).unwrap();
        out.write_f32::<LE>(kp.score as f32).unwrap();
        for &d in &kp.descriptor {
            out.write_f32::<LE>(d).unwrap();
        }
    }
    for &d in global_descriptor {
        out.write_f32::<LE>(d).unwrap();
    }
    out
}

pub fn write_features(
    path: impl AsRef<Path>,
    keypoints: &[Keypoint],
    global_descriptor: &[f32],
) -> Result<(), SidecarError> {
    std::fs::write(path, encode_features(keypoints, global_descriptor))?;
    Ok(())
}

pub fn decode_features(bytes: &[u8], local_dim: usize, global_dim: usize) -> Result<Features, SidecarError> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) { SidecarError::Truncated } else { SidecarError::BadMagic });
    }
    if &bytes[..6] != MAGIC {
        return Err(SidecarError::BadMagic);
    }
    let mut r = Cursor::new(&bytes[6..]);
    let parse = |r: &mut Cursor<&[u8]>| -> io::Result<Features> {
        let n = r.read_u32::<LE>()? as usize;
        let per = 4 + 4 + 2 + 4 + 4 * local_dim;
        if n.saturating_mul(per) > r.get_ref().len() {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        let mut keypoints = Vec::with_capacity(n);
        for _ in 0..n {
            let u = r.read_f32::<LE>()?;
            let v = r.read_f32::<LE>()?;
            let semantic_label: Label = r.read_u16::<LE>()?;
            let score = r.read_f32::<LE>()?;
            let descriptor = (0..local_dim).map(|_| r.read_f32::<LE>()).collect::<io::Result<Vec<f32>>>()?;
            keypoints.push(Keypoint {
                px: Pixel::new(u as f64, v as f64),
                descriptor,
                semantic_label,
                score: score as f64,
            });
        }
        let global_descriptor = (0..global_dim).map(|_| r.read_f32::<LE>()).collect::<io::Result<Vec<f32>>>()?;
        Ok(Features { keypoints, global_descriptor })
    };
    let features = parse(&mut r).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            SidecarError::Truncated
        } else {
            SidecarError::Io(e)
        }
    })?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(SidecarError::TrailingBytes(rest.len()));
    }
    Ok(features)
}

pub fn read_features(path: impl AsRef<Path>, local_dim: usize, global_dim: usize) -> Result<Features, SidecarError> {
    decode_features(&std::fs::read(path)?, local_dim, global_dim)
}
