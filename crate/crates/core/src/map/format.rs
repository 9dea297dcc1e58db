//! Binary map file.
//!
//! Little-endian throughout. Header:
//!
//! ```text
//! magic        6 bytes  "OCMAP1"
//! version      u32
//! local dim    u32
//! global dim   u32
//! images       u64
//! landmarks    u64
//! crc32        u32      (of everything after the header)
//! ```
//!
//! Payload: images, then landmarks, then the label palette. Reals are `f64`
//! except descriptors, which are `f32`. Strings are a `u32` byte length followed
//! by UTF-8.
//!
//! Image: `id u32, name, fx fy cx cy f64, width height u32, qw qx qy qz tx ty tz f64,
//! keypoint count u32, keypoints (u v f64, label u16, score f64, descriptor),
//! global descriptor`.
//!
//! Landmark: `id u64, x y z f64, rgb 3 bytes, label u16, descriptor, track length u32,
//! (image id u32, keypoint u32) per element, max distance f64, direction 3 f64,
//! max angle f64, degenerate u8, mean reprojection error f64`.
//!
//! Palette: `count u32`, then `(label u16, name)` pairs.

use super::{
    ImageRecord, Keypoint, Label, Landmark, LandmarkMap, MapError, ObservationConstraints, Track, TrackElement,
};
use crate::geometry::{PinholeCamera, Pixel, Point3, Pose, Vec3};
use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use std::collections::BTreeMap;
use std::io::{self, Cursor, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 6] = b"OCMAP1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 6 + 4 + 4 + 4 + 8 + 8 + 4;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not a map file (bad magic)")]
    BadMagic,
    #[error("unsupported map format version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checksum mismatch: header says {expected:08x}, payload hashes to {actual:08x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("file is truncated")]
    Truncated,
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid content: {0}")]
    Invalid(String),
    #[error(transparent)]
    Map(#[from] MapError),
}

pub fn encode_map(map: &LandmarkMap) -> Vec<u8> {
    let mut payload = Vec::new();
    write_payload(&mut payload, map).expect("writing to a Vec cannot fail");
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(VERSION).unwrap();
    out.write_u32::<LE>(map.local_dim() as u32).unwrap();
    out.write_u32::<LE>(map.global_dim() as u32).unwrap();
    out.write_u64::<LE>(map.images().len() as u64).unwrap();
    out.write_u64::<LE>(map.landmarks().len() as u64).unwrap();
    out.write_u32::<LE>(crc32fast::hash(&payload)).unwrap();
    out.extend_from_slice(&payload);
    out
}

pub fn save_map(map: &LandmarkMap, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let bytes = encode_map(map);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load_map(path: impl AsRef<Path>) -> Result<LandmarkMap, FormatError> {
    let bytes = std::fs::read(path)?;
    decode_map(&bytes)
}

fn eof_as_truncated(e: io::Error) -> FormatError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        FormatError::Truncated
    } else {
        FormatError::Io(e)
    }
}

pub fn decode_map(bytes: &[u8]) -> Result<LandmarkMap, FormatError> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) { FormatError::Truncated } else { FormatError::BadMagic });
    }
    if &bytes[..6] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let mut r = Cursor::new(&bytes[6..]);
    let header = (|| -> io::Result<_> {
        Ok((
            r.read_u32::<LE>()?,
            r.read_u32::<LE>()? as usize,
            r.read_u32::<LE>()? as usize,
            r.read_u64::<LE>()?,
            r.read_u64::<LE>()?,
            r.read_u32::<LE>()?,
        ))
    })()
    .map_err(eof_as_truncated)?;
    let (version, local_dim, global_dim, n_images, n_landmarks, crc) = header;
    if version != VERSION {
        return Err(FormatError::Version { found: version });
    }
    let payload = &bytes[HEADER_LEN..];
    let mut r = Cursor::new(payload);
    let (images, landmarks, palette) =
        read_payload(&mut r, local_dim, global_dim, n_images, n_landmarks, payload.len()).map_err(eof_as_truncated)?;
    let consumed = r.position() as usize;
    let actual = crc32fast::hash(&payload[..consumed]);
    if actual != crc {
        return Err(FormatError::Checksum { expected: crc, actual });
    }
    if consumed != payload.len() {
        return Err(FormatError::TrailingBytes(payload.len() - consumed));
    }
    let images = images.map_err(FormatError::Invalid)?;
    Ok(LandmarkMap::new(images, landmarks, local_dim, global_dim, palette)?)
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn write_f32s<W: Write>(w: &mut W, v: &[f32]) -> io::Result<()> {
    for &x in v {
        w.write_f32::<LE>(x)?;
    }
    Ok(())
}

fn write_payload<W: Write>(w: &mut W, map: &LandmarkMap) -> io::Result<()> {
    for im in map.images() {
        w.write_u32::<LE>(im.id)?;
        write_str(w, &im.name)?;
        let c = &im.camera;
        for v in [c.fx, c.fy, c.cx, c.cy] {
            w.write_f64::<LE>(v)?;
        }
        w.write_u32::<LE>(c.width)?;
        w.write_u32::<LE>(c.height)?;
        for v in im.pose.wxyz() {
            w.write_f64::<LE>(v)?;
        }
        for v in im.pose.translation.iter() {
            w.write_f64::<LE>(*v)?;
        }
        w.write_u32::<LE>(im.keypoints.len() as u32)?;
        for kp in &im.keypoints {
            w.write_f64::<LE>(kp.px.x)?;
            w.write_f64::<LE>(kp.px.y)?;
            w.write_u16::<LE>(kp.semantic_label)?;
            w.write_f64::<LE>(kp.score)?;
            write_f32s(w, &kp.descriptor)?;
        }
        write_f32s(w, &im.global_descriptor)?;
    }
    for lm in map.landmarks() {
        w.write_u64::<LE>(lm.id)?;
        for v in lm.position.iter() {
            w.write_f64::<LE>(*v)?;
        }
        w.write_all(&lm.color)?;
        w.write_u16::<LE>(lm.semantic_label)?;
        write_f32s(w, &lm.descriptor)?;
        w.write_u32::<LE>(lm.track.elements.len() as u32)?;
        for el in &lm.track.elements {
            w.write_u32::<LE>(el.image_id)?;
            w.write_u32::<LE>(el.keypoint)?;
        }
        let oc = &lm.constraints;
        w.write_f64::<LE>(oc.max_distance)?;
        for v in oc.direction.iter() {
            w.write_f64::<LE>(*v)?;
        }
        w.write_f64::<LE>(oc.max_angle)?;
        w.write_u8(oc.degenerate as u8)?;
        w.write_f64::<LE>(lm.mean_reproj_err)?;
    }
    w.write_u32::<LE>(map.palette().len() as u32)?;
    for (label, name) in map.palette() {
        w.write_u16::<LE>(*label)?;
        write_str(w, name)?;
    }
    Ok(())
}

fn read_str<R: Read>(r: &mut R, remaining: usize) -> io::Result<Result<String, String>> {
    let n = r.read_u32::<LE>()? as usize;
    if n > remaining {
        return Err(io::ErrorKind::UnexpectedEof.into());
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(String::from_utf8(buf).map_err(|e| format!("string is not UTF-8: {e}")))
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f32>> {
    (0..n).map(|_| r.read_f32::<LE>()).collect()
}

fn read_f64_array<R: Read, const N: usize>(r: &mut R) -> io::Result<[f64; N]> {
    let mut out = [0.0; N];
    for v in out.iter_mut() {
        *v = r.read_f64::<LE>()?;
    }
    Ok(out)
}

type Payload = (Result<Vec<ImageRecord>, String>, Vec<Landmark>, BTreeMap<Label, String>);

fn read_payload(
    r: &mut Cursor<&[u8]>,
    local_dim: usize,
    global_dim: usize,
    n_images: u64,
    n_landmarks: u64,
    len: usize,
) -> io::Result<Payload> {
    let remaining = |r: &Cursor<&[u8]>| len.saturating_sub(r.position() as usize);
    let mut images = Vec::new();
    let mut bad: Option<String> = None;
    for _ in 0..n_images {
        let id = r.read_u32::<LE>()?;
        let name = match read_str(r, remaining(r))? {
            Ok(s) => s,
            Err(e) => {
                bad.get_or_insert(e);
                String::new()
            }
        };
        let [fx, fy, cx, cy] = read_f64_array::<_, 4>(r)?;
        let width = r.read_u32::<LE>()?;
        let height = r.read_u32::<LE>()?;
        let q = read_f64_array::<_, 4>(r)?;
        let t = read_f64_array::<_, 3>(r)?;
        let n_kp = r.read_u32::<LE>()? as usize;
        if n_kp.saturating_mul(8 + 8 + 2 + 8 + 4 * local_dim) > remaining(r) {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        let mut keypoints = Vec::with_capacity(n_kp);
        for _ in 0..n_kp {
            let u = r.read_f64::<LE>()?;
            let v = r.read_f64::<LE>()?;
            let semantic_label = r.read_u16::<LE>()?;
            let score = r.read_f64::<LE>()?;
            let descriptor = read_f32s(r, local_dim)?;
            keypoints.push(Keypoint { px: Pixel::new(u, v), descriptor, semantic_label, score });
        }
        let global_descriptor = read_f32s(r, global_dim)?;
        images.push(ImageRecord {
            id,
            name,
            camera: PinholeCamera { fx, fy, cx, cy, width, height },
            pose: Pose::from_wxyz_unchecked(q, t),
            keypoints,
            global_descriptor,
        });
    }
    let mut landmarks = Vec::new();
    for _ in 0..n_landmarks {
        let id = r.read_u64::<LE>()?;
        let [x, y, z] = read_f64_array::<_, 3>(r)?;
        let mut color = [0u8; 3];
        r.read_exact(&mut color)?;
        let semantic_label = r.read_u16::<LE>()?;
        let descriptor = read_f32s(r, local_dim)?;
        let n_el = r.read_u32::<LE>()? as usize;
        if n_el.saturating_mul(8) > remaining(r) {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        let mut elements = Vec::with_capacity(n_el);
        for _ in 0..n_el {
            elements.push(TrackElement { image_id: r.read_u32::<LE>()?, keypoint: r.read_u32::<LE>()? });
        }
        let max_distance = r.read_f64::<LE>()?;
        let [dx, dy, dz] = read_f64_array::<_, 3>(r)?;
        let max_angle = r.read_f64::<LE>()?;
        let degenerate = r.read_u8()? != 0;
        let mean_reproj_err = r.read_f64::<LE>()?;
        landmarks.push(Landmark {
            id,
            position: Point3::new(x, y, z),
            color,
            semantic_label,
            descriptor,
            track: Track { elements, color },
            constraints: ObservationConstraints {
                max_distance,
                direction: Vec3::new(dx, dy, dz),
                max_angle,
                degenerate,
            },
            mean_reproj_err,
        });
    }
    let n_pal = r.read_u32::<LE>()?;
    let mut palette = BTreeMap::new();
    for _ in 0..n_pal {
        let label = r.read_u16::<LE>()?;
        match read_str(r, remaining(r))? {
            Ok(name) => {
                palette.insert(label, name);
            }
            Err(e) => {
                bad.get_or_insert(e);
            }
        }
    }
    let images = match bad {
        Some(e) => Err(e),
        None => Ok(images),
    };
    Ok((images, landmarks, palette))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_map() -> LandmarkMap {
        let camera = PinholeCamera::new(500.0, 510.0, 320.5, 239.5, 640, 480);
        let kp = |u: f64, l: Label| Keypoint {
            px: Pixel::new(u, 10.25),
            descriptor: vec![0.6, 0.8],
            semantic_label: l,
            score: 0.5,
        };
        let images = vec![
            ImageRecord {
                id: 3,
                name: "a/b.jpg".into(),
                camera,
                pose: Pose::from_wxyz([0.9, 0.1, -0.3, 0.2], [1.0, 2.0, 3.0]),
                keypoints: vec![kp(1.5, 2), kp(7.0, 0)],
                global_descriptor: vec![0.1, 0.2, 0.3],
            },
            ImageRecord {
                id: 7,
                name: "ü.png".into(),
                camera,
                pose: Pose::identity(),
                keypoints: vec![kp(3.0, 2)],
                global_descriptor: vec![0.0, -1.0, 0.5],
            },
        ];
        let elements = vec![TrackElement { image_id: 3, keypoint: 0 }, TrackElement { image_id: 7, keypoint: 0 }];
        let landmarks = vec![Landmark {
            id: 42,
            position: Point3::new(0.1, -0.2, 5.0),
            color: [1, 2, 3],
            semantic_label: 2,
            descriptor: vec![1.0, 0.0],
            track: Track { elements, color: [1, 2, 3] },
            constraints: ObservationConstraints {
                max_distance: 5.5,
                direction: Vec3::new(0.0, 0.6, 0.8),
                max_angle: 0.3,
                degenerate: false,
            },
            mean_reproj_err: 0.125,
        }];
        let palette = BTreeMap::from([(2, "building".to_string())]);
        LandmarkMap::new(images, landmarks, 2, 3, palette).unwrap()
    }

    #[test]
    fn round_trip() {
        let m = tiny_map();
        let bytes = encode_map(&m);
        assert_eq!(decode_map(&bytes).unwrap(), m);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_map(&tiny_map());
        bytes[0] = b'X';
        assert!(matches!(decode_map(&bytes), Err(FormatError::BadMagic)));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_map(&tiny_map());
        bytes[6] = 9;
        assert!(matches!(decode_map(&bytes), Err(FormatError::Version { found: 9 })));
    }

    #[test]
    fn checksum_failure() {
        let mut bytes = encode_map(&tiny_map());
        let n = bytes.len();
        bytes[n - 20] ^= 0x55;
        assert!(matches!(decode_map(&bytes), Err(FormatError::Checksum { .. })));
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = encode_map(&tiny_map());
        for cut in 0..bytes.len() {
            match decode_map(&bytes[..cut]) {
                Err(FormatError::Truncated) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }
}
