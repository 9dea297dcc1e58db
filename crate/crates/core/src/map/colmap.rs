//! Reader (and writer) for the three-file text export of a sparse SFM model:
//! `cameras.txt`, `images.txt` and `points3D.txt`.
//!
//! Only undistorted models are accepted (`SIMPLE_PINHOLE`, `PINHOLE`). The text
//! export carries no descriptors or semantic labels, so keypoints come back with
//! empty descriptors and label 0; [`attach_features`] fills them in from sidecar
//! files.

use super::sidecar::{read_features, SidecarError};
use super::{ImageRecord, Keypoint, Track, TrackElement};
use crate::geometry::{PinholeCamera, Pixel, Pose};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CAMERAS_FILE: &str = "cameras.txt";
pub const IMAGES_FILE: &str = "images.txt";
pub const POINTS_FILE: &str = "points3D.txt";

#[derive(Debug, Error)]
pub enum ColmapError {
    #[error("missing model file {0}")]
    MissingFile(PathBuf),
    #[error("I/O error reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}:{line}: {message}")]
    Malformed { file: String, line: usize, message: String },
    #[error("unsupported camera model {0} (only SIMPLE_PINHOLE and PINHOLE are accepted)")]
    UnsupportedModel(String),
    #[error("features for image {name:?}: {source}")]
    Features { name: String, source: SidecarError },
    #[error("features for image {name:?} have {got} keypoints, the model lists {expected}")]
    KeypointCount { name: String, expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapModel {
    pub images: Vec<ImageRecord>,
    pub tracks: Vec<Track>,
    /// 3D point id of each track, in file order.
    pub point_ids: Vec<u64>,
}

fn read_file(dir: &Path, name: &str) -> Result<String, ColmapError> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(ColmapError::MissingFile(path));
    }
    std::fs::read_to_string(&path).map_err(|source| ColmapError::Io { path, source })
}

fn malformed(file: &str, line: usize, message: impl Into<String>) -> ColmapError {
    ColmapError::Malformed { file: file.to_string(), line, message: message.into() }
}

fn parse<T: std::str::FromStr>(file: &str, line: usize, what: &str, s: Option<&str>) -> Result<T, ColmapError> {
    let s = s.ok_or_else(|| malformed(file, line, format!("missing {what}")))?;
    s.parse().map_err(|_| malformed(file, line, format!("invalid {what} {s:?}")))
}

/// Non-comment lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.starts_with('#'))
}

fn parse_cameras(text: &str) -> Result<HashMap<u32, PinholeCamera>, ColmapError> {
    let f = CAMERAS_FILE;
    let mut cams = HashMap::new();
    for (ln, line) in content_lines(text).filter(|(_, l)| !l.is_empty()) {
        let mut it = line.split_whitespace();
        let id: u32 = parse(f, ln, "camera id", it.next())?;
        let model = it.next().ok_or_else(|| malformed(f, ln, "missing camera model"))?;
        let width: u32 = parse(f, ln, "width", it.next())?;
        let height: u32 = parse(f, ln, "height", it.next())?;
        let params: Vec<f64> = it.map(|p| parse(f, ln, "camera parameter", Some(p))).collect::<Result<_, _>>()?;
        let cam = match (model, params.as_slice()) {
            ("SIMPLE_PINHOLE", &[fl, cx, cy]) => PinholeCamera { fx: fl, fy: fl, cx, cy, width, height },
            ("PINHOLE", &[fx, fy, cx, cy]) => PinholeCamera { fx, fy, cx, cy, width, height },
            ("SIMPLE_PINHOLE" | "PINHOLE", p) => {
                return Err(malformed(f, ln, format!("{model} with {} parameters", p.len())))
            }
            (other, _) => return Err(ColmapError::UnsupportedModel(other.to_string())),
        };
        if !cam.is_valid() {
            return Err(malformed(f, ln, "invalid intrinsics"));
        }
        if cams.insert(id, cam).is_some() {
            return Err(malformed(f, ln, format!("duplicate camera id {id}")));
        }
    }
    Ok(cams)
}

fn parse_images(text: &str, cams: &HashMap<u32, PinholeCamera>) -> Result<Vec<ImageRecord>, ColmapError> {
    let f = IMAGES_FILE;
    let mut images = Vec::new();
    let mut lines = content_lines(text);
    while let Some((ln, line)) = lines.next() {
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let id: u32 = parse(f, ln, "image id", it.next())?;
        let mut q = [0.0; 4];
        for (k, v) in q.iter_mut().enumerate() {
            *v = parse(f, ln, ["qw", "qx", "qy", "qz"][k], it.next())?;
        }
        let mut t = [0.0; 3];
        for (k, v) in t.iter_mut().enumerate() {
            *v = parse(f, ln, ["tx", "ty", "tz"][k], it.next())?;
        }
        let cam_id: u32 = parse(f, ln, "camera id", it.next())?;
        let name = it.collect::<Vec<_>>().join(" ");
        if name.is_empty() {
            return Err(malformed(f, ln, "missing image name"));
        }
        let camera = *cams.get(&cam_id).ok_or_else(|| malformed(f, ln, format!("unknown camera id {cam_id}")))?;
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(qn > 1e-12) {
            return Err(malformed(f, ln, "zero quaternion"));
        }

        let (pln, points) = lines.next().unwrap_or((ln + 1, ""));
        let vals: Vec<&str> = points.split_whitespace().collect();
        if vals.len() % 3 != 0 {
            return Err(malformed(f, pln, "2D point list is not a multiple of (X, Y, POINT3D_ID)"));
        }
        let mut keypoints = Vec::with_capacity(vals.len() / 3);
        for c in vals.chunks(3) {
            let x: f64 = parse(f, pln, "keypoint x", Some(c[0]))?;
            let y: f64 = parse(f, pln, "keypoint y", Some(c[1]))?;
            let _: i64 = parse(f, pln, "point3D id", Some(c[2]))?;
            keypoints.push(Keypoint { px: Pixel::new(x, y), descriptor: Vec::new(), semantic_label: 0, score: 0.0 });
        }
        images.push(ImageRecord {
            id,
            name,
            camera,
            pose: Pose::from_wxyz(q, t),
            keypoints,
            global_descriptor: Vec::new(),
        });
    }
    Ok(images)
}

fn parse_points(text: &str, images: &[ImageRecord]) -> Result<(Vec<Track>, Vec<u64>), ColmapError> {
    let f = POINTS_FILE;
    let counts: HashMap<u32, usize> = images.iter().map(|im| (im.id, im.keypoints.len())).collect();
    let mut tracks = Vec::new();
    let mut ids = Vec::new();
    for (ln, line) in content_lines(text).filter(|(_, l)| !l.is_empty()) {
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() < 8 || (vals.len() - 8) % 2 != 0 {
            return Err(malformed(f, ln, "expected POINT3D_ID X Y Z R G B ERROR followed by (IMAGE_ID, POINT2D_IDX) pairs"));
        }
        let id: u64 = parse(f, ln, "point id", Some(vals[0]))?;
        for k in 1..4 {
            let _: f64 = parse(f, ln, "coordinate", Some(vals[k]))?;
        }
        let mut color = [0u8; 3];
        for k in 0..3 {
            color[k] = parse(f, ln, "color channel", Some(vals[4 + k]))?;
        }
        let _: f64 = parse(f, ln, "error", Some(vals[7]))?;
        let mut elements = Vec::new();
        for pair in vals[8..].chunks(2) {
            let image_id: u32 = parse(f, ln, "track image id", Some(pair[0]))?;
            let keypoint: u32 = parse(f, ln, "track keypoint index", Some(pair[1]))?;
            let n = *counts
                .get(&image_id)
                .ok_or_else(|| malformed(f, ln, format!("track references unknown image {image_id}")))?;
            if keypoint as usize >= n {
                return Err(malformed(f, ln, format!("keypoint {keypoint} out of range for image {image_id}")));
            }
            elements.push(TrackElement { image_id, keypoint });
        }
        tracks.push(Track { elements, color });
        ids.push(id);
    }
    Ok((tracks, ids))
}

pub fn ingest_colmap_text(dir: impl AsRef<Path>) -> Result<ColmapModel, ColmapError> {
    let dir = dir.as_ref();
    let cameras = read_file(dir, CAMERAS_FILE)?;
    let images = read_file(dir, IMAGES_FILE)?;
    let points = read_file(dir, POINTS_FILE)?;
    let cams = parse_cameras(&cameras)?;
    let images = parse_images(&images, &cams)?;
    let (tracks, point_ids) = parse_points(&points, &images)?;
    Ok(ColmapModel { images, tracks, point_ids })
}

/// Sidecar file name used for an image: its name with `/` flattened, plus `.ocfeat`.
pub fn feature_file_name(image_name: &str) -> String {
    format!("{}.ocfeat", image_name.replace(['/', '\\'], "__"))
}

/// Loads descriptors, labels and scores for every image from `features_dir`.
///
/// Keypoint pixels keep the model's (higher precision) coordinates.
pub fn attach_features(
    images: &mut [ImageRecord],
    features_dir: &Path,
    local_dim: usize,
    global_dim: usize,
) -> Result<(), ColmapError> {
    for im in images.iter_mut() {
        let path = features_dir.join(feature_file_name(&im.name));
        let feats = read_features(&path, local_dim, global_dim)
            .map_err(|source| ColmapError::Features { name: im.name.clone(), source })?;
        if feats.keypoints.len() != im.keypoints.len() {
            return Err(ColmapError::KeypointCount {
                name: im.name.clone(),
                expected: im.keypoints.len(),
                got: feats.keypoints.len(),
            });
        }
        for (kp, f) in im.keypoints.iter_mut().zip(feats.keypoints) {
            kp.descriptor = f.descriptor;
            kp.semantic_label = f.semantic_label;
            kp.score = f.score;
        }
        im.global_descriptor = feats.global_descriptor;
    }
    Ok(())
}

/// Writes images and tracks in the text model layout. Point coordinates come from `points`.
pub fn write_colmap_text(
    dir: impl AsRef<Path>,
    images: &[ImageRecord],
    tracks: &[Track],
    points: &[crate::geometry::Point3],
) -> std::io::Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    // one camera entry per image keeps ids trivially consistent
    let mut cams = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let mut imgs = String::from(
        "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    let mut point_of: HashMap<TrackElement, usize> = HashMap::new();
    for (p, t) in tracks.iter().enumerate() {
        for el in &t.elements {
            point_of.insert(*el, p);
        }
    }
    for im in images {
        let c = &im.camera;
        let _ = writeln!(cams, "{} PINHOLE {} {} {:?} {:?} {:?} {:?}", im.id, c.width, c.height, c.fx, c.fy, c.cx, c.cy);
        let [qw, qx, qy, qz] = im.pose.wxyz();
        let t = im.pose.translation;
        let _ = writeln!(imgs, "{} {qw:?} {qx:?} {qy:?} {qz:?} {:?} {:?} {:?} {} {}", im.id, t.x, t.y, t.z, im.id, im.name);
        let pts: Vec<String> = im
            .keypoints
            .iter()
            .enumerate()
            .map(|(k, kp)| {
                let pid = point_of
                    .get(&TrackElement { image_id: im.id, keypoint: k as u32 })
                    .map_or(-1, |&p| p as i64);
                format!("{:?} {:?} {pid}", kp.px.x, kp.px.y)
            })
            .collect();
        let _ = writeln!(imgs, "{}", pts.join(" "));
    }
    let mut pts = String::from(
        "# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n",
    );
    for (p, (t, x)) in tracks.iter().zip(points).enumerate() {
        let _ = write!(pts, "{p} {:?} {:?} {:?} {} {} {} 0", x.x, x.y, x.z, t.color[0], t.color[1], t.color[2]);
        for el in &t.elements {
            let _ = write!(pts, " {} {}", el.image_id, el.keypoint);
        }
        pts.push('\n');
    }
    std::fs::write(dir.join(CAMERAS_FILE), cams)?;
    std::fs::write(dir.join(IMAGES_FILE), imgs)?;
    std::fs::write(dir.join(POINTS_FILE), pts)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, cameras: &str, images: &str, points: &str) {
        std::fs::write(dir.join(CAMERAS_FILE), cameras).unwrap();
        std::fs::write(dir.join(IMAGES_FILE), images).unwrap();
        std::fs::write(dir.join(POINTS_FILE), points).unwrap();
    }

    const CAMERAS: &str = "# Camera list\n1 PINHOLE 640 480 500 500 320 240\n2 SIMPLE_PINHOLE 800 600 700 400 300\n";
    const IMAGES: &str = "\
# Image list
1 1 0 0 0 0 0 0 1 a.jpg
100 200 1 300 400 -1
2 0.9950041652780258 0 0.09983341664682815 0 -0.5 0 0 1 b.jpg

3 1 0 0 0 1 0 0 2 sub dir/c.jpg
10 20 2
";

    #[test]
    fn rejects_radial_model() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "1 RADIAL 640 480 500 320 240 0.1 0.01\n", "", "");
        match ingest_colmap_text(d.path()) {
            Err(ColmapError::UnsupportedModel(m)) => assert_eq!(m, "RADIAL"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_points_file() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), CAMERAS, IMAGES, "# nothing\n");
        let m = ingest_colmap_text(d.path()).unwrap();
        assert_eq!(m.images.len(), 3);
        assert!(m.tracks.is_empty());
        assert_eq!(m.images[1].keypoints.len(), 0);
        assert_eq!(m.images[2].name, "sub dir/c.jpg");
        assert_eq!(m.images[2].camera.fx, 700.0);
    }

    #[test]
    fn malformed_line_reports_number() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), CAMERAS, IMAGES, "1 0 0 1 255 0 0 0.5 1 0 3\n");
        match ingest_colmap_text(d.path()) {
            Err(ColmapError::Malformed { file, line, .. }) => {
                assert_eq!(file, POINTS_FILE);
                assert_eq!(line, 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_file() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join(CAMERAS_FILE), CAMERAS).unwrap();
        assert!(matches!(ingest_colmap_text(d.path()), Err(ColmapError::MissingFile(_))));
    }
}
