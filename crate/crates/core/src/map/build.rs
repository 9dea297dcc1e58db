use super::{
    compute_observation_constraints, vote_semantic_label, ImageRecord, Label, Landmark, LandmarkMap, MapError, Track,
};
use crate::descriptor::l2_normalize_f32;
use crate::geometry::{reprojection_error, triangulate, GeometryError, View};
use rayon::prelude::*;
use std::collections::{BTreeMap, HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildConfig {
    /// Tracks whose mean reprojection error exceeds this many pixels are dropped.
    pub max_reproj_px: f64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self { max_reproj_px: 4.0 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuildError {
    #[error("track {track} references unknown image {image_id}")]
    UnknownImage { track: usize, image_id: u32 },
    #[error("track {track} references keypoint {keypoint} beyond the {count} keypoints of image {image_id}")]
    KeypointOutOfRange { track: usize, image_id: u32, keypoint: u32, count: usize },
    #[error("track {track} lists image {image_id} more than once")]
    RepeatedImage { track: usize, image_id: u32 },
    #[error("no landmark survived triangulation ({0} tracks dropped)")]
    EmptyMap(usize),
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Counts reported after a build.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildReport {
    pub kept: usize,
    pub dropped_too_short: usize,
    pub dropped_degenerate: usize,
    pub dropped_cheirality: usize,
    pub dropped_reprojection: usize,
    pub mean_reproj_err: f64,
}

impl BuildReport {
    pub fn dropped(&self) -> usize {
        self.dropped_too_short + self.dropped_degenerate + self.dropped_cheirality + self.dropped_reprojection
    }
}

enum Outcome {
    Kept(Landmark),
    TooShort,
    Degenerate,
    Cheirality,
    Reprojection,
}

/// Triangulates every track, filters it, and attaches observation constraints.
///
/// Landmark ids are the indices of their source tracks, so callers can line
/// surviving landmarks up with the input.
pub fn build_map(
    images: Vec<ImageRecord>,
    tracks: &[Track],
    palette: BTreeMap<Label, String>,
    cfg: &BuildConfig,
) -> Result<(LandmarkMap, BuildReport), BuildError> {
    let index: HashMap<u32, usize> = images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
    for (t, track) in tracks.iter().enumerate() {
        let mut seen = HashSet::new();
        for el in &track.elements {
            let Some(&i) = index.get(&el.image_id) else {
                return Err(BuildError::UnknownImage { track: t, image_id: el.image_id });
            };
            let count = images[i].keypoints.len();
            if el.keypoint as usize >= count {
                return Err(BuildError::KeypointOutOfRange {
                    track: t,
                    image_id: el.image_id,
                    keypoint: el.keypoint,
                    count,
                });
            }
            if !seen.insert(el.image_id) {
                return Err(BuildError::RepeatedImage { track: t, image_id: el.image_id });
            }
        }
    }
    let local_dim = images.first().and_then(|im| im.keypoints.first()).map_or(0, |k| k.descriptor.len());
    let global_dim = images.first().map_or(0, |im| im.global_descriptor.len());

    let outcomes: Vec<Outcome> = tracks
        .par_iter()
        .enumerate()
        .map(|(t, track)| build_landmark(t as u64, track, &images, &index, local_dim, cfg))
        .collect();

    let mut report = BuildReport::default();
    let mut landmarks = Vec::new();
    let mut err_sum = 0.0;
    for o in outcomes {
        match o {
            Outcome::Kept(lm) => {
                err_sum += lm.mean_reproj_err;
                landmarks.push(lm);
            }
            Outcome::TooShort => report.dropped_too_short += 1,
            Outcome::Degenerate => report.dropped_degenerate += 1,
            Outcome::Cheirality => report.dropped_cheirality += 1,
            Outcome::Reprojection => report.dropped_reprojection += 1,
        }
    }
    report.kept = landmarks.len();
    if landmarks.is_empty() {
        return Err(BuildError::EmptyMap(report.dropped()));
    }
    report.mean_reproj_err = err_sum / landmarks.len() as f64;
    let map = LandmarkMap::new(images, landmarks, local_dim, global_dim, palette)?;
    Ok((map, report))
}

fn build_landmark(
    id: u64,
    track: &Track,
    images: &[ImageRecord],
    index: &HashMap<u32, usize>,
    local_dim: usize,
    cfg: &BuildConfig,
) -> Outcome {
    if track.elements.len() < 2 {
        return Outcome::TooShort;
    }
    let obs: Vec<(&ImageRecord, usize)> = track
        .elements
        .iter()
        .map(|el| (&images[index[&el.image_id]], el.keypoint as usize))
        .collect();
    let views: Vec<View> = obs
        .iter()
        .map(|(im, k)| View { camera: &im.camera, pose: &im.pose, pixel: im.keypoints[*k].px })
        .collect();
    let position = match triangulate(&views) {
        Ok(p) => p,
        Err(GeometryError::Cheirality(_)) => return Outcome::Cheirality,
        Err(_) => return Outcome::Degenerate,
    };
    let mut err_sum = 0.0;
    for v in &views {
        match reprojection_error(v.camera, v.pose, &position, &v.pixel) {
            Ok(e) => err_sum += e,
            Err(_) => return Outcome::Cheirality,
        }
    }
    let mean_reproj_err = err_sum / views.len() as f64;
    if mean_reproj_err > cfg.max_reproj_px {
        return Outcome::Reprojection;
    }

    let mut acc = vec![0.0_f64; local_dim];
    for (im, k) in &obs {
        for (a, d) in acc.iter_mut().zip(&im.keypoints[*k].descriptor) {
            *a += *d as f64;
        }
    }
    let mut descriptor: Vec<f32> = acc.iter().map(|a| (a / obs.len() as f64) as f32).collect();
    if l2_normalize_f32(&mut descriptor).is_err() {
        descriptor.iter_mut().for_each(|d| *d = 0.0);
    }
    let labels: Vec<Label> = obs.iter().map(|(im, k)| im.keypoints[*k].semantic_label).collect();
    let centers: Vec<_> = obs.iter().map(|(im, _)| im.pose.center()).collect();
    let Ok(constraints) = compute_observation_constraints(&position, &centers) else {
        return Outcome::Degenerate;
    };
    Outcome::Kept(Landmark {
        id,
        position,
        color: track.color,
        semantic_label: vote_semantic_label(&labels),
        descriptor,
        track: track.clone(),
        constraints,
        mean_reproj_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, PinholeCamera, Point3, Pose, Vec3};
    use crate::map::{Keypoint, TrackElement};

    fn image(id: u32, pose: Pose, pts: &[Point3], labels: &[Label]) -> ImageRecord {
        let camera = PinholeCamera::new(500.0, 500.0, 320.0, 240.0, 640, 480);
        ImageRecord {
            id,
            name: format!("img{id}"),
            camera,
            pose,
            keypoints: pts
                .iter()
                .zip(labels)
                .map(|(p, &l)| Keypoint {
                    px: project(&camera, &pose, p).unwrap(),
                    descriptor: vec![1.0, 0.0],
                    semantic_label: l,
                    score: 1.0,
                })
                .collect(),
            global_descriptor: vec![1.0],
        }
    }

    #[test]
    fn builds_and_drops_degenerate() {
        let pts = [Point3::new(0.0, 0.0, 0.0), Point3::new(0.5, -0.3, 0.2)];
        let p0 = Pose::look_at(&Point3::new(0.0, 0.0, -6.0), &Point3::origin(), &Vec3::y());
        let p1 = Pose::look_at(&Point3::new(2.0, 0.0, -6.0), &Point3::origin(), &Vec3::y());
        let images = vec![
            image(0, p0, &pts, &[3, 0]),
            image(1, p1, &pts, &[3, 4]),
            image(2, p0, &pts, &[1, 4]),
        ];
        let el = |i, k| TrackElement { image_id: i, keypoint: k };
        let tracks = vec![
            Track::new(vec![el(0, 0), el(1, 0), el(2, 0)]),
            Track::new(vec![el(0, 1), el(2, 1)]),
            Track::new(vec![el(1, 1), el(0, 1)]),
        ];
        let (map, report) = build_map(images, &tracks, BTreeMap::new(), &BuildConfig::default()).unwrap();
        assert_eq!(report.kept, 2);
        assert_eq!(report.dropped_degenerate, 1);
        let lm0 = map.landmark(0).unwrap();
        assert!((lm0.position - pts[0]).norm() < 1e-6);
        assert_eq!(lm0.semantic_label, 3);
        assert_eq!(map.landmark(2).unwrap().semantic_label, 4);
        assert!(map.landmark(1).is_none());
        assert_eq!(map.landmark_for_observation(1, 1).unwrap().id, 2);
    }

    #[test]
    fn bad_reference_is_an_error() {
        let p0 = Pose::identity();
        let images = vec![image(0, p0, &[Point3::new(0.0, 0.0, 4.0)], &[0])];
        let tracks = vec![Track::new(vec![
            TrackElement { image_id: 0, keypoint: 0 },
            TrackElement { image_id: 9, keypoint: 0 },
        ])];
        assert!(matches!(
            build_map(images.clone(), &tracks, BTreeMap::new(), &BuildConfig::default()),
            Err(BuildError::UnknownImage { image_id: 9, .. })
        ));
        let tracks = vec![Track::new(vec![TrackElement { image_id: 0, keypoint: 5 }])];
        assert!(matches!(
            build_map(images, &tracks, BTreeMap::new(), &BuildConfig::default()),
            Err(BuildError::KeypointOutOfRange { .. })
        ));
    }

    #[test]
    fn all_dropped_is_empty_map() {
        let p0 = Pose::identity();
        let images = vec![image(0, p0, &[Point3::new(0.0, 0.0, 4.0)], &[0]), image(1, p0, &[Point3::new(0.0, 0.0, 4.0)], &[0])];
        let tracks = vec![Track::new(vec![
            TrackElement { image_id: 0, keypoint: 0 },
            TrackElement { image_id: 1, keypoint: 0 },
        ])];
        assert_eq!(
            build_map(images, &tracks, BTreeMap::new(), &BuildConfig::default()),
            Err(BuildError::EmptyMap(1))
        );
    }
}
