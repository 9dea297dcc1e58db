//! Landmark maps carrying per-point observation constraints.
//!
//! A [`LandmarkMap`] is built once from posed database images and their feature
//! tracks and is read-only afterwards; it can be shared across any number of
//! localization workers.

mod build;
pub mod colmap;
mod constraints;
pub mod format;
pub mod sidecar;

pub use build::{build_map, BuildConfig, BuildError, BuildReport};
pub use constraints::{compute_observation_constraints, vote_semantic_label, ConstraintError, ObservationConstraints};

use crate::geometry::{PinholeCamera, Pixel, Point3, Pose, Vec3};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

/// Semantic class id; `0` means unknown.
pub type Label = u16;
pub const UNKNOWN_LABEL: Label = 0;

/// Two labels are compatible when they agree or either one is unknown.
pub fn labels_compatible(a: Label, b: Label) -> bool {
    a == b || a == UNKNOWN_LABEL || b == UNKNOWN_LABEL
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub px: Pixel,
    pub descriptor: Vec<f32>,
    pub semantic_label: Label,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u32,
    pub name: String,
    pub camera: PinholeCamera,
    pub pose: Pose,
    pub keypoints: Vec<Keypoint>,
    pub global_descriptor: Vec<f32>,
}

/// An image to be localized: everything an [`ImageRecord`] has except the pose.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryImage {
    pub name: String,
    pub camera: PinholeCamera,
    pub keypoints: Vec<Keypoint>,
    pub global_descriptor: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrackElement {
    pub image_id: u32,
    pub keypoint: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub elements: Vec<TrackElement>,
    /// RGB color carried through from the reconstruction, if known.
    pub color: [u8; 3],
}

impl Track {
    pub fn new(elements: Vec<TrackElement>) -> Self {
        Self { elements, color: [128, 128, 128] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: u64,
    pub position: Point3,
    pub color: [u8; 3],
    pub semantic_label: Label,
    pub descriptor: Vec<f32>,
    pub track: Track,
    pub constraints: ObservationConstraints,
    pub mean_reproj_err: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("duplicate image id {0}")]
    DuplicateImageId(u32),
    #[error("duplicate image name {0:?}")]
    DuplicateImageName(String),
    #[error("duplicate landmark id {0}")]
    DuplicateLandmarkId(u64),
    #[error("landmark {landmark} references unknown image {image_id}")]
    UnknownImage { landmark: u64, image_id: u32 },
    #[error("landmark {landmark} references keypoint {keypoint} out of range in image {image_id}")]
    KeypointOutOfRange { landmark: u64, image_id: u32, keypoint: u32 },
    #[error("descriptor dimension mismatch: expected {expected}, got {got}")]
    DescriptorDim { expected: usize, got: usize },
}

/// Immutable landmark map with lookup indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkMap {
    images: Vec<ImageRecord>,
    landmarks: Vec<Landmark>,
    local_dim: usize,
    global_dim: usize,
    palette: BTreeMap<Label, String>,
    image_index: HashMap<u32, usize>,
    landmark_index: HashMap<u64, usize>,
    observation_index: HashMap<TrackElement, usize>,
}

impl LandmarkMap {
    pub fn new(
        images: Vec<ImageRecord>,
        landmarks: Vec<Landmark>,
        local_dim: usize,
        global_dim: usize,
        palette: BTreeMap<Label, String>,
    ) -> Result<Self, MapError> {
        let mut image_index = HashMap::with_capacity(images.len());
        let mut names = std::collections::HashSet::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if image_index.insert(img.id, i).is_some() {
                return Err(MapError::DuplicateImageId(img.id));
            }
            if !names.insert(img.name.as_str()) {
                return Err(MapError::DuplicateImageName(img.name.clone()));
            }
            if img.global_descriptor.len() != global_dim {
                return Err(MapError::DescriptorDim { expected: global_dim, got: img.global_descriptor.len() });
            }
            for kp in &img.keypoints {
                if kp.descriptor.len() != local_dim {
                    return Err(MapError::DescriptorDim { expected: local_dim, got: kp.descriptor.len() });
                }
            }
        }
        let mut landmark_index = HashMap::with_capacity(landmarks.len());
        let mut observation_index = HashMap::new();
        for (i, lm) in landmarks.iter().enumerate() {
            if landmark_index.insert(lm.id, i).is_some() {
                return Err(MapError::DuplicateLandmarkId(lm.id));
            }
            if lm.descriptor.len() != local_dim {
                return Err(MapError::DescriptorDim { expected: local_dim, got: lm.descriptor.len() });
            }
            for el in &lm.track.elements {
                let Some(&img) = image_index.get(&el.image_id) else {
                    return Err(MapError::UnknownImage { landmark: lm.id, image_id: el.image_id });
                };
                if el.keypoint as usize >= images[img].keypoints.len() {
                    return Err(MapError::KeypointOutOfRange {
                        landmark: lm.id,
                        image_id: el.image_id,
                        keypoint: el.keypoint,
                    });
                }
                observation_index.insert(*el, i);
            }
        }
        Ok(Self {
            images,
            landmarks,
            local_dim,
            global_dim,
            palette,
            image_index,
            landmark_index,
            observation_index,
        })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn landmarks(&self) -> &[Landmark] {
        &self.landmarks
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    pub fn global_dim(&self) -> usize {
        self.global_dim
    }

    pub fn palette(&self) -> &BTreeMap<Label, String> {
        &self.palette
    }

    pub fn image(&self, id: u32) -> Option<&ImageRecord> {
        self.image_index.get(&id).map(|&i| &self.images[i])
    }

    pub fn landmark(&self, id: u64) -> Option<&Landmark> {
        self.landmark_index.get(&id).map(|&i| &self.landmarks[i])
    }

    pub fn landmark_slot(&self, id: u64) -> Option<usize> {
        self.landmark_index.get(&id).copied()
    }

    /// Landmark observed by keypoint `keypoint` of image `image_id`, if any.
    pub fn landmark_for_observation(&self, image_id: u32, keypoint: u32) -> Option<&Landmark> {
        self.observation_index
            .get(&TrackElement { image_id, keypoint })
            .map(|&i| &self.landmarks[i])
    }
}

/// Unit direction from `from` to `to`.
pub(crate) fn unit_direction(from: &Point3, to: &Point3) -> Vec3 {
    (to - from).normalize()
}
