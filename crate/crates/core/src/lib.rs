//! Visual re-localization against a semantic landmark map.
//!
//! A query is first placed by global-descriptor retrieval and feature-match PnP
//! against the retrieved images, then refined against every landmark whose
//! visible field contains the camera.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod descriptor;
pub mod geometry;
pub mod map;
pub mod pipeline;
pub mod pnp;
pub mod refiner;
pub mod retrieval;
pub mod synthetic;

pub use geometry::{PinholeCamera, Pixel, Point3, Pose, Vec3};
pub use map::{ImageRecord, Keypoint, Landmark, LandmarkMap, QueryImage, Track, TrackElement};
pub use pipeline::{Localization, Localizer, LocalizerConfig};
