//! 2D-2D / 2D-3D matching and absolute pose estimation.

mod matching;
pub mod p3p;
mod ransac;
mod refine;

pub use matching::{match_2d2d, pairwise_sq_distances, passes_ratio, semantic_filter, Match2D3D, MatchConfig};
pub(crate) use matching::two_smallest;
pub use ransac::{inlier_indices, pnp_ransac, solve_pnp_ransac, RansacOutcome};
pub use refine::{refine_pose, refine_pose_nonlinear, reprojection_cost, RefineOutcome};

use crate::geometry::{Pixel, Point3, Pose};
use crate::map::{Keypoint, LandmarkMap};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpConfig {
    /// Reprojection error (pixels) below which a correspondence is an inlier.
    pub inlier_px: f64,
    /// Success probability used for the adaptive iteration bound.
    pub confidence: f64,
    pub max_iters: usize,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for PnpConfig {
    fn default() -> Self {
        Self { inlier_px: 8.0, confidence: 0.999, max_iters: 5000, min_inliers: 12, seed: 0 }
    }
}

/// Spread of sub-sampled poses around an estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Uncertainty {
    /// meters
    pub sigma_t: f64,
    /// degrees
    pub sigma_r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub inliers: Vec<Match2D3D>,
    pub num_iterations: usize,
    pub uncertainty: Option<Uncertainty>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewMatches { needed: usize, got: usize },
    #[error("match references unknown landmark {0}")]
    UnknownLandmark(u64),
    #[error("match references query keypoint {0} out of range")]
    UnknownKeypoint(usize),
}

/// Resolves matches to `(pixel, world point)` pairs.
pub(crate) fn correspondences(
    matches: &[Match2D3D],
    keypoints: &[Keypoint],
    map: &LandmarkMap,
) -> Result<(Vec<Pixel>, Vec<Point3>), PnpError> {
    let mut px = Vec::with_capacity(matches.len());
    let mut pts = Vec::with_capacity(matches.len());
    for m in matches {
        let kp = keypoints.get(m.query_idx).ok_or(PnpError::UnknownKeypoint(m.query_idx))?;
        let lm = map.landmark(m.landmark_id).ok_or(PnpError::UnknownLandmark(m.landmark_id))?;
        px.push(kp.px);
        pts.push(lm.position);
    }
    Ok((px, pts))
}
