//! Iterative pose refinement against the whole map. Each round culls landmarks
//! to those whose visible field contains the current camera, matches against
//! them, filters by reprojection, re-solves, and measures the spread of poses
//! solved from random match subsets. A round is kept only if that spread does
//! not grow.

use crate::geometry::{pose_error, safe_acos, PinholeCamera, Pose};
use crate::map::{labels_compatible, Keypoint, LandmarkMap, QueryImage};
use crate::pnp::{
    correspondences, pairwise_sq_distances, passes_ratio, pnp_ransac, refine_pose_nonlinear, solve_pnp_ransac,
    two_smallest, Match2D3D, PnpConfig, PnpError, PoseEstimate, Uncertainty,
};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Pose changes below these count as a fixed point.
const CONVERGED_METERS: f64 = 1e-9;
const CONVERGED_DEGREES: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerConfig {
    /// Reprojection threshold `d` in pixels.
    pub reproj_threshold_px: f64,
    /// Multiplier on the maximum observed distance, >= 1.
    pub distance_slack: f64,
    /// Added to the cone half-angle, radians, >= 0.
    pub angle_slack: f64,
    /// Subsample sizes as percentages of the match count.
    pub mc_fractions: Vec<f64>,
    pub mc_trials: usize,
    pub max_rounds: usize,
    pub ratio: f64,
    pub use_semantic: bool,
    pub pnp: PnpConfig,
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            reproj_threshold_px: 10.0,
            distance_slack: 1.1,
            angle_slack: 0.1,
            mc_fractions: vec![30.0, 50.0, 70.0],
            mc_trials: 10,
            max_rounds: 10,
            ratio: 0.8,
            use_semantic: true,
            pnp: PnpConfig::default(),
            seed: 0,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let bad = |m: &str| Err(RefineError::Config(m.to_string()));
        if !(self.reproj_threshold_px > 0.0) {
            return bad("reproj_threshold_px must be positive");
        }
        if !(self.distance_slack >= 1.0) {
            return bad("distance_slack must be >= 1");
        }
        if !(self.angle_slack >= 0.0) {
            return bad("angle_slack must be >= 0");
        }
        if self.mc_fractions.is_empty() || self.mc_fractions.iter().any(|f| !(*f > 0.0 && *f <= 100.0)) {
            return bad("mc_fractions must be non-empty and within (0, 100]");
        }
        if self.mc_trials == 0 || self.max_rounds == 0 {
            return bad("mc_trials and max_rounds must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("invalid refiner config: {0}")]
    Config(String),
    #[error("no landmark is visible from the current pose")]
    EmptyVisible,
    #[error("need at least {needed} matches, got {got}")]
    TooFewMatches { needed: usize, got: usize },
    #[error("{failed} of {total} subsample solves failed")]
    Unstable { failed: usize, total: usize },
    #[error(transparent)]
    Pnp(#[from] PnpError),
}

/// Landmarks whose visible field admits the camera and that project into the image.
pub fn visible_landmarks(map: &LandmarkMap, pose: &Pose, cam: &PinholeCamera, cfg: &RefinerConfig) -> Vec<u64> {
    let c = pose.center();
    map.landmarks()
        .iter()
        .filter(|lm| {
            let oc = &lm.constraints;
            let offset = c - lm.position;
            let dist = offset.norm();
            if dist > oc.max_distance * cfg.distance_slack {
                return false;
            }
            if !oc.degenerate {
                let cos = if dist > 0.0 { oc.direction.dot(&offset) / dist } else { 1.0 };
                if safe_acos(cos) > oc.max_angle / 2.0 + cfg.angle_slack {
                    return false;
                }
            }
            cam.project_camera_point(&pose.transform(&lm.position)).is_some_and(|p| cam.contains(&p))
        })
        .map(|lm| lm.id)
        .collect()
}

/// 2-NN over the visible landmarks per query keypoint, Lowe ratio test. With
/// `use_semantic` the search only considers label-compatible landmarks.
pub fn match_2d3d_knn(
    keypoints: &[Keypoint],
    visible: &[u64],
    map: &LandmarkMap,
    cfg: &RefinerConfig,
) -> Result<Vec<Match2D3D>, RefineError> {
    if visible.is_empty() {
        return Err(RefineError::EmptyVisible);
    }
    let lms: Vec<_> = visible.iter().filter_map(|id| map.landmark(*id)).collect();
    let descs: Vec<&[f32]> = lms.iter().map(|l| l.descriptor.as_slice()).collect();
    let kps: Vec<&[f32]> = keypoints.iter().map(|k| k.descriptor.as_slice()).collect();
    let d = pairwise_sq_distances(&kps, &descs, map.local_dim());
    let mut out = Vec::new();
    for (i, kp) in keypoints.iter().enumerate() {
        let cands = (0..lms.len())
            .filter(|&j| !cfg.use_semantic || labels_compatible(kp.semantic_label, lms[j].semantic_label))
            .map(|j| (j, d[(i, j)]));
        let Some(((j, d1), second)) = two_smallest(cands) else {
            continue;
        };
        let d1 = (d1 as f64).sqrt();
        let d2 = second.map_or(f64::INFINITY, |(_, v)| (v as f64).sqrt());
        if passes_ratio(d1, d2, cfg.ratio) {
            out.push(Match2D3D { query_idx: i, landmark_id: lms[j].id, distance: d1 });
        }
    }
    Ok(out)
}

/// Keeps matches that reproject within `d` pixels; points behind the camera are dropped.
pub fn filter_reprojection(
    matches: &[Match2D3D],
    keypoints: &[Keypoint],
    pose: &Pose,
    cam: &PinholeCamera,
    map: &LandmarkMap,
    d: f64,
) -> Vec<Match2D3D> {
    matches
        .iter()
        .filter(|m| {
            let Some(lm) = map.landmark(m.landmark_id) else {
                return false;
            };
            cam.project_camera_point(&pose.transform(&lm.position))
                .is_some_and(|p| (p - keypoints[m.query_idx].px).norm() <= d)
        })
        .copied()
        .collect()
}

fn trial_seed(seed: u64, fraction: usize, trial: usize) -> u64 {
    seed ^ (fraction as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (trial as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Sampling uncertainty: RMS camera-center distance and RMS rotation angle
/// between `pose` and poses solved from random match subsets.
pub fn estimate_uncertainty_mc(
    matches: &[Match2D3D],
    keypoints: &[Keypoint],
    pose: &Pose,
    cam: &PinholeCamera,
    map: &LandmarkMap,
    cfg: &RefinerConfig,
) -> Result<Uncertainty, RefineError> {
    if matches.len() < 8 {
        return Err(RefineError::TooFewMatches { needed: 8, got: matches.len() });
    }
    let (px, pts) = correspondences(matches, keypoints, map)?;
    let n = matches.len();
    let jobs: Vec<(usize, usize)> =
        (0..cfg.mc_fractions.len()).flat_map(|f| (0..cfg.mc_trials).map(move |t| (f, t))).collect();
    let results: Vec<Option<(f64, f64)>> = jobs
        .par_iter()
        .map(|&(f, t)| {
            let m = ((cfg.mc_fractions[f] / 100.0 * n as f64).ceil() as usize).clamp(4, n);
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed, f, t));
            let idx = sample(&mut rng, n, m).into_vec();
            let spx: Vec<_> = idx.iter().map(|&i| px[i]).collect();
            let spt: Vec<_> = idx.iter().map(|&i| pts[i]).collect();
            let sub_cfg = PnpConfig {
                min_inliers: cfg.pnp.min_inliers.min((m / 2).max(4)),
                seed: trial_seed(cfg.pnp.seed, f, t),
                ..cfg.pnp
            };
            let sub = solve_pnp_ransac(&spx, &spt, cam, &sub_cfg).ok().flatten()?;
            let (dt, dr) = pose_error(&sub.pose, pose);
            Some((dt * dt, dr * dr))
        })
        .collect();
    let ok: Vec<(f64, f64)> = results.iter().flatten().copied().collect();
    let failed = results.len() - ok.len();
    if ok.is_empty() || 2 * failed > results.len() {
        return Err(RefineError::Unstable { failed, total: results.len() });
    }
    let k = ok.len() as f64;
    Ok(Uncertainty {
        sigma_t: (ok.iter().map(|x| x.0).sum::<f64>() / k).sqrt(),
        sigma_r: (ok.iter().map(|x| x.1).sum::<f64>() / k).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxRounds,
    /// The pose stopped moving.
    Converged,
    /// A round raised one of the uncertainty components.
    UncertaintyIncreased,
    EmptyVisible,
    TooFewMatches,
    PnpFailed,
    Unstable,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::MaxRounds => "max_rounds",
            StopReason::Converged => "converged",
            StopReason::UncertaintyIncreased => "uncertainty_increased",
            StopReason::EmptyVisible => "empty_visible",
            StopReason::TooFewMatches => "too_few_matches",
            StopReason::PnpFailed => "pnp_failed",
            StopReason::Unstable => "unstable",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub estimate: PoseEstimate,
    /// Index of the last accepted round, 0 when none was accepted.
    pub rounds: usize,
    pub stop: StopReason,
    /// Uncertainty of every accepted round, in order.
    pub trace: Vec<Uncertainty>,
}

struct Round {
    estimate: PoseEstimate,
}

fn run_round(current: &Pose, query: &QueryImage, map: &LandmarkMap, cfg: &RefinerConfig) -> Result<Round, StopReason> {
    let cam = &query.camera;
    let visible = visible_landmarks(map, current, cam, cfg);
    let matches = match_2d3d_knn(&query.keypoints, &visible, map, cfg).map_err(|_| StopReason::EmptyVisible)?;
    let filtered = filter_reprojection(&matches, &query.keypoints, current, cam, map, cfg.reproj_threshold_px);
    if filtered.len() < cfg.pnp.min_inliers.max(8) {
        return Err(StopReason::TooFewMatches);
    }
    let mut est = pnp_ransac(&filtered, &query.keypoints, cam, map, &cfg.pnp)
        .ok()
        .flatten()
        .ok_or(StopReason::PnpFailed)?;
    let polished = refine_pose_nonlinear(&est.pose, &est.inliers, &query.keypoints, cam, map)
        .map_err(|_| StopReason::PnpFailed)?;
    est.pose = polished.pose;
    let sigma = estimate_uncertainty_mc(&filtered, &query.keypoints, &est.pose, cam, map, cfg).map_err(|e| match e {
        RefineError::TooFewMatches { .. } => StopReason::TooFewMatches,
        _ => StopReason::Unstable,
    })?;
    est.uncertainty = Some(sigma);
    Ok(Round { estimate: est })
}

/// Observation-constrained refinement loop starting from `initial`.
pub fn refine_iteratively(
    initial: &PoseEstimate,
    query: &QueryImage,
    map: &LandmarkMap,
    cfg: &RefinerConfig,
) -> RefineResult {
    let mut current = initial.clone();
    let mut rounds = 0;
    let mut trace: Vec<Uncertainty> = Vec::new();
    for r in 1..=cfg.max_rounds {
        let round_cfg = RefinerConfig { seed: cfg.seed.wrapping_add(r as u64), ..cfg.clone() };
        let next = match run_round(&current.pose, query, map, &round_cfg) {
            Ok(round) => round.estimate,
            Err(stop) => return RefineResult { estimate: current, rounds, stop, trace },
        };
        let sigma = next.uncertainty.unwrap();
        if let Some(prev) = trace.last() {
            if sigma.sigma_t > prev.sigma_t || sigma.sigma_r > prev.sigma_r {
                return RefineResult { estimate: current, rounds, stop: StopReason::UncertaintyIncreased, trace };
            }
        }
        let (dt, dr) = pose_error(&next.pose, &current.pose);
        current = next;
        rounds = r;
        trace.push(sigma);
        if dt < CONVERGED_METERS && dr < CONVERGED_DEGREES {
            return RefineResult { estimate: current, rounds, stop: StopReason::Converged, trace };
        }
    }
    RefineResult { estimate: current, rounds, stop: StopReason::MaxRounds, trace }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pixel, Point3, Vec3};
    use crate::map::{ImageRecord, Landmark, ObservationConstraints, Track};
    use std::collections::BTreeMap;

    fn landmark(id: u64, pos: Point3, oc: ObservationConstraints, desc: Vec<f32>, label: u16) -> Landmark {
        Landmark {
            id,
            position: pos,
            color: [0; 3],
            semantic_label: label,
            descriptor: desc,
            track: Track::new(Vec::new()),
            constraints: oc,
            mean_reproj_err: 0.0,
        }
    }

    fn map_of(lms: Vec<Landmark>, dim: usize) -> LandmarkMap {
        LandmarkMap::new(Vec::<ImageRecord>::new(), lms, dim, 1, BTreeMap::new()).unwrap()
    }

    fn cam() -> PinholeCamera {
        PinholeCamera::new(500.0, 500.0, 320.0, 240.0, 640, 480)
    }

    #[test]
    fn cone_test_examples() {
        let oc = ObservationConstraints { max_distance: 5.0, direction: Vec3::z(), max_angle: 0.4, degenerate: false };
        let map = map_of(vec![landmark(0, Point3::origin(), oc, vec![1.0], 1)], 1);
        let cfg = RefinerConfig::default();
        let target = Point3::origin();
        // camera on the cone axis at 0.9 L, looking at the landmark
        let near = Pose::look_at(&Point3::new(0.0, 0.0, 4.5), &target, &Vec3::y());
        assert_eq!(visible_landmarks(&map, &near, &cam(), &cfg), vec![0]);
        let far = Pose::look_at(&Point3::new(0.0, 0.0, 7.5), &target, &Vec3::y());
        assert!(visible_landmarks(&map, &far, &cam(), &cfg).is_empty());
        // right place, facing away
        let away = Pose::look_at(&Point3::new(0.0, 0.0, 4.5), &Point3::new(0.0, 0.0, 9.0), &Vec3::y());
        assert!(visible_landmarks(&map, &away, &cam(), &cfg).is_empty());
        // off-axis by more than theta/2 + slack
        let side = Pose::look_at(&Point3::new(3.0, 0.0, 3.0), &target, &Vec3::y());
        assert!(visible_landmarks(&map, &side, &cam(), &cfg).is_empty());
    }

    #[test]
    fn degenerate_cone_passes_any_direction() {
        let oc = ObservationConstraints {
            max_distance: 5.0,
            direction: Vec3::z(),
            max_angle: std::f64::consts::TAU,
            degenerate: true,
        };
        let map = map_of(vec![landmark(0, Point3::origin(), oc, vec![1.0], 1)], 1);
        let side = Pose::look_at(&Point3::new(-3.0, 0.0, -3.0), &Point3::origin(), &Vec3::y());
        assert_eq!(visible_landmarks(&map, &side, &cam(), &RefinerConfig::default()), vec![0]);
    }

    fn kp(d: &[f32], label: u16) -> Keypoint {
        Keypoint { px: Pixel::new(0.0, 0.0), descriptor: d.to_vec(), semantic_label: label, score: 1.0 }
    }

    #[test]
    fn knn_matching_examples() {
        let oc = ObservationConstraints { max_distance: 1.0, direction: Vec3::z(), max_angle: 0.0, degenerate: false };
        let map = map_of(
            vec![
                landmark(10, Point3::origin(), oc, vec![1.0, 0.0], 4),
                landmark(11, Point3::origin(), oc, vec![-1.0, 0.0], 4),
            ],
            2,
        );
        let cfg = RefinerConfig::default();
        let m = match_2d3d_knn(&[kp(&[1.0, 0.0], 4)], &[10, 11], &map, &cfg).unwrap();
        assert_eq!(m, vec![Match2D3D { query_idx: 0, landmark_id: 10, distance: 0.0 }]);
        assert!(match_2d3d_knn(&[kp(&[1.0, 0.0], 9)], &[10, 11], &map, &cfg).unwrap().is_empty());
        assert_eq!(match_2d3d_knn(&[kp(&[1.0, 0.0], 9)], &[], &map, &cfg), Err(RefineError::EmptyVisible));
    }

    #[test]
    fn reprojection_filter_examples() {
        let oc = ObservationConstraints { max_distance: 1.0, direction: Vec3::z(), max_angle: 0.0, degenerate: false };
        // identity pose: the landmark at (0,0,5) projects to the principal point
        let map = map_of(
            vec![
                landmark(0, Point3::new(0.0, 0.0, 5.0), oc, vec![1.0], 1),
                landmark(1, Point3::new(0.0, 0.0, -5.0), oc, vec![1.0], 1),
            ],
            1,
        );
        let kps = [
            Keypoint { px: Pixel::new(325.0, 240.0), ..kp(&[1.0], 1) },
            Keypoint { px: Pixel::new(335.0, 240.0), ..kp(&[1.0], 1) },
            Keypoint { px: Pixel::new(320.0, 240.0), ..kp(&[1.0], 1) },
        ];
        let ms = [
            Match2D3D { query_idx: 0, landmark_id: 0, distance: 0.0 },
            Match2D3D { query_idx: 1, landmark_id: 0, distance: 0.0 },
            Match2D3D { query_idx: 2, landmark_id: 1, distance: 0.0 },
        ];
        let kept = filter_reprojection(&ms, &kps, &Pose::identity(), &cam(), &map, 10.0);
        assert_eq!(kept, vec![ms[0]]);
        assert_eq!(filter_reprojection(&kept, &kps, &Pose::identity(), &cam(), &map, 10.0), kept);
    }

    #[test]
    fn config_validation() {
        assert!(RefinerConfig::default().validate().is_ok());
        assert!(RefinerConfig { distance_slack: 0.9, ..Default::default() }.validate().is_err());
        assert!(RefinerConfig { mc_fractions: vec![0.0], ..Default::default() }.validate().is_err());
        assert!(RefinerConfig { mc_fractions: vec![101.0], ..Default::default() }.validate().is_err());
    }
}
