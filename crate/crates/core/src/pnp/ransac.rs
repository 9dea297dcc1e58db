use super::p3p::solve_p3p;
use super::refine::refine_pose;
use super::{correspondences, Match2D3D, PnpConfig, PnpError, PoseEstimate};
use crate::geometry::{PinholeCamera, Pixel, Point3, Pose, Vec3, MIN_DEPTH};
use crate::map::{Keypoint, LandmarkMap};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MAX_REFINE_PASSES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub pose: Pose,
    /// Indices into the correspondence list, ascending.
    pub inliers: Vec<usize>,
    pub iterations: usize,
}

fn reproj_sq(cam: &PinholeCamera, pose: &Pose, x: &Point3, px: &Pixel) -> Option<f64> {
    cam.project_camera_point(&pose.transform(x)).map(|p| (p - px).norm_squared())
}

/// Correspondences whose reprojection error under `pose` is within `threshold` pixels.
pub fn inlier_indices(pose: &Pose, pixels: &[Pixel], points: &[Point3], cam: &PinholeCamera, threshold: f64) -> Vec<usize> {
    let t2 = threshold * threshold;
    (0..pixels.len())
        .filter(|&i| reproj_sq(cam, pose, &points[i], &pixels[i]).is_some_and(|e| e <= t2))
        .collect()
}

fn required_iterations(inliers: usize, n: usize, confidence: f64, cap: usize) -> usize {
    let w = inliers as f64 / n as f64;
    let p_good = w.powi(4);
    if p_good >= 1.0 - f64::EPSILON {
        return 1;
    }
    if p_good <= 0.0 {
        return cap;
    }
    let k = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if !k.is_finite() {
        return cap;
    }
    (k.ceil() as usize).clamp(1, cap)
}

/// RANSAC over 4-point samples: P3P on three, disambiguation and early rejection
/// on the fourth, then Gauss-Newton on the consensus set.
pub fn solve_pnp_ransac(
    pixels: &[Pixel],
    points: &[Point3],
    cam: &PinholeCamera,
    cfg: &PnpConfig,
) -> Result<Option<RansacOutcome>, PnpError> {
    let n = pixels.len();
    assert_eq!(n, points.len());
    if n < 4 {
        return Err(PnpError::TooFewMatches { needed: 4, got: n });
    }
    let bearings: Vec<Vec3> = pixels.iter().map(|p| cam.bearing(p)).collect();
    let t2 = cfg.inlier_px * cfg.inlier_px;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut best: Option<(Pose, usize)> = None;
    let mut needed = cfg.max_iters.max(1);
    let mut iterations = 0;
    while iterations < needed {
        iterations += 1;
        let idx = sample(&mut rng, n, 4);
        let s = [idx.index(0), idx.index(1), idx.index(2), idx.index(3)];
        let world = [points[s[0]], points[s[1]], points[s[2]]];
        let rays = [bearings[s[0]], bearings[s[1]], bearings[s[2]]];
        for pose in solve_p3p(&world, &rays) {
            if s.iter().any(|&i| pose.transform(&points[i]).z <= MIN_DEPTH) {
                continue;
            }
            if !reproj_sq(cam, &pose, &points[s[3]], &pixels[s[3]]).is_some_and(|e| e <= t2) {
                continue;
            }
            let count = (0..n)
                .filter(|&i| reproj_sq(cam, &pose, &points[i], &pixels[i]).is_some_and(|e| e <= t2))
                .count();
            if best.as_ref().is_none_or(|(_, c)| count > *c) {
                best = Some((pose, count));
                needed = required_iterations(count, n, cfg.confidence, cfg.max_iters.max(1));
            }
        }
    }

    let min_inliers = cfg.min_inliers.max(4);
    let Some((mut pose, count)) = best else {
        return Ok(None);
    };
    if count < min_inliers {
        return Ok(None);
    }
    let mut inliers = inlier_indices(&pose, pixels, points, cam, cfg.inlier_px);
    for _ in 0..MAX_REFINE_PASSES {
        let px: Vec<Pixel> = inliers.iter().map(|&i| pixels[i]).collect();
        let pts: Vec<Point3> = inliers.iter().map(|&i| points[i]).collect();
        let refined = refine_pose(&pose, &px, &pts, cam)?;
        let next = inlier_indices(&refined.pose, pixels, points, cam, cfg.inlier_px);
        // only move if the refined pose keeps at least as much support
        if next.len() < inliers.len() {
            break;
        }
        pose = refined.pose;
        let same = next == inliers;
        inliers = next;
        if same {
            break;
        }
    }
    if inliers.len() < min_inliers {
        return Ok(None);
    }
    Ok(Some(RansacOutcome { pose, inliers, iterations }))
}

/// PnP-RANSAC on 2D-3D matches against a map.
pub fn pnp_ransac(
    matches: &[Match2D3D],
    keypoints: &[Keypoint],
    cam: &PinholeCamera,
    map: &LandmarkMap,
    cfg: &PnpConfig,
) -> Result<Option<PoseEstimate>, PnpError> {
    if matches.len() < 4 {
        return Err(PnpError::TooFewMatches { needed: 4, got: matches.len() });
    }
    let (px, pts) = correspondences(matches, keypoints, map)?;
    Ok(solve_pnp_ransac(&px, &pts, cam, cfg)?.map(|out| PoseEstimate {
        pose: out.pose,
        inliers: out.inliers.iter().map(|&i| matches[i]).collect(),
        num_iterations: out.iterations,
        uncertainty: None,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_error, project};
    use rand::Rng;

    struct Problem {
        cam: PinholeCamera,
        truth: Pose,
        pixels: Vec<Pixel>,
        points: Vec<Point3>,
    }

    fn problem(seed: u64, clean: usize, outliers: usize, cfg: &PnpConfig) -> Problem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = PinholeCamera::new(520.0, 520.0, 320.0, 240.0, 640, 480);
        let eye = Point3::new(rng.random_range(-4.0..4.0), rng.random_range(-2.0..2.0), -10.0);
        let truth = Pose::look_at(&eye, &Point3::origin(), &Vec3::y());
        let mut pixels = Vec::new();
        let mut points = Vec::new();
        while points.len() < clean + outliers {
            let x = Point3::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let Some(p) = project(&cam, &truth, &x).filter(|p| cam.contains(p)) else {
                continue;
            };
            if points.len() < clean {
                pixels.push(p);
            } else {
                // an outlier must land outside the inlier radius of its true projection
                let q = loop {
                    let q = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                    if (q - p).norm() > cfg.inlier_px {
                        break q;
                    }
                };
                pixels.push(q);
            }
            points.push(x);
        }
        Problem { cam, truth, pixels, points }
    }

    #[test]
    fn noiseless_recovers_exactly_with_all_inliers() {
        let cfg = PnpConfig::default();
        let p = problem(0, 50, 0, &cfg);
        let out = solve_pnp_ransac(&p.pixels, &p.points, &p.cam, &cfg).unwrap().unwrap();
        let (t, r) = pose_error(&out.pose, &p.truth);
        assert!(t < 1e-6 && r < 1e-5, "{t} {r}");
        assert_eq!(out.inliers.len(), 50);
    }

    #[test]
    fn rejects_uniform_outliers() {
        let cfg = PnpConfig::default();
        let p = problem(4, 50, 50, &cfg);
        let out = solve_pnp_ransac(&p.pixels, &p.points, &p.cam, &cfg).unwrap().unwrap();
        let (t, _) = pose_error(&out.pose, &p.truth);
        assert!(t < 1e-4);
        assert_eq!(out.inliers, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn seeds_agree_and_runs_repeat() {
        let p = problem(7, 40, 10, &PnpConfig::default());
        let a = solve_pnp_ransac(&p.pixels, &p.points, &p.cam, &PnpConfig { seed: 1, ..Default::default() }).unwrap().unwrap();
        let b = solve_pnp_ransac(&p.pixels, &p.points, &p.cam, &PnpConfig { seed: 2, ..Default::default() }).unwrap().unwrap();
        let a2 = solve_pnp_ransac(&p.pixels, &p.points, &p.cam, &PnpConfig { seed: 1, ..Default::default() }).unwrap().unwrap();
        assert!(pose_error(&a.pose, &b.pose).0 < 1e-6);
        assert_eq!(a, a2);
    }

    #[test]
    fn returned_inliers_satisfy_threshold() {
        let cfg = PnpConfig::default();
        for seed in 0..10 {
            let mut p = problem(seed, 40, 20, &cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for px in p.pixels.iter_mut().take(40) {
                px.x += rng.random_range(-2.0..2.0);
                px.y += rng.random_range(-2.0..2.0);
            }
            let out = solve_pnp_ransac(&p.pixels, &p.points, &p.cam, &cfg).unwrap().unwrap();
            for &i in &out.inliers {
                let e = (project(&p.cam, &out.pose, &p.points[i]).unwrap() - p.pixels[i]).norm();
                assert!(e <= cfg.inlier_px);
            }
        }
    }

    #[test]
    fn too_few_matches_is_an_error() {
        let p = problem(0, 3, 0, &PnpConfig::default());
        assert!(matches!(
            solve_pnp_ransac(&p.pixels, &p.points, &p.cam, &PnpConfig::default()),
            Err(PnpError::TooFewMatches { got: 3, .. })
        ));
    }

    #[test]
    fn adaptive_bound() {
        assert_eq!(required_iterations(10, 10, 0.999, 5000), 1);
        assert_eq!(required_iterations(0, 10, 0.999, 5000), 5000);
        // w = 0.5: ln(0.001)/ln(1 - 1/16) = 107.03
        assert_eq!(required_iterations(5, 10, 0.999, 5000), 108);
    }
}
