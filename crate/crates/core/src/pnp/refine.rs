use super::{correspondences, Match2D3D, PnpError};
use crate::geometry::{PinholeCamera, Pixel, Point3, Pose, Vec3, MIN_DEPTH};
use crate::map::{Keypoint, LandmarkMap};
use nalgebra::{Matrix6, UnitQuaternion, Vector6};

const MAX_ITERS: usize = 20;
const MIN_DECREASE: f64 = 1e-10;
const MAX_HALVINGS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOutcome {
    pub pose: Pose,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// False when the normal equations were singular or the start was invalid.
    pub converged: bool,
}

/// Sum of squared reprojection errors, `None` if any point is behind the camera.
pub fn reprojection_cost(pose: &Pose, pixels: &[Pixel], points: &[Point3], cam: &PinholeCamera) -> Option<f64> {
    let mut cost = 0.0;
    for (px, x) in pixels.iter().zip(points) {
        let p = cam.project_camera_point(&pose.transform(x))?;
        cost += (p - px).norm_squared();
    }
    Some(cost)
}

/// Gauss-Newton on the 6-DoF pose. The returned cost never exceeds the input cost.
pub fn refine_pose(pose: &Pose, pixels: &[Pixel], points: &[Point3], cam: &PinholeCamera) -> Result<RefineOutcome, PnpError> {
    if pixels.len() < 4 {
        return Err(PnpError::TooFewMatches { needed: 4, got: pixels.len() });
    }
    let Some(initial_cost) = reprojection_cost(pose, pixels, points, cam) else {
        return Ok(RefineOutcome {
            pose: *pose,
            initial_cost: f64::INFINITY,
            final_cost: f64::INFINITY,
            iterations: 0,
            converged: false,
        });
    };
    let mut current = *pose;
    let mut cost = initial_cost;
    let mut iterations = 0;
    let mut converged = true;
    while iterations < MAX_ITERS {
        iterations += 1;
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (px, x) in pixels.iter().zip(points) {
            let rx = current.rotation * x.coords;
            let pc = rx + current.translation;
            if pc.z <= MIN_DEPTH {
                continue;
            }
            let iz = 1.0 / pc.z;
            let r = [cam.fx * pc.x * iz + cam.cx - px.x, cam.fy * pc.y * iz + cam.cy - px.y];
            // d(pixel)/d(camera point)
            let du = Vec3::new(cam.fx * iz, 0.0, -cam.fx * pc.x * iz * iz);
            let dv = Vec3::new(0.0, cam.fy * iz, -cam.fy * pc.y * iz * iz);
            for (row, ri) in [du, dv].iter().zip(r) {
                // d(pc)/d(omega) = -[RX]x, so row * (-[RX]x) = (RX x row)^T
                let jw = rx.cross(row);
                let j = Vector6::new(jw.x, jw.y, jw.z, row.x, row.y, row.z);
                h += j * j.transpose();
                g += j * ri;
            }
        }
        let Some(chol) = h.cholesky() else {
            converged = false;
            break;
        };
        let delta = chol.solve(&(-g));
        if !delta.iter().all(|d| d.is_finite()) {
            converged = false;
            break;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let d = delta * step;
            let cand = Pose::new(
                UnitQuaternion::from_scaled_axis(Vec3::new(d[0], d[1], d[2])) * current.rotation,
                current.translation + Vec3::new(d[3], d[4], d[5]),
            );
            if let Some(c) = reprojection_cost(&cand, pixels, points, cam) {
                if c < cost {
                    accepted = Some((cand, c));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, c)) = accepted else {
            break;
        };
        let decrease = cost - c;
        current = cand;
        cost = c;
        if decrease < MIN_DECREASE {
            break;
        }
    }
    Ok(RefineOutcome { pose: current, initial_cost, final_cost: cost, iterations, converged })
}

/// [`refine_pose`] on map matches.
pub fn refine_pose_nonlinear(
    pose: &Pose,
    inliers: &[Match2D3D],
    keypoints: &[Keypoint],
    cam: &PinholeCamera,
    map: &LandmarkMap,
) -> Result<RefineOutcome, PnpError> {
    let (px, pts) = correspondences(inliers, keypoints, map)?;
    refine_pose(pose, &px, &pts, cam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_error, project};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn setup(rng: &mut ChaCha8Rng, n: usize) -> (PinholeCamera, Pose, Vec<Point3>, Vec<Pixel>) {
        let cam = PinholeCamera::new(500.0, 500.0, 320.0, 240.0, 640, 480);
        let truth = Pose::look_at(&Point3::new(1.0, -2.0, -8.0), &Point3::origin(), &Vec3::y());
        let mut pts = Vec::new();
        let mut px = Vec::new();
        while pts.len() < n {
            let x = Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            if let Some(p) = project(&cam, &truth, &x).filter(|p| cam.contains(p)) {
                pts.push(x);
                px.push(p);
            }
        }
        (cam, truth, pts, px)
    }

    #[test]
    fn converges_from_perturbed_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (cam, truth, pts, px) = setup(&mut rng, 40);
        let start = Pose::from_rotation_center(
            UnitQuaternion::from_scaled_axis(Vec3::new(0.5f64.to_radians(), 0.0, 0.0)) * truth.rotation,
            &(truth.center() + Vec3::new(0.05, 0.0, 0.0)),
        );
        let out = refine_pose(&start, &px, &pts, &cam).unwrap();
        assert!(out.converged);
        let (t, r) = pose_error(&out.pose, &truth);
        assert!(t < 1e-8, "t = {t}");
        assert!(r < 1e-6);
        assert!(out.final_cost <= out.initial_cost);
    }

    #[test]
    fn optimal_pose_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cam, truth, pts, px) = setup(&mut rng, 20);
        let out = refine_pose(&truth, &px, &pts, &cam).unwrap();
        let (t, r) = pose_error(&out.pose, &truth);
        assert!(t < 1e-10 && r < 1e-8);
    }

    #[test]
    fn noisy_rms_does_not_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (cam, truth, pts, mut px) = setup(&mut rng, 60);
        let n = Normal::new(0.0, 1.0).unwrap();
        for p in &mut px {
            p.x += n.sample(&mut rng);
            p.y += n.sample(&mut rng);
        }
        let out = refine_pose(&truth, &px, &pts, &cam).unwrap();
        assert!(out.final_cost <= out.initial_cost);
        assert!(out.final_cost < out.initial_cost);
    }

    #[test]
    fn degenerate_input_reports_non_convergence() {
        let cam = PinholeCamera::new(500.0, 500.0, 320.0, 240.0, 640, 480);
        let pts = vec![Point3::new(0.0, 0.0, 5.0); 4];
        let px = vec![Pixel::new(320.0, 240.0); 4];
        let out = refine_pose(&Pose::identity(), &px, &pts, &cam).unwrap();
        assert!(!out.converged);
        assert_eq!(out.pose, Pose::identity());
        assert!(refine_pose(&Pose::identity(), &px[..3], &pts[..3], &cam).is_err());
    }
}
