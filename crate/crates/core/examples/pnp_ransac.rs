//! Absolute pose from 2D-3D correspondences with half of them wrong.
//!
//! cargo run --example pnp_ransac

use ocloc::geometry::{pose_error, project};
use ocloc::pnp::{refine_pose, solve_pnp_ransac, PnpConfig};
use ocloc::{PinholeCamera, Pixel, Point3, Pose, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let cam = PinholeCamera::new(500.0, 500.0, 320.0, 240.0, 640, 480);
    let truth = Pose::look_at(&Point3::new(2.0, -1.0, -10.0), &Point3::new(0.0, 0.0, 0.0), &Vec3::y());
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let mut pixels = Vec::new();
    let mut points = Vec::new();
    while points.len() < 100 {
        let x = Point3::new(rng.random_range(-4.0..4.0), rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0));
        let Some(px) = project(&cam, &truth, &x) else { continue };
        if !cam.contains(&px) {
            continue;
        }
        let px = if points.len() % 2 == 0 {
            px
        } else {
            // an outlier lands somewhere else in the image
            Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))
        };
        pixels.push(px);
        points.push(x);
    }

    let cfg = PnpConfig { seed: 1, ..PnpConfig::default() };
    let out = solve_pnp_ransac(&pixels, &points, &cam, &cfg).unwrap().expect("pose found");
    let (dt, dr) = pose_error(&out.pose, &truth);
    println!("{} iterations, {} inliers of {}", out.iterations, out.inliers.len(), pixels.len());
    println!("error vs truth: {dt:.2e} m, {dr:.2e} deg");

    // Gauss-Newton polishing from a rough start
    let rough = Pose::new(truth.rotation, truth.translation + Vec3::new(0.05, -0.03, 0.1));
    let inl_px: Vec<Pixel> = out.inliers.iter().map(|&i| pixels[i]).collect();
    let inl_pts: Vec<Point3> = out.inliers.iter().map(|&i| points[i]).collect();
    let r = refine_pose(&rough, &inl_px, &inl_pts, &cam).unwrap();
    println!(
        "refine: cost {:.3e} -> {:.3e} in {} iterations, error {:.2e} m",
        r.initial_cost,
        r.final_cost,
        r.iterations,
        pose_error(&r.pose, &truth).0
    );
}
