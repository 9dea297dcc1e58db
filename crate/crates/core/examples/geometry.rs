//! Projection, triangulation and pose comparison on a two-camera rig.
//!
//! cargo run --example geometry

use ocloc::geometry::{pose_error, project, triangulate, View};
use ocloc::{PinholeCamera, Pixel, Point3, Pose, Vec3};

fn main() {
    let cam = PinholeCamera::new(500.0, 500.0, 320.0, 240.0, 640, 480);
    let left = Pose::look_at(&Point3::new(-1.0, 0.0, -8.0), &Point3::origin(), &Vec3::y());
    let right = Pose::look_at(&Point3::new(1.5, 0.3, -7.5), &Point3::origin(), &Vec3::y());

    let x = Point3::new(0.4, -0.7, 1.2);
    let (pl, pr) = (project(&cam, &left, &x).unwrap(), project(&cam, &right, &x).unwrap());
    println!("left  pixel: ({:.3}, {:.3})", pl.x, pl.y);
    println!("right pixel: ({:.3}, {:.3})", pr.x, pr.y);

    let views = [View { camera: &cam, pose: &left, pixel: pl }, View { camera: &cam, pose: &right, pixel: pr }];
    let tri = triangulate(&views).expect("baseline is wide enough");
    println!("triangulated {:?}, error {:.2e} m", tri.coords.as_slice(), (tri - x).norm());

    // half a pixel of noise on one view
    let noisy = [views[0], View { pixel: pr + Pixel::new(0.5, 0.0).coords, ..views[1] }];
    let tri = triangulate(&noisy).unwrap();
    println!("with 0.5 px noise: error {:.4} m", (tri - x).norm());

    // points behind the camera do not project
    println!("behind camera: {:?}", project(&cam, &left, &Point3::new(-1.0, 0.0, -20.0)));

    let (dt, dr) = pose_error(&left, &right);
    println!("left vs right camera: {dt:.3} m, {dr:.3} deg");
    println!("world-to-camera quaternion (wxyz) of left: {:?}", left.wxyz());
}
