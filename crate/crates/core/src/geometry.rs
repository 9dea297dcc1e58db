//! Rigid transforms, pinhole projection, triangulation and pose error metrics.
//!
//! Poses map world coordinates into the camera frame: `x_cam = R(q) * X + t`.
//! The camera center is therefore `C = -R(q)^T * t`.

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;
pub type Pixel = nalgebra::Point2<f64>;
pub type Vec3 = Vector3<f64>;

/// Depth below which a point is considered to be at or behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is not visible (at or behind the camera)")]
    NotVisible,
    #[error("triangulation needs at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("camera centers are coincident (baseline below 1e-9 m)")]
    DegenerateBaseline,
    #[error("triangulated point lies behind camera {0}")]
    Cheirality(usize),
    #[error("linear triangulation is ill-conditioned")]
    IllConditioned,
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from raw `(w, x, y, z)` quaternion coefficients, normalizing them.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Self {
        Self {
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])),
            translation: Vec3::new(t[0], t[1], t[2]),
        }
    }

    /// Builds a pose from raw coefficients that are already unit norm, without renormalizing.
    ///
    /// Used by the binary readers so stored values come back bit-for-bit.
    pub fn from_wxyz_unchecked(q: [f64; 4], t: [f64; 3]) -> Self {
        Self {
            rotation: UnitQuaternion::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3])),
            translation: Vec3::new(t[0], t[1], t[2]),
        }
    }

    /// Camera with world-to-camera rotation `rotation` whose optical center sits at `center`.
    pub fn from_rotation_center(rotation: UnitQuaternion<f64>, center: &Point3) -> Self {
        let translation = -(rotation * center.coords);
        Self {
            rotation,
            translation,
        }
    }

    /// Camera at `eye` looking at `target`, with image `y` pointing roughly along `-up`.
    pub fn look_at(eye: &Point3, target: &Point3, up: &Vec3) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vec3::x());
        }
        let x = x.normalize();
        let y = z.cross(&x);
        // rows of the world-to-camera rotation are the camera axes in world coordinates
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        Self::from_rotation_center(rotation, eye)
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Maps a world point into the camera frame.
    pub fn transform(&self, x: &Point3) -> Vec3 {
        self.rotation * x.coords + self.translation
    }

    /// Maps a camera-frame point back into the world frame.
    pub fn inverse_transform(&self, x_cam: &Vec3) -> Point3 {
        Point3::from(self.rotation.inverse() * (x_cam - self.translation))
    }

    pub fn inverse(&self) -> Pose {
        let rotation = self.rotation.inverse();
        Pose {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn center(&self) -> Point3 {
        Point3::from(-(self.rotation.inverse() * self.translation))
    }

    /// Optical axis in world coordinates.
    pub fn viewing_direction(&self) -> Vec3 {
        self.rotation.inverse() * Vec3::z()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        debug_assert!(fx > 0.0 && fy > 0.0 && width >= 1 && height >= 1);
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.width >= 1
            && self.height >= 1
            && self.cx.is_finite()
            && self.cy.is_finite()
    }

    /// Projects a camera-frame point, `None` when it is at or behind the image plane.
    pub fn project_camera_point(&self, p: &Vec3) -> Option<Pixel> {
        if p.z <= MIN_DEPTH {
            return None;
        }
        Some(Pixel::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Unit bearing vector in the camera frame through a pixel.
    pub fn bearing(&self, px: &Pixel) -> Vec3 {
        Vec3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0).normalize()
    }

    /// Normalized image coordinates `(x/z, y/z)` of a pixel.
    pub fn normalized(&self, px: &Pixel) -> (f64, f64) {
        ((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    /// Half-open bounds check, `[0, width) x [0, height)`.
    pub fn contains(&self, px: &Pixel) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// Pinhole projection of a world point. Does not clip to the image bounds.
pub fn project(cam: &PinholeCamera, pose: &Pose, x: &Point3) -> Option<Pixel> {
    cam.project_camera_point(&pose.transform(x))
}

/// World-space ray `(origin, unit direction)` through a pixel.
pub fn unproject_ray(cam: &PinholeCamera, pose: &Pose, px: &Pixel) -> (Point3, Vec3) {
    let dir = pose.rotation.inverse() * cam.bearing(px);
    (pose.center(), dir)
}

pub fn reprojection_error(
    cam: &PinholeCamera,
    pose: &Pose,
    x: &Point3,
    obs: &Pixel,
) -> Result<f64, GeometryError> {
    project(cam, pose, x)
        .map(|p| (p - obs).norm())
        .ok_or(GeometryError::NotVisible)
}

/// One observation used by [`triangulate`].
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub camera: &'a PinholeCamera,
    pub pose: &'a Pose,
    pub pixel: Pixel,
}

const TRIANGULATION_MAX_ITERS: usize = 10;
const TRIANGULATION_MIN_DECREASE: f64 = 1e-12;

/// Linear multiview triangulation followed by structure-only Gauss-Newton refinement.
pub fn triangulate(views: &[View<'_>]) -> Result<Point3, GeometryError> {
    if views.len() < 2 {
        return Err(GeometryError::TooFewViews(views.len()));
    }
    let centers: Vec<Point3> = views.iter().map(|v| v.pose.center()).collect();
    let baseline = centers
        .iter()
        .flat_map(|a| centers.iter().map(move |b| (a - b).norm()))
        .fold(0.0_f64, f64::max);
    if baseline < 1e-9 {
        return Err(GeometryError::DegenerateBaseline);
    }

    // Accumulate A^T A directly; each view contributes two rows built from normalized coordinates.
    let mut ata = Matrix4::<f64>::zeros();
    for v in views {
        let (x, y) = v.camera.normalized(&v.pixel);
        let r = v.pose.rotation_matrix();
        let t = v.pose.translation;
        let row = |i: usize| nalgebra::RowVector4::new(r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]);
        let p1 = row(0);
        let p2 = row(1);
        let p3 = row(2);
        for eq in [p3 * x - p1, p3 * y - p2] {
            let eq = eq / eq.norm().max(1e-300);
            ata += eq.transpose() * eq;
        }
    }
    let eig = ata.symmetric_eigen();
    let (min_idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let h = eig.eigenvectors.column(min_idx);
    if h[3].abs() < 1e-14 {
        return Err(GeometryError::IllConditioned);
    }
    let mut point = Point3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);

    if let Some(refined) = refine_point(views, point) {
        point = refined;
    }

    for (i, v) in views.iter().enumerate() {
        if v.pose.transform(&point).z <= MIN_DEPTH {
            return Err(GeometryError::Cheirality(i));
        }
    }
    Ok(point)
}

fn structure_cost(views: &[View<'_>], x: &Point3) -> Option<f64> {
    let mut cost = 0.0;
    for v in views {
        let p = project(v.camera, v.pose, x)?;
        cost += (p - v.pixel).norm_squared();
    }
    Some(cost)
}

fn refine_point(views: &[View<'_>], start: Point3) -> Option<Point3> {
    let mut x = start;
    let mut cost = structure_cost(views, &x)?;
    for _ in 0..TRIANGULATION_MAX_ITERS {
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vec3::zeros();
        for v in views {
            let pc = v.pose.transform(&x);
            let r = v.pose.rotation_matrix();
            let (fx, fy) = (v.camera.fx, v.camera.fy);
            let iz = 1.0 / pc.z;
            let dproj = nalgebra::Matrix2x3::new(
                fx * iz,
                0.0,
                -fx * pc.x * iz * iz,
                0.0,
                fy * iz,
                -fy * pc.y * iz * iz,
            );
            let j = dproj * r;
            let proj = nalgebra::Vector2::new(fx * pc.x * iz + v.camera.cx, fy * pc.y * iz + v.camera.cy);
            let res = proj - v.pixel.coords;
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let Some(delta) = jtj.cholesky().map(|c| c.solve(&(-jtr))) else {
            break;
        };
        let candidate = x + delta;
        let Some(new_cost) = structure_cost(views, &candidate) else {
            break;
        };
        if new_cost > cost {
            break;
        }
        let decrease = cost - new_cost;
        x = candidate;
        cost = new_cost;
        if decrease < TRIANGULATION_MIN_DECREASE {
            break;
        }
    }
    Some(x)
}

/// Angle of a rotation in radians, in `[0, pi]`.
pub fn rotation_angle(q: &UnitQuaternion<f64>) -> f64 {
    let q = q.quaternion();
    let v = q.imag().norm();
    2.0 * v.atan2(q.w.abs())
}

/// Translation error (distance between camera centers, meters) and rotation error (degrees).
pub fn pose_error(a: &Pose, b: &Pose) -> (f64, f64) {
    let trans = (a.center() - b.center()).norm();
    // imaginary part of qa * conj(qb), grouped so equal rotations cancel exactly
    let (qa, qb) = (a.rotation.quaternion(), b.rotation.quaternion());
    let (va, vb) = (qa.imag(), qb.imag());
    let v = (va * qb.w - vb * qa.w) - va.cross(&vb);
    let w = qa.w * qb.w + va.dot(&vb);
    (trans, (2.0 * v.norm().atan2(w.abs())).to_degrees())
}

/// `acos` with its argument clamped into `[-1, 1]`.
pub fn safe_acos(x: f64) -> f64 {
    x.clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> PinholeCamera {
        PinholeCamera::new(100.0, 100.0, 320.0, 240.0, 640, 480)
    }

    #[test]
    fn project_examples() {
        let id = Pose::identity();
        let p = project(&cam(), &id, &Point3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!((p.x, p.y), (320.0, 240.0));
        let p = project(&cam(), &id, &Point3::new(1.0, 0.0, 5.0)).unwrap();
        assert_eq!((p.x, p.y), (340.0, 240.0));
        assert!(project(&cam(), &id, &Point3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn reprojection_error_examples() {
        let id = Pose::identity();
        let x = Point3::new(1.0, 0.0, 5.0);
        assert_eq!(reprojection_error(&cam(), &id, &x, &Pixel::new(340.0, 240.0)).unwrap(), 0.0);
        assert_eq!(reprojection_error(&cam(), &id, &x, &Pixel::new(343.0, 244.0)).unwrap(), 5.0);
        assert_eq!(
            reprojection_error(&cam(), &id, &Point3::new(0.0, 0.0, -1.0), &Pixel::new(0.0, 0.0)),
            Err(GeometryError::NotVisible)
        );
    }

    fn views_of(x: &Point3, poses: &[Pose], c: &PinholeCamera) -> Vec<Pixel> {
        poses.iter().map(|p| project(c, p, x).unwrap()).collect()
    }

    #[test]
    fn triangulate_two_and_three_views() {
        let c = cam();
        let x = Point3::new(1.0, 2.0, 8.0);
        let poses = [
            Pose::from_rotation_center(UnitQuaternion::identity(), &Point3::origin()),
            Pose::from_rotation_center(UnitQuaternion::identity(), &Point3::new(1.0, 0.0, 0.0)),
            Pose::from_rotation_center(
                UnitQuaternion::from_euler_angles(0.0, 0.05, 0.0),
                &Point3::new(-1.0, 0.5, 0.0),
            ),
        ];
        let px = views_of(&x, &poses, &c);
        let v: Vec<View> = poses
            .iter()
            .zip(&px)
            .map(|(p, q)| View { camera: &c, pose: p, pixel: *q })
            .collect();
        let two = triangulate(&v[..2]).unwrap();
        assert!((two - x).norm() < 1e-6);
        let three = triangulate(&v).unwrap();
        assert!((three - two).norm() < 1e-6);
    }

    #[test]
    fn triangulate_errors() {
        let c = cam();
        let p = Pose::identity();
        let v = View { camera: &c, pose: &p, pixel: Pixel::new(320.0, 240.0) };
        assert_eq!(triangulate(&[v]), Err(GeometryError::TooFewViews(1)));
        assert_eq!(triangulate(&[v, v]), Err(GeometryError::DegenerateBaseline));
    }

    #[test]
    fn pose_error_examples() {
        let a = Pose::look_at(&Point3::new(3.0, 1.0, -2.0), &Point3::origin(), &Vec3::y());
        assert_eq!(pose_error(&a, &a), (0.0, 0.0));

        let shifted = Pose::from_rotation_center(a.rotation, &(a.center() + Vec3::new(0.0, 0.3, 0.0)));
        let (t, r) = pose_error(&a, &shifted);
        assert_relative_eq!(t, 0.3, epsilon = 1e-12);
        assert!(r < 1e-9);

        // 10 degree roll about the camera's own z axis keeps the center fixed
        let roll = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), 10f64.to_radians());
        let rolled = Pose::from_rotation_center(roll * a.rotation, &a.center());
        let (t, r) = pose_error(&a, &rolled);
        assert!(t < 1e-12);
        assert_relative_eq!(r, 10.0, epsilon = 1e-9);
    }

    #[test]
    fn look_at_points_at_target() {
        let eye = Point3::new(4.0, -1.0, 2.0);
        let pose = Pose::look_at(&eye, &Point3::origin(), &Vec3::y());
        let pc = pose.transform(&Point3::origin());
        assert!(pc.x.abs() < 1e-12 && pc.y.abs() < 1e-12 && pc.z > 0.0);
        assert_relative_eq!((pose.center() - eye).norm(), 0.0, epsilon = 1e-12);
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = nalgebra::Unit::new_normalize(Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        let q = UnitQuaternion::from_axis_angle(&axis, rng.random_range(0.0..3.0));
        Pose::new(q, Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
    }

    #[test]
    fn triangulation_property_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = PinholeCamera::new(500.0, 500.0, 320.0, 240.0, 640, 480);
        for _ in 0..1000 {
            let x = Point3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let n = rng.random_range(2..=10);
            let poses: Vec<Pose> = (0..n)
                .map(|_| {
                    let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(-1.0..1.0));
                    let eye = x + dir.normalize() * rng.random_range(4.0..12.0);
                    let target = x + Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                    Pose::look_at(&eye, &target, &Vec3::y())
                })
                .collect();
            let v: Vec<View> = poses
                .iter()
                .map(|p| View { camera: &c, pose: p, pixel: project(&c, p, &x).unwrap() })
                .collect();
            let est = triangulate(&v).unwrap();
            assert!((est - x).norm() < 1e-6, "error {}", (est - x).norm());
        }
    }

    proptest! {
        #[test]
        fn inverse_round_trip(seed in any::<u64>(), px in -10.0..10.0f64, py in -10.0..10.0f64, pz in -10.0..10.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pose = random_pose(&mut rng);
            let x = Point3::new(px, py, pz);
            let back = pose.inverse().transform(&Point3::from(pose.transform(&x)));
            prop_assert!((back - x.coords).norm() < 1e-9);
            prop_assert!((pose.rotation.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn unprojected_ray_passes_through_point(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pose = random_pose(&mut rng);
            let c = cam();
            let pc = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.5..20.0));
            let x = pose.inverse_transform(&pc);
            let px = project(&c, &pose, &x).unwrap();
            let (o, d) = unproject_ray(&c, &pose, &px);
            let v = x - o;
            let dist = (v - d * v.dot(&d)).norm();
            prop_assert!(dist < 1e-9, "ray misses by {}", dist);
        }

        #[test]
        fn pose_error_is_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = random_pose(&mut ChaCha8Rng::seed_from_u64(s1));
            let b = random_pose(&mut ChaCha8Rng::seed_from_u64(s2));
            let (t1, r1) = pose_error(&a, &b);
            let (t2, r2) = pose_error(&b, &a);
            prop_assert!((t1 - t2).abs() < 1e-9);
            prop_assert!((r1 - r2).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&r1));
        }

        #[test]
        fn known_rotation_angle_recovered(seed in any::<u64>(), deg in 0.0..179.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_pose(&mut rng);
            let axis = nalgebra::Unit::new_normalize(Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)));
            let delta = UnitQuaternion::from_axis_angle(&axis, deg.to_radians());
            let b = Pose::from_rotation_center(delta * a.rotation, &a.center());
            let (_, r) = pose_error(&a, &b);
            prop_assert!((r - deg).abs() < 1e-6);
        }
    }
}
