//! Three-point absolute pose, Grunert's formulation.
//!
//! The depths along the three bearing rays follow from the law of cosines on
//! the triangle of world points; eliminating two of them leaves a quartic with
//! up to four real roots. Each root gives a set of camera-frame points, and the
//! rigid alignment of those to the world points is a candidate pose.

use crate::geometry::{Point3, Pose, Vec3};
use nalgebra::{Complex, Matrix3, Rotation3, UnitQuaternion};

/// Up to four poses mapping `world[i]` onto the ray `bearings[i]` (unit, camera frame).
pub fn solve_p3p(world: &[Point3; 3], bearings: &[Vec3; 3]) -> Vec<Pose> {
    let [p1, p2, p3] = world;
    let [j1, j2, j3] = bearings;
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    if a2 < 1e-18 || b2 < 1e-18 || c2 < 1e-18 {
        return Vec::new();
    }
    // collinear world points have a one-parameter family of solutions
    if (p2 - p1).cross(&(p3 - p1)).norm() < 1e-12 * (b2 + c2) {
        return Vec::new();
    }
    let ca = j2.dot(j3);
    let cb = j1.dot(j3);
    let cg = j1.dot(j2);

    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;
    let (ca2, cb2, cg2) = (ca * ca, cb * cb, cg * cg);

    let a4 = (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca2;
    let a3 = 4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca2 * cb);
    let a2c = 2.0
        * (amc * amc - 1.0 + 2.0 * amc * amc * cb2 + 2.0 * bmc * ca2 - 4.0 * apc * ca * cb * cg
            + 2.0 * bma * cg2);
    let a1 = 4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg2 * cb - (1.0 - apc) * ca * cg);
    let a0 = (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg2;

    let mut poses = Vec::with_capacity(4);
    for v in real_quartic_roots([a4, a3, a2c, a1, a0]) {
        if v <= 0.0 {
            continue;
        }
        let denom = 2.0 * (cg - v * ca);
        if denom.abs() < 1e-12 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / denom;
        if u <= 0.0 {
            continue;
        }
        let s1_sq = b2 / (1.0 + v * v - 2.0 * v * cb);
        if !(s1_sq > 0.0) {
            continue;
        }
        let s1 = s1_sq.sqrt();
        let depths = polish_depths([s1, u * s1, v * s1], [a2, b2, c2], [ca, cb, cg]);
        if depths.iter().any(|d| !(*d > 0.0)) {
            continue;
        }
        let cam = [j1 * depths[0], j2 * depths[1], j3 * depths[2]];
        if let Some(pose) = align(world, &cam) {
            poses.push(pose);
        }
    }
    poses
}

/// Newton steps on the three law-of-cosines equations in the depths. A step is
/// kept only if it lowers the residual; near a double root the Jacobian is singular.
fn polish_depths(mut s: [f64; 3], [a2, b2, c2]: [f64; 3], [ca, cb, cg]: [f64; 3]) -> [f64; 3] {
    let residual = |[s1, s2, s3]: [f64; 3]| {
        Vec3::new(
            s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * ca - a2,
            s1 * s1 + s3 * s3 - 2.0 * s1 * s3 * cb - b2,
            s1 * s1 + s2 * s2 - 2.0 * s1 * s2 * cg - c2,
        )
    };
    let mut f = residual(s);
    for _ in 0..3 {
        let [s1, s2, s3] = s;
        let j = Matrix3::new(
            0.0,
            2.0 * s2 - 2.0 * s3 * ca,
            2.0 * s3 - 2.0 * s2 * ca,
            2.0 * s1 - 2.0 * s3 * cb,
            0.0,
            2.0 * s3 - 2.0 * s1 * cb,
            2.0 * s1 - 2.0 * s2 * cg,
            2.0 * s2 - 2.0 * s1 * cg,
            0.0,
        );
        let Some(delta) = j.lu().solve(&(-f)) else {
            break;
        };
        let next = [s1 + delta.x, s2 + delta.y, s3 + delta.z];
        let fn_ = residual(next);
        if !(fn_.norm() < f.norm()) {
            break;
        }
        s = next;
        f = fn_;
    }
    s
}

/// Rigid transform taking `world` onto `cam` in the least-squares sense.
pub(crate) fn align(world: &[Point3], cam: &[Vec3]) -> Option<Pose> {
    let n = world.len() as f64;
    let pw = world.iter().fold(Vec3::zeros(), |a, p| a + p.coords) / n;
    let pc = cam.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::<f64>::zeros();
    for (w, c) in world.iter().zip(cam) {
        h += (w.coords - pw) * (c - pc).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let t = pc - rotation * pw;
    if !t.iter().all(|x| x.is_finite()) {
        return None;
    }
    Some(Pose::new(rotation, t))
}

/// Real roots of `c[0] x^4 + c[1] x^3 + c[2] x^2 + c[3] x + c[4]`.
///
/// All four complex roots come from a bounded Aberth iteration; the ones with a
/// negligible imaginary part are polished by Newton on the real polynomial.
pub fn real_quartic_roots(c: [f64; 5]) -> Vec<f64> {
    let scale = c.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || c[0].abs() < 1e-14 * scale {
        return Vec::new();
    }
    let m = [1.0, c[1] / c[0], c[2] / c[0], c[3] / c[0], c[4] / c[0]];
    if !m.iter().all(|x| x.is_finite()) {
        return Vec::new();
    }
    let poly = |x: Complex<f64>| (((x + m[1]) * x + m[2]) * x + m[3]) * x + m[4];
    let dpoly = |x: Complex<f64>| ((x * 4.0 + 3.0 * m[1]) * x + 2.0 * m[2]) * x + m[3];

    // Cauchy bound on the root moduli
    let radius = 1.0 + m[1..].iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    let mut z: [Complex<f64>; 4] =
        std::array::from_fn(|k| Complex::from_polar(0.5 * radius, 0.4 + k as f64 * std::f64::consts::FRAC_PI_2));
    for _ in 0..200 {
        let mut moved = 0.0_f64;
        for k in 0..4 {
            let p = poly(z[k]);
            if p == Complex::new(0.0, 0.0) {
                continue;
            }
            let ratio = p / dpoly(z[k]);
            let repulsion: Complex<f64> =
                (0..4).filter(|&j| j != k).map(|j| Complex::new(1.0, 0.0) / (z[k] - z[j])).sum();
            let w = ratio / (Complex::new(1.0, 0.0) - ratio * repulsion);
            if !(w.re.is_finite() && w.im.is_finite()) {
                continue;
            }
            z[k] -= w;
            moved = moved.max(w.norm() / (1.0 + z[k].norm()));
        }
        if moved < 1e-15 {
            break;
        }
    }

    let rpoly = |x: f64| (((x + m[1]) * x + m[2]) * x + m[3]) * x + m[4];
    let rdpoly = |x: f64| ((4.0 * x + 3.0 * m[1]) * x + 2.0 * m[2]) * x + m[3];
    let mut roots = Vec::new();
    for r in z {
        if r.im.abs() > 1e-6 * (1.0 + r.re.abs()) {
            continue;
        }
        let mut x = r.re;
        for _ in 0..5 {
            let dp = rdpoly(x);
            if dp == 0.0 {
                break;
            }
            let next = x - rpoly(x) / dp;
            if !(next.is_finite() && rpoly(next).abs() < rpoly(x).abs()) {
                break;
            }
            x = next;
        }
        if x.is_finite() && !roots.iter().any(|r: &f64| (r - x).abs() < 1e-10 * (1.0 + x.abs())) {
            roots.push(x);
        }
    }
    roots
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quartic_with_known_roots() {
        // (x-1)(x-2)(x+3)(x-0.5) = x^4 - 0.5x^3 - 7x^2 + 9.5x - 3
        let mut r = real_quartic_roots([1.0, -0.5, -7.0, 9.5, -3.0]);
        r.sort_by(f64::total_cmp);
        let expect = [-3.0, 0.5, 1.0, 2.0];
        assert_eq!(r.len(), 4);
        for (a, b) in r.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // x^4 + 1 has no real roots
        assert!(real_quartic_roots([1.0, 0.0, 0.0, 0.0, 1.0]).is_empty());
    }

    #[test]
    fn recovers_true_pose_among_solutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        let mut loose = 0;
        for _ in 0..2000 {
            let axis = nalgebra::Unit::new_normalize(Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
            let truth = Pose::new(
                UnitQuaternion::from_axis_angle(&axis, rng.random_range(0.0..3.1)),
                Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
            );
            let cam: Vec<Vec3> = (0..3)
                .map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(2.0..10.0)))
                .collect();
            let world: Vec<Point3> = cam.iter().map(|c| truth.inverse_transform(c)).collect();
            let bearings = [cam[0].normalize(), cam[1].normalize(), cam[2].normalize()];
            let sols = solve_p3p(&[world[0], world[1], world[2]], &bearings);
            let best = sols
                .iter()
                .map(|p| {
                    let (t, r) = pose_error(p, &truth);
                    t + r.to_radians()
                })
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(best);
            if best > 1e-6 {
                loose += 1;
            }
        }
        // a camera near the danger cylinder gives a double root, where the depths
        // are only determined to about sqrt(eps)
        assert!(loose <= 2, "{loose} inaccurate trials");
        assert!(worst < 1e-2, "worst p3p error {worst}");
    }
}
