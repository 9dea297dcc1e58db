use super::{unit_direction, Label, UNKNOWN_LABEL};
use crate::geometry::{safe_acos, Point3, Vec3};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use thiserror::Error;

/// Visible field of a landmark: a cone with apex at the point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationConstraints {
    /// Maximum distance from the point to any observing camera center.
    pub max_distance: f64,
    /// Unit mean viewing direction, pointing from the landmark toward the cameras.
    pub direction: Vec3,
    /// Full cone aperture in radians: twice the largest angle to `direction`.
    pub max_angle: f64,
    /// Set when the viewing directions cancel out; the cone then covers every direction.
    pub degenerate: bool,
}

/// Norm of the mean viewing direction below which the cone is treated as omnidirectional.
pub const DEGENERATE_MEAN_NORM: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("no camera centers given")]
    NoCenters,
    #[error("camera center {0} coincides with the point")]
    CoincidentCenter(usize),
}

pub fn compute_observation_constraints(
    x: &Point3,
    centers: &[Point3],
) -> Result<ObservationConstraints, ConstraintError> {
    if centers.is_empty() {
        return Err(ConstraintError::NoCenters);
    }
    let mut max_distance = 0.0_f64;
    let mut dirs = Vec::with_capacity(centers.len());
    for (i, c) in centers.iter().enumerate() {
        let d = (c - x).norm();
        if !(d > 1e-9) {
            return Err(ConstraintError::CoincidentCenter(i));
        }
        max_distance = max_distance.max(d);
        dirs.push(unit_direction(x, c));
    }
    let mean = dirs.iter().fold(Vec3::zeros(), |acc, d| acc + d) / dirs.len() as f64;
    let norm = mean.norm();
    if norm < DEGENERATE_MEAN_NORM {
        return Ok(ObservationConstraints {
            max_distance,
            direction: Vec3::z(),
            max_angle: 2.0 * PI,
            degenerate: true,
        });
    }
    let direction = mean / norm;
    let half = dirs
        .iter()
        .map(|d| safe_acos(direction.dot(d)))
        .fold(0.0_f64, f64::max);
    Ok(ObservationConstraints {
        max_distance,
        direction,
        max_angle: (2.0 * half).min(2.0 * PI),
        degenerate: false,
    })
}

/// Most frequent non-zero label; ties go to the smallest id, no evidence gives `0`.
pub fn vote_semantic_label(labels: &[Label]) -> Label {
    let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
    for &l in labels.iter().filter(|&&l| l != UNKNOWN_LABEL) {
        *counts.entry(l).or_default() += 1;
    }
    // BTreeMap iterates in ascending label order, so `>` keeps the smallest on ties.
    let mut best = (UNKNOWN_LABEL, 0usize);
    for (label, count) in counts {
        if count > best.1 {
            best = (label, count);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn single_view() {
        let c = compute_observation_constraints(&Point3::origin(), &[Point3::new(0.0, 0.0, 5.0)]).unwrap();
        assert_eq!(c.max_distance, 5.0);
        assert_eq!(c.direction, Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(c.max_angle, 0.0);
        assert!(!c.degenerate);
    }

    #[test]
    fn two_orthogonal_views() {
        let c = compute_observation_constraints(
            &Point3::origin(),
            &[Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)],
        )
        .unwrap();
        let h = 2f64.sqrt() / 2.0;
        assert_eq!(c.max_distance, 1.0);
        assert_relative_eq!(c.direction, Vec3::new(h, h, 0.0), epsilon = 1e-12);
        assert_relative_eq!(c.max_angle, PI / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn opposing_views_are_degenerate() {
        let c = compute_observation_constraints(
            &Point3::origin(),
            &[Point3::new(1.0, 0.0, 0.0), Point3::new(-1.0, 0.0, 0.0)],
        )
        .unwrap();
        assert!(c.degenerate);
        assert_eq!(c.max_angle, 2.0 * PI);
        assert_relative_eq!(c.direction.norm(), 1.0);
    }

    #[test]
    fn errors() {
        assert_eq!(compute_observation_constraints(&Point3::origin(), &[]), Err(ConstraintError::NoCenters));
        assert_eq!(
            compute_observation_constraints(&Point3::origin(), &[Point3::new(1.0, 0.0, 0.0), Point3::origin()]),
            Err(ConstraintError::CoincidentCenter(1))
        );
    }

    #[test]
    fn voting() {
        assert_eq!(vote_semantic_label(&[2, 2, 3]), 2);
        assert_eq!(vote_semantic_label(&[1, 2]), 1);
        assert_eq!(vote_semantic_label(&[2, 1]), 1);
        assert_eq!(vote_semantic_label(&[0, 0]), 0);
        assert_eq!(vote_semantic_label(&[]), 0);
        assert_eq!(vote_semantic_label(&[0, 0, 0, 5]), 5);
    }

    proptest! {
        #[test]
        fn vote_is_permutation_invariant(mut labels in proptest::collection::vec(0u16..6, 0..20), seed in any::<u64>()) {
            let before = vote_semantic_label(&labels);
            use rand::{seq::SliceRandom, SeedableRng};
            labels.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(before, vote_semantic_label(&labels));
        }

        #[test]
        fn every_center_inside_cone(pts in proptest::collection::vec((-10.0..10.0f64, -10.0..10.0f64, 0.5..10.0f64), 1..12)) {
            let x = Point3::origin();
            let centers: Vec<Point3> = pts.iter().map(|&(a, b, c)| Point3::new(a, b, c)).collect();
            let oc = compute_observation_constraints(&x, &centers).unwrap();
            for c in &centers {
                prop_assert!((c - x).norm() <= oc.max_distance);
                let ang = safe_acos(oc.direction.dot(&unit_direction(&x, c)));
                prop_assert!(ang <= oc.max_angle / 2.0 + 1e-9);
            }
        }
    }
}
