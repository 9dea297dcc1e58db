//! Naive reference versions of the visibility and neighbour queries, for tests.

use crate::descriptor::Neighbor;
use crate::geometry::{PinholeCamera, Pose};
use crate::map::LandmarkMap;
use crate::refiner::RefinerConfig;

/// Linear scan over every landmark, checking distance, cone and projection.
pub fn oracle_visible(map: &LandmarkMap, pose: &Pose, cam: &PinholeCamera, cfg: &RefinerConfig) -> Vec<u64> {
    let mut out = Vec::new();
    let center = pose.center();
    for lm in map.landmarks() {
        let v = center - lm.position;
        let d = v.norm();
        let close = d <= lm.constraints.max_distance * cfg.distance_slack;
        let inside_cone = lm.constraints.degenerate || {
            let c = if d == 0.0 { 1.0 } else { lm.constraints.direction.dot(&v) / d };
            c.clamp(-1.0, 1.0).acos() <= lm.constraints.max_angle * 0.5 + cfg.angle_slack
        };
        let pc = pose.transform(&lm.position);
        let in_image = cam.project_camera_point(&pc).is_some_and(|p| {
            p.x >= 0.0 && p.y >= 0.0 && p.x < cam.width as f64 && p.y < cam.height as f64
        });
        if close && inside_cone && in_image {
            out.push(lm.id);
        }
    }
    out
}

/// Full sort of the database by distance then index.
pub fn oracle_knn(query: &[f64], database: &[Vec<f64>], k: usize) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = database
        .iter()
        .enumerate()
        .map(|(index, v)| Neighbor {
            index,
            distance: query.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        })
        .collect();
    all.sort_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap().then(a.index.cmp(&b.index)));
    all.truncate(k);
    all
}
