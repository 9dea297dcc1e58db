//! Initial pose for one query: global-descriptor retrieval, feature-match PnP
//! against each retrieved image, and DBSCAN over the resulting camera centers.
//!
//! cargo run --example retrieval

use ocloc::geometry::pose_error;
use ocloc::map::BuildConfig;
use ocloc::retrieval::{cluster_poses_dbscan, fm_pnp, select_initial_pose, RetrievalConfig, RetrievalIndex};
use ocloc::synthetic::{add_noise, generate_scene, NoiseConfig, SceneConfig};

fn main() {
    let scene = generate_scene(&SceneConfig { n_queries: 3, ..SceneConfig::default() }).unwrap();
    let scene = add_noise(&scene, &NoiseConfig { pixel_sigma: 0.5, descriptor_sigma: 0.02, ..NoiseConfig::default() });
    let (map, _) = scene.build_map(&BuildConfig::default()).unwrap();
    let cfg = RetrievalConfig { k: 8, ..RetrievalConfig::default() };
    let index = RetrievalIndex::build(&map, cfg.pca_dim).unwrap();

    let query = &scene.queries[0];
    let truth = scene.query_poses[0];
    let candidates = index.query(&query.global_descriptor, cfg.k).unwrap();
    let mut estimates = Vec::new();
    let mut distances = Vec::new();
    for c in &candidates {
        match fm_pnp(query, c, &map, &cfg) {
            Some(e) => {
                let (dt, _) = pose_error(&e.pose, &truth);
                println!("image {:>2} (d={:.3}): {:>3} inliers, {:.3} m off", c.image_id, c.distance, e.inliers.len(), dt);
                estimates.push(e);
                distances.push(c.distance);
            }
            None => println!("image {:>2} (d={:.3}): no pose", c.image_id, c.distance),
        }
    }

    let clusters = cluster_poses_dbscan(&estimates, cfg.eps, cfg.min_pts);
    for c in &clusters {
        println!("cluster {:?}: {} inliers{}", c.members, c.total_inliers, if c.noise { " (noise)" } else { "" });
    }
    let (best, order) = select_initial_pose(&clusters, &estimates, &distances).unwrap();
    let (dt, dr) = pose_error(&estimates[best].pose, &truth);
    println!("initial pose from estimate {best}: {dt:.4} m, {dr:.4} deg; re-ranked {order:?}");
}
