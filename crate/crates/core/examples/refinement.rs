//! Observation-constrained refinement on a scene where the database only
//! covers part of what each query sees. The retrieval pose is compared with
//! refinement without and with semantic labels.
//!
//! cargo run --release --example refinement

use ocloc::geometry::pose_error;
use ocloc::map::BuildConfig;
use ocloc::refiner::{refine_iteratively, RefinerConfig};
use ocloc::synthetic::{add_noise, generate_scene, NoiseConfig, SceneConfig};
use ocloc::{Localizer, LocalizerConfig};

fn main() {
    let scene_cfg = SceneConfig {
        n_landmarks: 1000,
        n_db_images: 60,
        n_queries: 10,
        descriptor_ambiguity: 0.97,
        db_focal_scale: 3.5,
        db_target_jitter: 0.35,
        ..SceneConfig::default()
    };
    let scene = generate_scene(&scene_cfg).unwrap();
    let scene = add_noise(&scene, &NoiseConfig { pixel_sigma: 1.0, descriptor_sigma: 0.05, ..NoiseConfig::default() });
    let (map, _) = scene.build_map(&BuildConfig::default()).unwrap();
    let localizer = Localizer::new(&map, LocalizerConfig { refine: false, ..LocalizerConfig::default() }).unwrap();

    println!("{:<12} {:>10} {:>10} {:>10}  rounds  stop", "query", "baseline", "w/o sem", "w/ sem");
    for (i, (q, truth)) in scene.queries.iter().zip(&scene.query_poses).enumerate() {
        let Ok(loc) = localizer.localize(q, i as u64) else {
            println!("{:<12} no initial pose", q.name);
            continue;
        };
        let err = |p| pose_error(p, truth).0;
        let run = |use_semantic| {
            let cfg = RefinerConfig { use_semantic, seed: i as u64, ..RefinerConfig::default() };
            refine_iteratively(&loc.initial, q, &map, &cfg)
        };
        let (plain, sem) = (run(false), run(true));
        println!(
            "{:<12} {:>10.4} {:>10.4} {:>10.4}  {:>6}  {}",
            q.name,
            err(&loc.initial.pose),
            err(&plain.estimate.pose),
            err(&sem.estimate.pose),
            sem.rounds,
            sem.stop.as_str()
        );
        for (r, u) in sem.trace.iter().enumerate() {
            println!("{:>14} round {}: sigma_t {:.4} m, sigma_r {:.4} deg", "", r + 1, u.sigma_t, u.sigma_r);
        }
    }
}
