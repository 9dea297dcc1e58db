//! Full pipeline on a synthetic scene, scored with the benchmark thresholds.
//!
//! cargo run --release --example end_to_end

use ocloc::map::BuildConfig;
use ocloc::synthetic::{add_noise, evaluate, generate_scene, NoiseConfig, SceneConfig, OUTDOOR_THRESHOLDS};
use ocloc::{Localizer, LocalizerConfig};
use std::time::Instant;

fn main() {
    let scene = generate_scene(&SceneConfig::default()).unwrap();
    for sigma in [0.0, 1.0, 3.0] {
        let noisy = add_noise(&scene, &NoiseConfig { pixel_sigma: sigma, ..NoiseConfig::default() });
        let (map, _) = noisy.build_map(&BuildConfig { max_reproj_px: 4.0 + 3.0 * sigma }).unwrap();
        let localizer = Localizer::new(&map, LocalizerConfig::default()).unwrap();
        let t0 = Instant::now();
        let results: Vec<(String, ocloc::Pose)> = noisy
            .queries
            .iter()
            .enumerate()
            .filter_map(|(i, q)| localizer.localize(q, i as u64).ok().map(|l| (q.name.clone(), l.estimate().pose)))
            .collect();
        let elapsed = t0.elapsed();
        let report = evaluate(&results, &noisy.ground_truth(), &OUTDOOR_THRESHOLDS).unwrap();
        println!(
            "pixel noise {sigma:.1}: {}  median {:.4} m / {:.4} deg  ({} queries in {:.0?})",
            report.triple(),
            report.median_trans,
            report.median_rot,
            noisy.queries.len(),
            elapsed
        );
    }
}
