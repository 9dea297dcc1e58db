//! Builds a landmark map from posed images and feature tracks, inspects the
//! visible field of a few landmarks, and round-trips the map through the
//! binary format and the text model export.
//!
//! cargo run --example map_building

use ocloc::map::colmap::{ingest_colmap_text, write_colmap_text};
use ocloc::map::format::{decode_map, encode_map};
use ocloc::map::{compute_observation_constraints, BuildConfig};
use ocloc::synthetic::{generate_scene, SceneConfig};
use ocloc::Point3;

fn main() {
    let scene = generate_scene(&SceneConfig { n_landmarks: 300, n_queries: 5, ..SceneConfig::default() }).unwrap();
    let (map, report) = scene.build_map(&BuildConfig::default()).unwrap();
    println!(
        "{} images, {} landmarks kept, {} dropped, mean reprojection error {:.2e} px",
        map.images().len(),
        report.kept,
        report.dropped(),
        report.mean_reproj_err
    );

    for lm in map.landmarks().iter().take(3) {
        let c = &lm.constraints;
        println!(
            "landmark {:>3}: label {} seen by {} images, reach {:.2} m, aperture {:.1} deg",
            lm.id,
            lm.semantic_label,
            lm.track.elements.len(),
            c.max_distance,
            c.max_angle.to_degrees()
        );
    }

    // the cone of a single view is a ray; two orthogonal views open it to 90 degrees
    let x = Point3::origin();
    let one = compute_observation_constraints(&x, &[Point3::new(0.0, 0.0, 3.0)]).unwrap();
    let two = compute_observation_constraints(&x, &[Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)]).unwrap();
    println!("one view: aperture {:.1} deg; two orthogonal views: {:.1} deg", one.max_angle.to_degrees(), two.max_angle.to_degrees());

    let bytes = encode_map(&map);
    let back = decode_map(&bytes).unwrap();
    println!("binary map: {} bytes, round trip equal: {}", bytes.len(), back == map);

    let dir = std::env::temp_dir().join(format!("ocloc-map-example-{}", std::process::id()));
    let points: Vec<Point3> = scene.landmarks.clone();
    write_colmap_text(&dir, &scene.db_images, &scene.tracks, &points).unwrap();
    let model = ingest_colmap_text(&dir).unwrap();
    println!("text model: {} images, {} points", model.images.len(), model.tracks.len());
    let _ = std::fs::remove_dir_all(&dir);
}
