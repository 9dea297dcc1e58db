//! Deterministic synthetic scenes with known correspondences, noise injection,
//! brute-force reference implementations and accuracy evaluation.

mod eval;
pub mod oracle;

pub use eval::{evaluate, format_triple, parse_triple, EvalError, EvalReport, Thresholds, INLOC_THRESHOLDS, OUTDOOR_THRESHOLDS};

use crate::geometry::{PinholeCamera, Pixel, Point3, Pose, Vec3};
use crate::map::{build_map, BuildConfig, BuildError, BuildReport, ImageRecord, Keypoint, Label, LandmarkMap, QueryImage, Track, TrackElement};
use nalgebra::{DMatrix, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_landmarks: usize,
    pub n_db_images: usize,
    pub n_queries: usize,
    /// Side of the cube the landmarks are drawn from, meters.
    pub extent: f64,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    pub local_dim: usize,
    pub global_dim: usize,
    pub n_semantic_classes: u16,
    pub seed: u64,
    /// Database cameras orbit at this multiple of `extent` from the center.
    pub ring_radius_factor: f64,
    /// A landmark is seen only by cameras within this angle of its surface normal, degrees.
    pub surface_half_angle_deg: f64,
    /// Radius of the random displacement of a query from the orbit, meters.
    pub query_offset: f64,
    /// Maximum extra rotation applied to a query camera, degrees.
    pub query_rotation_deg: f64,
    pub min_covisible: usize,
    /// Landmarks come in spatially close pairs with different labels whose
    /// descriptors share this much of a common component, in `[0, 1)`.
    pub descriptor_ambiguity: f64,
    /// Cell size used when encoding a pose into a global descriptor, meters.
    pub pose_cell: f64,
    pub global_noise: f64,
    /// Database focal length as a multiple of `focal`; above 1 each database
    /// image covers only part of what a query sees.
    pub db_focal_scale: f64,
    /// Database cameras aim at a random point within this fraction of `extent` of the center.
    pub db_target_jitter: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_landmarks: 200,
            n_db_images: 20,
            n_queries: 50,
            extent: 10.0,
            focal: 500.0,
            width: 640,
            height: 480,
            local_dim: 32,
            global_dim: 64,
            n_semantic_classes: 8,
            seed: 0,
            ring_radius_factor: 2.0,
            surface_half_angle_deg: 60.0,
            query_offset: 1.0,
            query_rotation_deg: 3.0,
            min_covisible: 30,
            descriptor_ambiguity: 0.0,
            pose_cell: 1.0,
            global_noise: 0.01,
            db_focal_scale: 1.0,
            db_target_jitter: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn camera(&self) -> PinholeCamera {
        PinholeCamera::new(self.focal, self.focal, self.width as f64 / 2.0, self.height as f64 / 2.0, self.width, self.height)
    }

    pub fn db_camera(&self) -> PinholeCamera {
        let f = self.focal * self.db_focal_scale;
        PinholeCamera::new(f, f, self.width as f64 / 2.0, self.height as f64 / 2.0, self.width, self.height)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Config(m.to_string()));
        if !(self.db_focal_scale > 0.0) || !(self.db_target_jitter >= 0.0) {
            return bad("db_focal_scale must be positive and db_target_jitter non-negative");
        }
        if self.n_landmarks == 0 || self.n_db_images < 2 || self.n_queries == 0 {
            return bad("need n_landmarks >= 1, n_db_images >= 2, n_queries >= 1");
        }
        if !(self.extent > 0.0) || !(self.focal > 0.0) || self.width == 0 || self.height == 0 {
            return bad("extent, focal and image size must be positive");
        }
        if self.local_dim == 0 || self.global_dim < 8 {
            return bad("need local_dim >= 1 and global_dim >= 8");
        }
        if self.n_semantic_classes == 0 {
            return bad("need at least one semantic class");
        }
        if !(self.ring_radius_factor > 0.5) {
            return bad("ring_radius_factor must exceed 0.5 so cameras sit outside the landmark box");
        }
        if !(self.surface_half_angle_deg > 0.0 && self.surface_half_angle_deg <= 90.0) {
            return bad("surface_half_angle_deg must be in (0, 90]");
        }
        if !(0.0..1.0).contains(&self.descriptor_ambiguity) {
            return bad("descriptor_ambiguity must be in [0, 1)");
        }
        if !(self.pose_cell > 0.0) || !(self.global_noise >= 0.0) || !(self.query_offset >= 0.0) {
            return bad("pose_cell must be positive, global_noise and query_offset non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub pixel_sigma: f64,
    pub descriptor_sigma: f64,
    pub label_flip_rate: f64,
    /// Fraction of query keypoints moved to a random pixel.
    pub outlier_match_rate: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { pixel_sigma: 0.0, descriptor_sigma: 0.0, label_flip_rate: 0.0, outlier_match_rate: 0.0, seed: 0 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.pixel_sigma >= 0.0 && self.descriptor_sigma >= 0.0) {
            return Err(SceneError::Config("noise sigmas must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.label_flip_rate) || !(0.0..1.0).contains(&self.outlier_match_rate) {
            return Err(SceneError::Config("label_flip_rate must be in [0, 1], outlier_match_rate in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("could not place {what} after {MAX_ATTEMPTS} attempts")]
    Unsatisfiable { what: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    /// Ground-truth landmark positions; landmark id = index.
    pub landmarks: Vec<Point3>,
    pub labels: Vec<Label>,
    pub db_images: Vec<ImageRecord>,
    /// One track per landmark, in landmark order.
    pub tracks: Vec<Track>,
    pub queries: Vec<QueryImage>,
    pub query_poses: Vec<Pose>,
    /// Landmark behind every query keypoint, `None` for injected outliers.
    pub query_truth: Vec<Vec<Option<u64>>>,
    pub palette: BTreeMap<Label, String>,
}

impl SyntheticScene {
    /// Triangulates the database observations into a map.
    pub fn build_map(&self, cfg: &BuildConfig) -> Result<(LandmarkMap, BuildReport), BuildError> {
        build_map(self.db_images.clone(), &self.tracks, self.palette.clone(), cfg)
    }

    pub fn ground_truth(&self) -> BTreeMap<String, Pose> {
        self.queries.iter().zip(&self.query_poses).map(|(q, p)| (q.name.clone(), *p)).collect()
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalized_f32(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

/// Whether a camera sees a surface point: within the surface cone, in front, inside the image.
fn observes(cam: &PinholeCamera, pose: &Pose, x: &Point3, normal: &Vec3, cos_half: f64) -> Option<Pixel> {
    let to_cam = (pose.center() - x).normalize();
    if to_cam.dot(normal) < cos_half {
        return None;
    }
    cam.project_camera_point(&pose.transform(x)).filter(|p| cam.contains(p))
}

fn random_rotation(rng: &mut ChaCha8Rng, max_deg: f64) -> UnitQuaternion<f64> {
    if max_deg <= 0.0 {
        return UnitQuaternion::identity();
    }
    let axis = Vec3::from_iterator(unit_vector(rng, 3));
    UnitQuaternion::from_scaled_axis(axis * rng.random_range(0.0..max_deg).to_radians())
}

/// Linear encoding of a quantized pose, shared by database and queries.
struct PoseEncoder {
    basis: DMatrix<f64>,
    cell: f64,
    extent: f64,
}

impl PoseEncoder {
    fn new(rng: &mut ChaCha8Rng, dim: usize, cell: f64, extent: f64) -> Self {
        let raw = DMatrix::<f64>::from_fn(dim, 7, |_, _| StandardNormal.sample(rng));
        let basis = raw.qr().q();
        Self { basis, cell, extent }
    }

    fn encode(&self, pose: &Pose, rng: &mut ChaCha8Rng, noise: f64) -> Vec<f32> {
        let c = pose.center();
        let d = pose.viewing_direction();
        let q = |x: f64, s: f64| (x / s).round() * s;
        let f = nalgebra::DVector::from_vec(vec![
            2.0,
            q(c.x, self.cell) / self.extent,
            q(c.y, self.cell) / self.extent,
            q(c.z, self.cell) / self.extent,
            q(d.x, 0.05),
            q(d.y, 0.05),
            q(d.z, 0.05),
        ]);
        let mut g: Vec<f64> = (&self.basis * f).iter().copied().collect();
        if noise > 0.0 {
            for x in &mut g {
                let e: f64 = StandardNormal.sample(rng);
                *x += noise * e;
            }
        }
        normalized_f32(&g)
    }
}

/// Builds a scene: landmarks in a cube, database cameras on a jittered orbit
/// looking at the center, queries near the orbit with enough covisible landmarks.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cam = cfg.camera();
    let db_cam = cfg.db_camera();
    let radius = cfg.ring_radius_factor * cfg.extent;
    let half = cfg.extent / 2.0;
    let cos_half = cfg.surface_half_angle_deg.to_radians().cos();
    let up = Vec3::new(0.0, -1.0, 0.0);
    let spacing = std::f64::consts::TAU / cfg.n_db_images as f64;

    let ring_point = |rng: &mut ChaCha8Rng, angle: f64| {
        Point3::new(
            radius * angle.cos(),
            rng.random_range(-0.05..0.05) * cfg.extent,
            radius * angle.sin(),
        )
    };

    let mut db_poses = Vec::with_capacity(cfg.n_db_images);
    for i in 0..cfg.n_db_images {
        let angle = i as f64 * spacing + rng.random_range(-0.2..0.2) * spacing;
        let eye = ring_point(&mut rng, angle);
        let j = cfg.db_target_jitter * cfg.extent;
        let target = if j > 0.0 {
            Point3::new(rng.random_range(-j..j), rng.random_range(-j..j), rng.random_range(-j..j))
        } else {
            Point3::origin()
        };
        db_poses.push(Pose::look_at(&eye, &target, &up));
    }

    let classes = cfg.n_semantic_classes;
    let paired = cfg.descriptor_ambiguity > 0.0;
    let mut landmarks: Vec<Point3> = Vec::with_capacity(cfg.n_landmarks);
    let mut normals: Vec<Vec3> = Vec::with_capacity(cfg.n_landmarks);
    let mut labels: Vec<Label> = Vec::with_capacity(cfg.n_landmarks);
    let mut descriptors: Vec<Vec<f32>> = Vec::with_capacity(cfg.n_landmarks);
    let observers_of = |x: &Point3, n: &Vec3| db_poses.iter().filter(|p| observes(&db_cam, p, x, n, cos_half).is_some()).count();
    while landmarks.len() < cfg.n_landmarks {
        let group = if paired { 2.min(cfg.n_landmarks - landmarks.len()) } else { 1 };
        let mut attempts = 0;
        let (points, normal) = loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(SceneError::Unsatisfiable { what: format!("landmark {}", landmarks.len()) });
            }
            let x = Point3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half));
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let facing = ring_point(&mut rng, angle);
            let normal = ((facing - x).normalize() + Vec3::from_iterator(unit_vector(&mut rng, 3)) * 0.1).normalize();
            let mut pts = vec![x];
            if group == 2 {
                let off = Vec3::from_iterator(unit_vector(&mut rng, 3)) * (0.02 * cfg.extent);
                pts.push(x + off);
            }
            if pts.iter().all(|p| observers_of(p, &normal) >= 2) {
                break (pts, normal);
            }
        };
        let shared = unit_vector(&mut rng, cfg.local_dim);
        let a = cfg.descriptor_ambiguity;
        let first_label: Label = rng.random_range(1..=classes);
        for (k, p) in points.into_iter().enumerate() {
            let unique = unit_vector(&mut rng, cfg.local_dim);
            let d: Vec<f64> = if group == 2 {
                shared.iter().zip(&unique).map(|(s, u)| a * s + (1.0 - a * a).sqrt() * u).collect()
            } else {
                unique
            };
            let label = if k == 0 || classes == 1 {
                first_label
            } else {
                // any class other than the twin's
                let l: Label = rng.random_range(1..classes);
                if l >= first_label { l + 1 } else { l }
            };
            landmarks.push(p);
            normals.push(normal);
            labels.push(label);
            descriptors.push(normalized_f32(&d));
        }
    }

    let encoder = PoseEncoder::new(&mut rng, cfg.global_dim, cfg.pose_cell, cfg.extent);
    let mut tracks: Vec<Track> = (0..landmarks.len()).map(|_| Track::new(Vec::new())).collect();
    let mut db_images = Vec::with_capacity(cfg.n_db_images);
    for (i, pose) in db_poses.iter().enumerate() {
        let id = i as u32 + 1;
        let mut keypoints = Vec::new();
        for (l, x) in landmarks.iter().enumerate() {
            if let Some(px) = observes(&db_cam, pose, x, &normals[l], cos_half) {
                tracks[l].elements.push(TrackElement { image_id: id, keypoint: keypoints.len() as u32 });
                keypoints.push(Keypoint { px, descriptor: descriptors[l].clone(), semantic_label: labels[l], score: 1.0 });
            }
        }
        db_images.push(ImageRecord {
            id,
            name: format!("db_{i:05}"),
            camera: db_cam,
            pose: *pose,
            keypoints,
            global_descriptor: encoder.encode(pose, &mut rng, cfg.global_noise),
        });
    }

    let mut queries = Vec::with_capacity(cfg.n_queries);
    let mut query_poses = Vec::with_capacity(cfg.n_queries);
    let mut query_truth = Vec::with_capacity(cfg.n_queries);
    for qi in 0..cfg.n_queries {
        let mut attempts = 0;
        let (pose, seen) = loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(SceneError::Unsatisfiable { what: format!("query {qi} with {} covisible landmarks", cfg.min_covisible) });
            }
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let eye = ring_point(&mut rng, angle)
                + Vec3::from_iterator(unit_vector(&mut rng, 3)) * rng.random_range(0.0..=cfg.query_offset);
            let base = Pose::look_at(&eye, &Point3::origin(), &up);
            let pose = Pose::from_rotation_center(random_rotation(&mut rng, cfg.query_rotation_deg) * base.rotation, &eye);
            let seen: Vec<(usize, Pixel)> = landmarks
                .iter()
                .enumerate()
                .filter_map(|(l, x)| observes(&cam, &pose, x, &normals[l], cos_half).map(|p| (l, p)))
                .collect();
            if seen.len() >= cfg.min_covisible {
                break (pose, seen);
            }
        };
        let keypoints = seen
            .iter()
            .map(|&(l, px)| Keypoint { px, descriptor: descriptors[l].clone(), semantic_label: labels[l], score: 1.0 })
            .collect();
        queries.push(QueryImage {
            name: format!("query_{qi:05}"),
            camera: cam,
            keypoints,
            global_descriptor: encoder.encode(&pose, &mut rng, cfg.global_noise),
        });
        query_truth.push(seen.iter().map(|&(l, _)| Some(l as u64)).collect());
        query_poses.push(pose);
    }

    let palette = (1..=classes).map(|c| (c, format!("class_{c}"))).collect();
    Ok(SyntheticScene {
        config: cfg.clone(),
        landmarks,
        labels,
        db_images,
        tracks,
        queries,
        query_poses,
        query_truth,
        palette,
    })
}

fn jitter_descriptor(d: &mut [f32], sigma: f64, rng: &mut ChaCha8Rng) {
    let v: Vec<f64> = d
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(rng);
            x as f64 + sigma * e
        })
        .collect();
    d.copy_from_slice(&normalized_f32(&v));
}

fn flip_label(label: Label, classes: u16, rng: &mut ChaCha8Rng) -> Label {
    if classes < 2 {
        return label;
    }
    let l: Label = rng.random_range(1..classes);
    if label == 0 || l < label { l } else { l + 1 }
}

/// Applies pixel, descriptor and label noise to every keypoint, and moves a
/// fraction of query keypoints to random pixels. A zero config changes nothing.
pub fn add_noise(scene: &SyntheticScene, noise: &NoiseConfig) -> SyntheticScene {
    let mut out = scene.clone();
    let classes = scene.config.n_semantic_classes;
    let mut pix_rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut desc_rng = ChaCha8Rng::seed_from_u64(noise.seed ^ 0xD35C);
    let mut label_rng = ChaCha8Rng::seed_from_u64(noise.seed ^ 0x1AB3);
    let mut outlier_rng = ChaCha8Rng::seed_from_u64(noise.seed ^ 0x0071);

    let mut perturb = |kp: &mut Keypoint| {
        if noise.pixel_sigma > 0.0 {
            let (ex, ey): (f64, f64) = (StandardNormal.sample(&mut pix_rng), StandardNormal.sample(&mut pix_rng));
            kp.px.x += noise.pixel_sigma * ex;
            kp.px.y += noise.pixel_sigma * ey;
        }
        if noise.descriptor_sigma > 0.0 {
            jitter_descriptor(&mut kp.descriptor, noise.descriptor_sigma, &mut desc_rng);
        }
        if noise.label_flip_rate > 0.0 && label_rng.random_bool(noise.label_flip_rate) {
            kp.semantic_label = flip_label(kp.semantic_label, classes, &mut label_rng);
        }
    };
    for im in &mut out.db_images {
        im.keypoints.iter_mut().for_each(&mut perturb);
    }
    for q in &mut out.queries {
        q.keypoints.iter_mut().for_each(&mut perturb);
    }
    if noise.outlier_match_rate > 0.0 {
        for (q, truth) in out.queries.iter_mut().zip(&mut out.query_truth) {
            for (kp, t) in q.keypoints.iter_mut().zip(truth.iter_mut()) {
                if outlier_rng.random_bool(noise.outlier_match_rate) {
                    kp.px = Pixel::new(
                        outlier_rng.random_range(0.0..q.camera.width as f64),
                        outlier_rng.random_range(0.0..q.camera.height as f64),
                    );
                    *t = None;
                }
            }
        }
    }
    out
}
