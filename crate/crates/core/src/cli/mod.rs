//! The `ocloc` command line: scene generation, map building, batch
//! localization and evaluation.
//!
//! Exit codes are part of the interface: 0 success, 1 other failure, 2 bad
//! configuration or usage, 3 input that could not be ingested, 4 queries that
//! do not fit the map, 5 evaluation failures.

pub mod config;
pub mod posefile;

use crate::geometry::PinholeCamera;
use crate::map::colmap::{attach_features, feature_file_name, ingest_colmap_text, write_colmap_text};
use crate::map::format::{load_map, save_map};
use crate::map::sidecar::{read_features, write_features, SidecarError};
use crate::map::{build_map, Label, LandmarkMap, QueryImage};
use crate::pipeline::{Localization, LocalizeError, Localizer};
use crate::synthetic::{evaluate, format_triple, Thresholds, INLOC_THRESHOLDS, OUTDOOR_THRESHOLDS};
use crate::synthetic::{add_noise, generate_scene};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use config::RunConfig;
use posefile::{format_pose_file, parse_pose_file, PoseEntry};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INGEST: i32 = 3;
pub const EXIT_PRECONDITION: i32 = 4;
pub const EXIT_EVAL: i32 = 5;

/// File names inside a scene directory.
pub const SPARSE_DIR: &str = "sparse";
pub const FEATURES_DIR: &str = "features";
pub const FEATURES_META: &str = "features.toml";
pub const QUERIES_DIR: &str = "queries";
pub const QUERY_LIST: &str = "list_with_intrinsics.txt";
pub const GT_POSES: &str = "gt_poses.txt";
pub const SCENE_MAP: &str = "scene.ocmap";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "ocloc", version, about = "Visual re-localization against landmark maps with observation constraints")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration entry, e.g. `--set retrieval.k=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random choice (sets run.seed, scene.seed and noise.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-query localization [default: run.workers = 1].
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene: text model, feature sidecars, queries, ground truth and a built map.
    Gen {
        /// Output directory.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Build a map from a text model plus feature sidecars.
    BuildMap {
        /// Scene directory with `sparse/` (or the model files directly), `features/` and `features.toml`.
        input: PathBuf,
        /// Output map file.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Localize every query in a directory against a map.
    Localize {
        /// Map file written by `build-map` or `gen`.
        #[arg(long)]
        map: PathBuf,
        /// Directory with `list_with_intrinsics.txt` and one sidecar per query.
        #[arg(long)]
        queries: PathBuf,
        /// Output pose file.
        #[arg(long, short)]
        out: PathBuf,
        /// JSON-lines log [default: <out>.log.jsonl].
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compare a pose file with ground truth.
    Evaluate {
        /// Estimated poses.
        poses: PathBuf,
        /// Ground-truth poses, same format.
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = ThresholdSet::Outdoor)]
        thresholds: ThresholdSet,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ThresholdSet {
    /// (0.25 m, 2 deg) / (0.5 m, 5 deg) / (5 m, 10 deg)
    Outdoor,
    /// (0.25 m, 10 deg) / (0.5 m, 10 deg) / (5 m, 10 deg)
    Inloc,
}

impl ThresholdSet {
    fn values(self) -> &'static Thresholds {
        match self {
            ThresholdSet::Outdoor => &OUTDOOR_THRESHOLDS,
            ThresholdSet::Inloc => &INLOC_THRESHOLDS,
        }
    }
}

fn command() -> clap::Command {
    Cli::command().after_long_help(format!(
        "Configuration defaults (TOML, any subset may appear in --config):\n\n{}",
        RunConfig::default_toml()
    ))
}

/// Runs the command line with process arguments and returns the exit code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Runs with explicit arguments (the first is the program name).
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_CONFIG;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.extend([format!("run.seed={s}"), format!("scene.seed={s}"), format!("noise.seed={s}")]);
    }
    if let Some(w) = cli.workers {
        overrides.push(format!("run.workers={w}"));
    }
    RunConfig::load(cli.config.as_deref(), &overrides).map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Gen { out } => cmd_gen(&cfg, &out),
        Command::BuildMap { input, out } => cmd_build_map(&cfg, &input, &out),
        Command::Localize { map, queries, out, log } => {
            let log = log.unwrap_or_else(|| default_log_path(&out));
            cmd_localize(&cfg, &map, &queries, &out, &log)
        }
        Command::Evaluate { poses, gt, thresholds, json } => cmd_evaluate(&poses, &gt, thresholds.values(), json),
    }
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn io_err(code: i32, path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::new(code, format!("{}: {e}", path.display()))
}

/// Descriptor dimensions and label names shared by every sidecar of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesMeta {
    pub local_dim: usize,
    pub global_dim: usize,
    #[serde(default)]
    pub palette: BTreeMap<String, String>,
}

impl FeaturesMeta {
    fn palette(&self) -> Result<BTreeMap<Label, String>, String> {
        self.palette
            .iter()
            .map(|(k, v)| k.parse::<Label>().map(|l| (l, v.clone())).map_err(|_| format!("palette key {k:?} is not a label id")))
            .collect()
    }
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let t0 = Instant::now();
    let scene = generate_scene(&cfg.scene).map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?;
    let scene = add_noise(&scene, &cfg.noise);

    let sparse = out.join(SPARSE_DIR);
    write_colmap_text(&sparse, &scene.db_images, &scene.tracks, &scene.landmarks).map_err(io_err(EXIT_OTHER, &sparse))?;

    let feats = out.join(FEATURES_DIR);
    std::fs::create_dir_all(&feats).map_err(io_err(EXIT_OTHER, &feats))?;
    for im in &scene.db_images {
        let p = feats.join(feature_file_name(&im.name));
        write_features(&p, &im.keypoints, &im.global_descriptor)
            .map_err(|e| CliError::new(EXIT_OTHER, format!("{}: {e}", p.display())))?;
    }
    let meta = FeaturesMeta {
        local_dim: cfg.scene.local_dim,
        global_dim: cfg.scene.global_dim,
        palette: scene.palette.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    };
    let meta_path = out.join(FEATURES_META);
    std::fs::write(&meta_path, toml::to_string(&meta).expect("meta serializes")).map_err(io_err(EXIT_OTHER, &meta_path))?;

    let qdir = out.join(QUERIES_DIR);
    std::fs::create_dir_all(&qdir).map_err(io_err(EXIT_OTHER, &qdir))?;
    let mut list = String::new();
    for q in &scene.queries {
        let c = &q.camera;
        list.push_str(&format!("{} PINHOLE {} {} {:?} {:?} {:?} {:?}\n", q.name, c.width, c.height, c.fx, c.fy, c.cx, c.cy));
        let p = qdir.join(feature_file_name(&q.name));
        write_features(&p, &q.keypoints, &q.global_descriptor)
            .map_err(|e| CliError::new(EXIT_OTHER, format!("{}: {e}", p.display())))?;
    }
    let list_path = qdir.join(QUERY_LIST);
    std::fs::write(&list_path, list).map_err(io_err(EXIT_OTHER, &list_path))?;

    let gt: Vec<(String, PoseEntry)> = scene.ground_truth().into_iter().map(|(n, p)| (n, PoseEntry::Pose(p))).collect();
    let gt_path = out.join(GT_POSES);
    std::fs::write(&gt_path, format_pose_file(&gt)).map_err(io_err(EXIT_OTHER, &gt_path))?;

    let (map, report) = scene.build_map(&cfg.build()).map_err(|e| CliError::new(EXIT_OTHER, e.to_string()))?;
    let map_path = out.join(SCENE_MAP);
    save_map(&map, &map_path).map_err(|e| CliError::new(EXIT_OTHER, format!("{}: {e}", map_path.display())))?;
    println!(
        "generated {} landmarks, {} database images, {} queries; map keeps {} landmarks",
        scene.landmarks.len(),
        scene.db_images.len(),
        scene.queries.len(),
        report.kept
    );
    log::info!("gen finished in {:.2?}", t0.elapsed());
    Ok(())
}

pub fn cmd_build_map(cfg: &RunConfig, input: &Path, out: &Path) -> CliResult<()> {
    let ingest = |m: String| CliError::new(EXIT_INGEST, m);
    let sparse = if input.join(SPARSE_DIR).is_dir() { input.join(SPARSE_DIR) } else { input.to_path_buf() };
    let meta_path = input.join(FEATURES_META);
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| ingest(format!("{}: {e}", meta_path.display())))?;
    let meta: FeaturesMeta = toml::from_str(&meta_text).map_err(|e| ingest(format!("{}: {e}", meta_path.display())))?;
    let palette = meta.palette().map_err(ingest)?;

    let mut model = ingest_colmap_text(&sparse).map_err(|e| ingest(e.to_string()))?;
    attach_features(&mut model.images, &input.join(FEATURES_DIR), meta.local_dim, meta.global_dim)
        .map_err(|e| ingest(e.to_string()))?;
    let n_images = model.images.len();
    let n_tracks = model.tracks.len();
    let (map, report) = build_map(model.images, &model.tracks, palette, &cfg.build()).map_err(|e| ingest(e.to_string()))?;
    save_map(&map, out).map_err(|e| CliError::new(EXIT_OTHER, format!("{}: {e}", out.display())))?;
    println!("images: {n_images}");
    println!("tracks: {n_tracks}");
    println!("landmarks kept: {}", report.kept);
    println!(
        "landmarks dropped: {} (short track {}, degenerate {}, behind camera {}, reprojection {})",
        report.dropped(),
        report.dropped_too_short,
        report.dropped_degenerate,
        report.dropped_cheirality,
        report.dropped_reprojection
    );
    println!("mean reprojection error: {:.4} px", report.mean_reproj_err);
    Ok(())
}

/// Parses `name MODEL w h params...` lines. PINHOLE, SIMPLE_PINHOLE, and the
/// radial models (distortion ignored) are accepted.
pub fn parse_query_list(text: &str) -> Result<Vec<(String, PinholeCamera)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: &str| format!("line {}: {m}", i + 1);
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 5 {
            return Err(err("expected name MODEL width height params..."));
        }
        let nums: Vec<f64> = f[2..].iter().map(|s| s.parse().map_err(|_| err("non-numeric field"))).collect::<Result<_, _>>()?;
        let (w, h) = (nums[0], nums[1]);
        if w < 1.0 || h < 1.0 || w.fract() != 0.0 || h.fract() != 0.0 {
            return Err(err("bad image size"));
        }
        let p = &nums[2..];
        let (fx, fy, cx, cy) = match f[1] {
            "PINHOLE" if p.len() == 4 => (p[0], p[1], p[2], p[3]),
            "SIMPLE_PINHOLE" | "SIMPLE_RADIAL" | "RADIAL" if p.len() >= 3 => (p[0], p[0], p[1], p[2]),
            m => return Err(err(&format!("unsupported camera model {m} or wrong parameter count"))),
        };
        let cam = PinholeCamera::new(fx, fy, cx, cy, w as u32, h as u32);
        if !cam.is_valid() {
            return Err(err("invalid intrinsics"));
        }
        out.push((f[0].to_string(), cam));
    }
    Ok(out)
}

/// Reads every query listed in `dir`, sorted by name.
pub fn read_queries(dir: &Path, map: &LandmarkMap) -> CliResult<Vec<QueryImage>> {
    let list_path = dir.join(QUERY_LIST);
    let text = std::fs::read_to_string(&list_path).map_err(io_err(EXIT_INGEST, &list_path))?;
    let mut list = parse_query_list(&text).map_err(|m| CliError::new(EXIT_INGEST, format!("{}: {m}", list_path.display())))?;
    list.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(w) = list.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(CliError::new(EXIT_INGEST, format!("query {:?} listed twice", w[0].0)));
    }
    list.into_iter()
        .map(|(name, camera)| {
            let p = dir.join(feature_file_name(&name));
            let feats = read_features(&p, map.local_dim(), map.global_dim()).map_err(|e| {
                let code = match e {
                    SidecarError::Io(_) | SidecarError::BadMagic => EXIT_INGEST,
                    _ => EXIT_PRECONDITION,
                };
                CliError::new(
                    code,
                    format!(
                        "{}: {e} (map has local_dim {}, global_dim {})",
                        p.display(),
                        map.local_dim(),
                        map.global_dim()
                    ),
                )
            })?;
            Ok(QueryImage { name, camera, keypoints: feats.keypoints, global_descriptor: feats.global_descriptor })
        })
        .collect()
}

/// Per-query seed: depends on the run seed and the query name only, so results
/// do not change with worker count or with which other queries are present.
pub fn query_seed(run_seed: u64, name: &str) -> u64 {
    run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ u64::from(crc32fast::hash(name.as_bytes()))
}

#[derive(Debug, Serialize)]
struct LogLine<'a> {
    name: &'a str,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<&'a str>,
    initial_inliers: Option<usize>,
    inliers: Option<usize>,
    rounds: Option<usize>,
    stop: Option<&'a str>,
    sigma_t: Option<f64>,
    sigma_r: Option<f64>,
    /// Accepted (sigma_t, sigma_r) per round.
    trace: Vec<(f64, f64)>,
    retrieved: Vec<u32>,
}

fn log_line(name: &str, res: &Result<Localization, LocalizeError>) -> String {
    let line = match res {
        Ok(loc) => {
            let est = loc.estimate();
            let refinement = loc.refinement.as_ref();
            LogLine {
                name,
                status: "ok",
                reason: None,
                initial_inliers: Some(loc.initial.inliers.len()),
                inliers: Some(est.inliers.len()),
                rounds: refinement.map(|r| r.rounds),
                stop: refinement.map(|r| r.stop.as_str()),
                sigma_t: est.uncertainty.map(|u| u.sigma_t),
                sigma_r: est.uncertainty.map(|u| u.sigma_r),
                trace: refinement.map_or_else(Vec::new, |r| r.trace.iter().map(|u| (u.sigma_t, u.sigma_r)).collect()),
                retrieved: loc.ranked_images.clone(),
            }
        }
        Err(e) => LogLine {
            name,
            status: "failed",
            reason: Some(e.reason()),
            initial_inliers: None,
            inliers: None,
            rounds: None,
            stop: None,
            sigma_t: None,
            sigma_r: None,
            trace: Vec::new(),
            retrieved: Vec::new(),
        },
    };
    serde_json::to_string(&line).expect("log line serializes")
}

pub fn cmd_localize(cfg: &RunConfig, map_path: &Path, queries: &Path, out: &Path, log_path: &Path) -> CliResult<()> {
    let map = load_map(map_path).map_err(|e| CliError::new(EXIT_INGEST, format!("{}: {e}", map_path.display())))?;
    let queries = read_queries(queries, &map)?;
    let localizer = Localizer::new(&map, cfg.localizer()).map_err(|e| CliError::new(EXIT_PRECONDITION, e.to_string()))?;
    for q in &queries {
        localizer.check_query(q).map_err(|e| CliError::new(EXIT_PRECONDITION, e.to_string()))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.workers)
        .build()
        .map_err(|e| CliError::new(EXIT_OTHER, e.to_string()))?;
    let t0 = Instant::now();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let total = queries.len();
    let results: Vec<Result<Localization, LocalizeError>> = pool.install(|| {
        queries
            .par_iter()
            .map(|q| {
                let r = localizer.localize(q, query_seed(cfg.run.seed, &q.name));
                let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                log::info!("{n}/{total} {}", q.name);
                r
            })
            .collect()
    });

    let mut entries = Vec::with_capacity(total);
    let mut log_text = String::new();
    let mut failed = 0;
    for (q, r) in queries.iter().zip(&results) {
        log_text.push_str(&log_line(&q.name, r));
        log_text.push('\n');
        entries.push((
            q.name.clone(),
            match r {
                Ok(loc) => PoseEntry::Pose(loc.estimate().pose),
                Err(e) => {
                    failed += 1;
                    PoseEntry::Failed(e.reason().to_string())
                }
            },
        ));
    }
    std::fs::write(out, format_pose_file(&entries)).map_err(io_err(EXIT_OTHER, out))?;
    std::fs::write(log_path, log_text).map_err(io_err(EXIT_OTHER, log_path))?;
    log::info!("localized {} of {total} queries in {:.2?}", total - failed, t0.elapsed());
    eprintln!("localized {}/{total} queries, {failed} failed", total - failed);
    Ok(())
}

/// Reads a pose file; failure lines are dropped (they count as missing).
pub fn read_pose_file(path: &Path) -> CliResult<Vec<(String, crate::geometry::Pose)>> {
    let text = std::fs::read_to_string(path).map_err(io_err(EXIT_EVAL, path))?;
    let entries = parse_pose_file(&text).map_err(|e| CliError::new(EXIT_EVAL, format!("{}: {e}", path.display())))?;
    Ok(entries
        .into_iter()
        .filter_map(|(n, e)| match e {
            PoseEntry::Pose(p) => Some((n, p)),
            PoseEntry::Failed(_) => None,
        })
        .collect())
}

pub fn cmd_evaluate(poses: &Path, gt: &Path, thresholds: &Thresholds, json: bool) -> CliResult<()> {
    let results = read_pose_file(poses)?;
    let mut truth = BTreeMap::new();
    for (name, p) in read_pose_file(gt)? {
        if truth.insert(name.clone(), p).is_some() {
            return Err(CliError::new(EXIT_EVAL, format!("{}: query {name:?} appears twice", gt.display())));
        }
    }
    let report = evaluate(&results, &truth, thresholds).map_err(|e| CliError::new(EXIT_EVAL, e.to_string()))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        let th: Vec<String> = thresholds.iter().map(|(m, d)| format!("({m}m, {d}deg)")).collect();
        println!("thresholds: {}", th.join(" / "));
        println!("accuracy: {}", format_triple(&report.accuracy));
        println!("median translation error: {} m", report.median_trans);
        println!("median rotation error: {} deg", report.median_rot);
        println!("localized: {} / {}", results.len(), truth.len());
    }
    Ok(())
}
