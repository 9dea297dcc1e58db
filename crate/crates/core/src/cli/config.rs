//! Run configuration: one TOML file with a section per stage. Every key has a
//! default, unknown keys are rejected, and `--set section.key=value` overrides
//! any entry.

use crate::map::BuildConfig;
use crate::pipeline::LocalizerConfig;
use crate::pnp::{MatchConfig, PnpConfig};
use crate::refiner::RefinerConfig;
use crate::retrieval::RetrievalConfig;
use crate::synthetic::{NoiseConfig, SceneConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub k: usize,
    pub eps: f64,
    pub min_pts: usize,
    pub min_matches: usize,
    /// 0 disables PCA.
    pub pca_dim: usize,
    pub ratio: f64,
    pub mutual: bool,
    pub use_semantic: bool,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        let r = RetrievalConfig::default();
        Self {
            k: r.k,
            eps: r.eps,
            min_pts: r.min_pts,
            min_matches: r.min_matches,
            pca_dim: 0,
            ratio: r.matching.ratio,
            mutual: r.matching.mutual,
            use_semantic: r.matching.use_semantic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PnpSection {
    pub inlier_px: f64,
    pub confidence: f64,
    pub max_iters: usize,
    pub min_inliers: usize,
}

impl Default for PnpSection {
    fn default() -> Self {
        let p = PnpConfig::default();
        Self { inlier_px: p.inlier_px, confidence: p.confidence, max_iters: p.max_iters, min_inliers: p.min_inliers }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerSection {
    pub enabled: bool,
    pub reproj_threshold_px: f64,
    pub distance_slack: f64,
    pub angle_slack: f64,
    pub mc_fractions: Vec<f64>,
    pub mc_trials: usize,
    pub max_rounds: usize,
    pub ratio: f64,
    pub use_semantic: bool,
}

impl Default for RefinerSection {
    fn default() -> Self {
        let r = RefinerConfig::default();
        Self {
            enabled: true,
            reproj_threshold_px: r.reproj_threshold_px,
            distance_slack: r.distance_slack,
            angle_slack: r.angle_slack,
            mc_fractions: r.mc_fractions,
            mc_trials: r.mc_trials,
            max_rounds: r.max_rounds,
            ratio: r.ratio,
            use_semantic: r.use_semantic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSection {
    pub max_reproj_px: f64,
}

impl Default for MapSection {
    fn default() -> Self {
        Self { max_reproj_px: BuildConfig::default().max_reproj_px }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, workers: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub noise: NoiseConfig,
    pub retrieval: RetrievalSection,
    pub pnp: PnpSection,
    pub refiner: RefinerSection,
    pub map: MapSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl RunConfig {
    /// The defaults as TOML, as shown by `--help`.
    pub fn default_toml() -> String {
        toml::to_string(&RunConfig::default()).expect("default config serializes")
    }

    /// Reads `path` (if any), applies `section.key=value` overrides, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        self.scene.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.noise.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.refiner().validate().map_err(|e| ConfigError(e.to_string()))?;
        let r = &self.retrieval;
        if r.k == 0 || r.min_pts == 0 || !(r.eps > 0.0) {
            return err("retrieval: need k >= 1, min_pts >= 1, eps > 0".into());
        }
        if !(r.ratio > 0.0 && r.ratio <= 1.0) {
            return err("retrieval.ratio must be in (0, 1]".into());
        }
        let p = &self.pnp;
        if !(p.inlier_px > 0.0) || !(p.confidence > 0.0 && p.confidence < 1.0) || p.max_iters == 0 {
            return err("pnp: need inlier_px > 0, confidence in (0, 1), max_iters >= 1".into());
        }
        if !(self.map.max_reproj_px > 0.0) {
            return err("map.max_reproj_px must be positive".into());
        }
        if self.run.workers == 0 {
            return err("run.workers must be >= 1".into());
        }
        Ok(())
    }

    pub fn pnp(&self) -> PnpConfig {
        PnpConfig {
            inlier_px: self.pnp.inlier_px,
            confidence: self.pnp.confidence,
            max_iters: self.pnp.max_iters,
            min_inliers: self.pnp.min_inliers,
            seed: self.run.seed,
        }
    }

    pub fn refiner(&self) -> RefinerConfig {
        let r = &self.refiner;
        RefinerConfig {
            reproj_threshold_px: r.reproj_threshold_px,
            distance_slack: r.distance_slack,
            angle_slack: r.angle_slack,
            mc_fractions: r.mc_fractions.clone(),
            mc_trials: r.mc_trials,
            max_rounds: r.max_rounds,
            ratio: r.ratio,
            use_semantic: r.use_semantic,
            pnp: self.pnp(),
            seed: self.run.seed,
        }
    }

    pub fn localizer(&self) -> LocalizerConfig {
        let r = &self.retrieval;
        LocalizerConfig {
            retrieval: RetrievalConfig {
                k: r.k,
                eps: r.eps,
                min_pts: r.min_pts,
                min_matches: r.min_matches,
                pca_dim: (r.pca_dim > 0).then_some(r.pca_dim),
                matching: MatchConfig { ratio: r.ratio, use_semantic: r.use_semantic, mutual: r.mutual },
                pnp: self.pnp(),
            },
            refiner: self.refiner(),
            refine: self.refiner.enabled,
        }
    }

    pub fn build(&self) -> BuildConfig {
        BuildConfig { max_reproj_px: self.map.max_reproj_px }
    }
}

fn apply_override(table: &mut toml::Table, entry: &str) -> Result<(), ConfigError> {
    let (key, value) = entry
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override {entry:?} is not of the form section.key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.len() != 2 || path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError(format!("override key {key:?} must be section.key")));
    }
    // TOML literal if it parses as one, else a bare string
    let parsed: toml::Value = format!("v = {}", value.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.trim().to_string()));
    let section = table
        .entry(path[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
        .ok_or_else(|| ConfigError(format!("{} is not a section", path[0])))?;
    section.insert(path[1].to_string(), parsed);
    Ok(())
}
