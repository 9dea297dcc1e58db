//! End-to-end localization of one query: retrieval and FM-PnP for an initial
//! pose, then observation-constrained refinement.

use crate::map::{LandmarkMap, QueryImage};
use crate::pnp::PoseEstimate;
use crate::refiner::{refine_iteratively, RefineResult, RefinerConfig};
use crate::retrieval::{initial_pose, RetrievalConfig, RetrievalError, RetrievalIndex};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizerConfig {
    pub retrieval: RetrievalConfig,
    pub refiner: RefinerConfig,
    /// Skip the refinement stage and report the initial pose.
    pub refine: bool,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self { retrieval: RetrievalConfig::default(), refiner: RefinerConfig::default(), refine: true }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalizeError {
    #[error("query {name:?}: descriptor dimension {got}, map expects {expected}")]
    Dimension { name: String, expected: usize, got: usize },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

impl LocalizeError {
    /// Short token for failure lines in pose files.
    pub fn reason(&self) -> &'static str {
        match self {
            LocalizeError::Dimension { .. } => "dimension_mismatch",
            LocalizeError::Retrieval(RetrievalError::NoHypothesis) => "no_hypothesis",
            LocalizeError::Retrieval(_) => "retrieval_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub initial: PoseEstimate,
    pub refinement: Option<RefineResult>,
    pub ranked_images: Vec<u32>,
}

impl Localization {
    pub fn estimate(&self) -> &PoseEstimate {
        self.refinement.as_ref().map_or(&self.initial, |r| &r.estimate)
    }
}

pub struct Localizer<'a> {
    map: &'a LandmarkMap,
    index: RetrievalIndex,
    cfg: LocalizerConfig,
}

impl<'a> Localizer<'a> {
    pub fn new(map: &'a LandmarkMap, cfg: LocalizerConfig) -> Result<Self, LocalizeError> {
        let index = RetrievalIndex::build(map, cfg.retrieval.pca_dim)?;
        Ok(Self { map, index, cfg })
    }

    pub fn map(&self) -> &LandmarkMap {
        self.map
    }

    pub fn config(&self) -> &LocalizerConfig {
        &self.cfg
    }

    /// Checks that the query's descriptors fit the map.
    pub fn check_query(&self, query: &QueryImage) -> Result<(), LocalizeError> {
        let dim_err = |expected, got| LocalizeError::Dimension { name: query.name.clone(), expected, got };
        if query.global_descriptor.len() != self.map.global_dim() {
            return Err(dim_err(self.map.global_dim(), query.global_descriptor.len()));
        }
        if let Some(kp) = query.keypoints.iter().find(|k| k.descriptor.len() != self.map.local_dim()) {
            return Err(dim_err(self.map.local_dim(), kp.descriptor.len()));
        }
        Ok(())
    }

    /// Localizes one query. `seed` feeds every random choice, so equal seeds give equal results.
    pub fn localize(&self, query: &QueryImage, seed: u64) -> Result<Localization, LocalizeError> {
        self.check_query(query)?;
        let mut rcfg = self.cfg.retrieval;
        rcfg.pnp.seed = seed;
        let init = initial_pose(query, self.map, &self.index, &rcfg)?;
        let refinement = self.cfg.refine.then(|| {
            let fcfg = RefinerConfig {
                seed: seed ^ 0x5EED,
                pnp: crate::pnp::PnpConfig { seed: seed ^ 0xF00D, ..self.cfg.refiner.pnp },
                ..self.cfg.refiner.clone()
            };
            refine_iteratively(&init.estimate, query, self.map, &fcfg)
        });
        Ok(Localization { initial: init.estimate, refinement, ranked_images: init.ranked })
    }
}
