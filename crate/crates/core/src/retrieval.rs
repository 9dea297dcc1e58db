//! Candidate generation: global-descriptor search, per-candidate feature-match
//! PnP, clustering of the candidate poses and inlier-based re-ranking.

use crate::descriptor::{euclidean, knn_search, l2_normalize, pca_apply, pca_fit, DescriptorError, PcaModel};
use crate::geometry::Point3;
use crate::map::{LandmarkMap, QueryImage};
use crate::pnp::{match_2d2d, pnp_ransac, semantic_filter, Match2D3D, MatchConfig, PnpConfig, PoseEstimate};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error("map has no database images")]
    EmptyMap,
    #[error("no candidate produced a pose hypothesis")]
    NoHypothesis,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalConfig {
    /// Number of database images retrieved per query.
    pub k: usize,
    /// DBSCAN radius on camera centers, meters.
    pub eps: f64,
    pub min_pts: usize,
    /// Fewer lifted matches than this and FM-PnP is not attempted.
    pub min_matches: usize,
    /// Reduce global descriptors to this many principal components.
    pub pca_dim: Option<usize>,
    pub matching: MatchConfig,
    pub pnp: PnpConfig,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            eps: 2.0,
            min_pts: 2,
            min_matches: 12,
            pca_dim: None,
            matching: MatchConfig::default(),
            pnp: PnpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub image_id: u32,
    pub distance: f64,
    pub estimate: Option<PoseEstimate>,
}

/// Global descriptors of the database, normalized and optionally PCA-reduced.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    image_ids: Vec<u32>,
    descriptors: Vec<Vec<f64>>,
    pca: Option<PcaModel>,
    input_dim: usize,
}

impl RetrievalIndex {
    pub fn build(map: &LandmarkMap, pca_dim: Option<usize>) -> Result<Self, RetrievalError> {
        if map.images().is_empty() {
            return Err(RetrievalError::EmptyMap);
        }
        let raw: Vec<Vec<f64>> = map
            .images()
            .iter()
            .map(|im| l2_normalize(&im.global_descriptor.iter().map(|&x| x as f64).collect::<Vec<_>>()))
            .collect::<Result<_, _>>()?;
        let pca = pca_dim.map(|d| pca_fit(&raw, d)).transpose()?;
        let descriptors = match &pca {
            Some(m) => raw.iter().map(|v| l2_normalize(&pca_apply(m, v)?)).collect::<Result<_, _>>()?,
            None => raw,
        };
        Ok(Self {
            image_ids: map.images().iter().map(|im| im.id).collect(),
            descriptors,
            pca,
            input_dim: map.global_dim(),
        })
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    /// Maps a raw query descriptor into the index space.
    pub fn embed(&self, global_descriptor: &[f32]) -> Result<Vec<f64>, RetrievalError> {
        if global_descriptor.len() != self.input_dim {
            return Err(DescriptorError::DimensionMismatch { expected: self.input_dim, got: global_descriptor.len() }.into());
        }
        let v = l2_normalize(&global_descriptor.iter().map(|&x| x as f64).collect::<Vec<_>>())?;
        Ok(match &self.pca {
            Some(m) => l2_normalize(&pca_apply(m, &v)?)?,
            None => v,
        })
    }

    /// The `k` nearest database images, ascending by distance.
    pub fn query(&self, global_descriptor: &[f32], k: usize) -> Result<Vec<Candidate>, RetrievalError> {
        let q = self.embed(global_descriptor)?;
        Ok(knn_search(&q, &self.descriptors, k)?
            .into_iter()
            .map(|n| Candidate { image_id: self.image_ids[n.index], distance: n.distance, estimate: None })
            .collect())
    }
}

/// Top-k retrieval without dimensionality reduction.
pub fn retrieve_topk(query_gd: &[f32], map: &LandmarkMap, k: usize) -> Result<Vec<Candidate>, RetrievalError> {
    RetrievalIndex::build(map, None)?.query(query_gd, k)
}

/// 2D-2D matches against one database image, lifted to landmarks through the tracks.
pub fn lift_matches(query: &QueryImage, image_id: u32, map: &LandmarkMap, cfg: &MatchConfig) -> Vec<Match2D3D> {
    let Some(image) = map.image(image_id) else {
        return Vec::new();
    };
    match_2d2d(&query.keypoints, &image.keypoints, cfg)
        .into_iter()
        .filter_map(|(qi, dj)| {
            let lm = map.landmark_for_observation(image_id, dj as u32)?;
            Some(Match2D3D {
                query_idx: qi,
                landmark_id: lm.id,
                distance: euclidean(&query.keypoints[qi].descriptor, &image.keypoints[dj].descriptor),
            })
        })
        .collect()
}

/// Feature-match PnP of a query against one retrieved image. `None` when there
/// are too few lifted matches or RANSAC finds no consensus.
pub fn fm_pnp(query: &QueryImage, cand: &Candidate, map: &LandmarkMap, cfg: &RetrievalConfig) -> Option<PoseEstimate> {
    let mut matches = lift_matches(query, cand.image_id, map, &cfg.matching);
    if cfg.matching.use_semantic {
        matches = semantic_filter(&matches, &query.keypoints, map);
    }
    if matches.len() < cfg.min_matches.max(4) {
        return None;
    }
    pnp_ransac(&matches, &query.keypoints, &query.camera, map, &cfg.pnp).ok().flatten()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseCluster {
    /// Indices into the clustered estimates, ascending.
    pub members: Vec<usize>,
    pub total_inliers: usize,
    /// Member with the most inliers, lowest index on ties.
    pub representative: usize,
    /// A DBSCAN noise point kept as its own cluster.
    pub noise: bool,
}

/// DBSCAN over camera centers. A point counts in its own neighbourhood. Noise
/// points come back as flagged singletons, so the output partitions the input.
/// Clusters are ordered by their lowest member index.
pub fn cluster_poses_dbscan(estimates: &[PoseEstimate], eps: f64, min_pts: usize) -> Vec<PoseCluster> {
    let centers: Vec<Point3> = estimates.iter().map(|e| e.pose.center()).collect();
    let labels = dbscan(&centers, eps, min_pts);
    let mut groups: Vec<(Vec<usize>, bool)> = Vec::new();
    let mut slot_of_label = std::collections::HashMap::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            Some(c) => {
                let slot = *slot_of_label.entry(*c).or_insert_with(|| {
                    groups.push((Vec::new(), false));
                    groups.len() - 1
                });
                groups[slot].0.push(i);
            }
            None => groups.push((vec![i], true)),
        }
    }
    groups
        .into_iter()
        .map(|(members, noise)| {
            let total_inliers = members.iter().map(|&i| estimates[i].inliers.len()).sum();
            let representative = members
                .iter()
                .copied()
                .max_by(|&a, &b| estimates[a].inliers.len().cmp(&estimates[b].inliers.len()).then(b.cmp(&a)))
                .unwrap();
            PoseCluster { members, total_inliers, representative, noise }
        })
        .collect()
}

/// Cluster id per point, `None` for noise.
fn dbscan(points: &[Point3], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let neighbours = |i: usize| -> Vec<usize> { (0..n).filter(|&j| (points[i] - points[j]).norm() <= eps).collect() };
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let seeds = neighbours(i);
        if seeds.len() < min_pts {
            continue;
        }
        let c = next;
        next += 1;
        label[i] = Some(c);
        let mut queue = seeds;
        let mut head = 0;
        while head < queue.len() {
            let j = queue[head];
            head += 1;
            if label[j].is_none() {
                label[j] = Some(c);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let nj = neighbours(j);
            if nj.len() >= min_pts {
                queue.extend(nj);
            }
        }
    }
    label
}

fn mean_distance(members: &[usize], distances: &[f64]) -> f64 {
    members.iter().map(|&i| distances[i]).sum::<f64>() / members.len() as f64
}

/// Winning cluster by total inliers, then smaller mean retrieval distance, then
/// lower representative index. Returns the representative and the re-ranked
/// order: winning members by descending inliers, then everything else in input order.
pub fn select_initial_pose(
    clusters: &[PoseCluster],
    estimates: &[PoseEstimate],
    distances: &[f64],
) -> Result<(usize, Vec<usize>), RetrievalError> {
    let winner = clusters
        .iter()
        .filter(|c| !c.members.is_empty())
        .min_by(|a, b| {
            b.total_inliers
                .cmp(&a.total_inliers)
                .then(mean_distance(&a.members, distances).total_cmp(&mean_distance(&b.members, distances)))
                .then(a.representative.cmp(&b.representative))
        })
        .ok_or(RetrievalError::NoHypothesis)?;
    let mut order = winner.members.clone();
    order.sort_by(|&a, &b| estimates[b].inliers.len().cmp(&estimates[a].inliers.len()).then(a.cmp(&b)));
    order.extend((0..estimates.len()).filter(|i| !winner.members.contains(i)));
    Ok((winner.representative, order))
}

/// Result of the retrieval stage for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialPose {
    pub estimate: PoseEstimate,
    /// Candidate image ids after re-ranking; failed candidates last.
    pub ranked: Vec<u32>,
    pub candidates: Vec<Candidate>,
}

/// Retrieval, FM-PnP on every candidate, clustering and selection.
pub fn initial_pose(
    query: &QueryImage,
    map: &LandmarkMap,
    index: &RetrievalIndex,
    cfg: &RetrievalConfig,
) -> Result<InitialPose, RetrievalError> {
    let mut candidates = index.query(&query.global_descriptor, cfg.k)?;
    let estimates: Vec<Option<PoseEstimate>> = candidates.par_iter().map(|c| fm_pnp(query, c, map, cfg)).collect();
    for (c, e) in candidates.iter_mut().zip(estimates) {
        c.estimate = e;
    }
    let solved: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].estimate.is_some()).collect();
    let ests: Vec<PoseEstimate> = solved.iter().map(|&i| candidates[i].estimate.clone().unwrap()).collect();
    let dists: Vec<f64> = solved.iter().map(|&i| candidates[i].distance).collect();
    let clusters = cluster_poses_dbscan(&ests, cfg.eps, cfg.min_pts);
    let (rep, order) = select_initial_pose(&clusters, &ests, &dists)?;
    let mut ranked: Vec<u32> = order.iter().map(|&k| candidates[solved[k]].image_id).collect();
    ranked.extend(candidates.iter().filter(|c| c.estimate.is_none()).map(|c| c.image_id));
    Ok(InitialPose { estimate: ests[rep].clone(), ranked, candidates })
}
