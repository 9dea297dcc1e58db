use crate::map::{labels_compatible, Keypoint, Label, LandmarkMap};
use nalgebra::DMatrix;

/// A query keypoint matched to a map landmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match2D3D {
    pub query_idx: usize,
    pub landmark_id: u64,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    /// Lowe ratio: accept when `d1 <= ratio * d2`.
    pub ratio: f64,
    /// Require compatible semantic labels.
    pub use_semantic: bool,
    /// Keep only matches that are nearest in both directions.
    pub mutual: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { ratio: 0.8, use_semantic: true, mutual: true }
    }
}

/// Ratio test on the two nearest distances. A single candidate always passes;
/// two candidates at distance zero are ambiguous and fail.
pub fn passes_ratio(d1: f64, d2: f64, ratio: f64) -> bool {
    d2 > 0.0 && d1 <= ratio * d2
}

/// Squared Euclidean distances between all rows of `a` and `b`, via one matrix product.
pub fn pairwise_sq_distances<A: AsRef<[f32]>, B: AsRef<[f32]>>(a: &[A], b: &[B], dim: usize) -> DMatrix<f32> {
    let am = DMatrix::<f32>::from_fn(a.len(), dim, |i, k| a[i].as_ref()[k]);
    let bm = DMatrix::<f32>::from_fn(dim, b.len(), |k, j| b[j].as_ref()[k]);
    let an: Vec<f32> = a.iter().map(|v| v.as_ref().iter().map(|x| x * x).sum()).collect();
    let bn: Vec<f32> = b.iter().map(|v| v.as_ref().iter().map(|x| x * x).sum()).collect();
    let mut g = am * bm;
    for j in 0..b.len() {
        for i in 0..a.len() {
            let v = &mut g[(i, j)];
            *v = (an[i] + bn[j] - 2.0 * *v).max(0.0);
        }
    }
    g
}

/// Two smallest entries `(index, value)` of an iterator, first-index wins ties.
pub(crate) fn two_smallest(values: impl Iterator<Item = (usize, f32)>) -> Option<((usize, f32), Option<(usize, f32)>)> {
    let mut best: Option<(usize, f32)> = None;
    let mut second: Option<(usize, f32)> = None;
    for (i, v) in values {
        match best {
            None => best = Some((i, v)),
            Some((_, bv)) if v < bv => {
                second = best;
                best = Some((i, v));
            }
            _ => {
                if second.is_none_or(|(_, sv)| v < sv) {
                    second = Some((i, v));
                }
            }
        }
    }
    best.map(|b| (b, second))
}

/// Descriptor matching between two keypoint sets: 2-NN ratio test, label
/// compatibility and an optional mutual nearest-neighbour check.
pub fn match_2d2d(a: &[Keypoint], b: &[Keypoint], cfg: &MatchConfig) -> Vec<(usize, usize)> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let dim = a[0].descriptor.len();
    let da: Vec<&[f32]> = a.iter().map(|k| k.descriptor.as_slice()).collect();
    let db: Vec<&[f32]> = b.iter().map(|k| k.descriptor.as_slice()).collect();
    let d = pairwise_sq_distances(&da, &db, dim);

    let best_in_a: Vec<usize> = if cfg.mutual {
        (0..b.len())
            .map(|j| two_smallest((0..a.len()).map(|i| (i, d[(i, j)]))).map_or(usize::MAX, |(b, _)| b.0))
            .collect()
    } else {
        Vec::new()
    };

    let mut out = Vec::new();
    for i in 0..a.len() {
        let Some(((j, d1), second)) = two_smallest((0..b.len()).map(|j| (j, d[(i, j)]))) else {
            continue;
        };
        let d2 = second.map_or(f64::INFINITY, |(_, v)| (v as f64).sqrt());
        if !passes_ratio((d1 as f64).sqrt(), d2, cfg.ratio) {
            continue;
        }
        if cfg.use_semantic && !labels_compatible(a[i].semantic_label, b[j].semantic_label) {
            continue;
        }
        if cfg.mutual && best_in_a[j] != i {
            continue;
        }
        out.push((i, j));
    }
    out
}

/// Keeps matches whose keypoint and landmark labels are compatible.
pub fn semantic_filter(matches: &[Match2D3D], query: &[Keypoint], map: &LandmarkMap) -> Vec<Match2D3D> {
    matches
        .iter()
        .filter(|m| {
            let kl: Label = query[m.query_idx].semantic_label;
            map.landmark(m.landmark_id).is_some_and(|lm| labels_compatible(kl, lm.semantic_label))
        })
        .copied()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pixel;

    fn kp(d: &[f32], label: Label) -> Keypoint {
        Keypoint { px: Pixel::new(0.0, 0.0), descriptor: d.to_vec(), semantic_label: label, score: 1.0 }
    }

    #[test]
    fn ratio_examples() {
        let cfg = MatchConfig { mutual: false, ..Default::default() };
        let b = [kp(&[0.5], 1), kp(&[-1.0], 1)];
        assert_eq!(match_2d2d(&[kp(&[0.0], 1)], &b, &cfg), vec![(0, 0)]);
        let b = [kp(&[0.9], 1), kp(&[-1.0], 1)];
        assert!(match_2d2d(&[kp(&[0.0], 1)], &b, &cfg).is_empty());
    }

    #[test]
    fn label_examples() {
        let cfg = MatchConfig { mutual: false, ..Default::default() };
        let b = [kp(&[0.5], 5), kp(&[-1.0], 5)];
        assert!(match_2d2d(&[kp(&[0.0], 3)], &b, &cfg).is_empty());
        let b = [kp(&[0.5], 0), kp(&[-1.0], 5)];
        assert_eq!(match_2d2d(&[kp(&[0.0], 3)], &b, &cfg), vec![(0, 0)]);
        let off = MatchConfig { use_semantic: false, mutual: false, ..Default::default() };
        let b = [kp(&[0.5], 5), kp(&[-1.0], 5)];
        assert_eq!(match_2d2d(&[kp(&[0.0], 3)], &b, &off), vec![(0, 0)]);
    }

    #[test]
    fn mutual_check() {
        // a0 and a1 both prefer b0, b0 prefers a1
        let a = [kp(&[0.0, 0.0], 0), kp(&[0.1, 0.0], 0)];
        let b = [kp(&[0.12, 0.0], 0), kp(&[5.0, 5.0], 0)];
        let cfg = MatchConfig::default();
        assert_eq!(match_2d2d(&a, &b, &cfg), vec![(1, 0)]);
    }

    #[test]
    fn pairwise_matches_direct() {
        let a = vec![vec![0.1f32, 0.2, 0.3], vec![1.0, -1.0, 0.5]];
        let b = vec![vec![0.0f32, 0.0, 0.0], vec![0.1, 0.2, 0.3], vec![-2.0, 1.0, 0.0]];
        let d = pairwise_sq_distances(&a, &b, 3);
        for i in 0..2 {
            for j in 0..3 {
                let direct: f32 = a[i].iter().zip(&b[j]).map(|(x, y)| (x - y) * (x - y)).sum();
                assert!((d[(i, j)] - direct).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn two_smallest_ties_prefer_lower_index() {
        let r = two_smallest([(0, 1.0), (1, 0.5), (2, 0.5)].into_iter()).unwrap();
        assert_eq!(r.0, (1, 0.5));
        assert_eq!(r.1, Some((2, 0.5)));
    }
}
