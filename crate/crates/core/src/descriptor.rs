//! Numeric operations on descriptors: generalized-mean pooling, the margin
//! classification loss, L2 normalization, PCA reduction and exact KNN search.

use nalgebra::{DMatrix, DVector};
use std::cmp::Ordering;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DescriptorError {
    #[error("feature map channel {0} is empty")]
    EmptyChannel(usize),
    #[error("feature map has a negative or non-finite activation in channel {0}")]
    InvalidActivation(usize),
    #[error("pooling power must be >= 1, got {0}")]
    InvalidPower(f64),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("class id {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("vector norm {0:e} is too small to normalize")]
    NearZero(f64),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("requested {requested} components but the data has rank {rank}")]
    RankDeficient { requested: usize, rank: usize },
    #[error("database is empty")]
    EmptyDatabase,
    #[error("k must be at least 1")]
    ZeroK,
}

/// Per-channel spatial activations of a rectified backbone output.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: Vec<Vec<f64>>,
}

impl FeatureMap {
    pub fn new(channels: Vec<Vec<f64>>) -> Result<Self, DescriptorError> {
        for (c, ch) in channels.iter().enumerate() {
            if ch.is_empty() {
                return Err(DescriptorError::EmptyChannel(c));
            }
            if ch.iter().any(|&x| !x.is_finite() || x < 0.0) {
                return Err(DescriptorError::InvalidActivation(c));
            }
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }
}

pub const DEFAULT_GEM_POWER: f64 = 3.0;

/// Generalized-mean pooling: `((1/|X_c|) * sum x^p)^(1/p)` per channel.
pub fn gem_pool(fm: &FeatureMap, p: f64) -> Result<Vec<f64>, DescriptorError> {
    if !(p >= 1.0) {
        return Err(DescriptorError::InvalidPower(p));
    }
    Ok(fm
        .channels
        .iter()
        .map(|ch| {
            let n = ch.len() as f64;
            if p == 1.0 {
                return ch.iter().sum::<f64>() / n;
            }
            // Scale by the channel max so large p does not overflow.
            let m = ch.iter().cloned().fold(0.0_f64, f64::max);
            if m == 0.0 {
                return 0.0;
            }
            let mean = ch.iter().map(|&x| (x / m).powf(p)).sum::<f64>() / n;
            m * mean.powf(1.0 / p)
        })
        .collect())
}

/// Additive angular margin applied to the target logit on normalized features and weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngularMargin {
    pub margin: f64,
    pub scale: f64,
}

impl Default for AngularMargin {
    fn default() -> Self {
        Self {
            margin: 0.5,
            scale: 64.0,
        }
    }
}

/// Linear classification head: one weight column and bias per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `dim x classes`, column `j` holds the weights of class `j`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// `None` evaluates the plain softmax cross-entropy.
    pub angular_margin: Option<AngularMargin>,
}

impl ClassifierHead {
    pub fn classes(&self) -> usize {
        self.weights.ncols()
    }

    fn logits(&self, x: &[f64], target: usize) -> Vec<f64> {
        let xv = DVector::from_column_slice(x);
        match self.angular_margin {
            None => (0..self.classes())
                .map(|j| self.weights.column(j).dot(&xv) + self.bias[j])
                .collect(),
            Some(AngularMargin { margin, scale }) => {
                let xn = xv.norm().max(1e-300);
                (0..self.classes())
                    .map(|j| {
                        let w = self.weights.column(j);
                        let cos = (w.dot(&xv) / (w.norm().max(1e-300) * xn)).clamp(-1.0, 1.0);
                        let cos = if j == target { (cos.acos() + margin).cos() } else { cos };
                        scale * cos + self.bias[j]
                    })
                    .collect()
            }
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean negative log-likelihood of the target class over a batch.
pub fn classification_loss(
    batch: &[(Vec<f64>, usize)],
    head: &ClassifierHead,
) -> Result<f64, DescriptorError> {
    if batch.is_empty() {
        return Err(DescriptorError::EmptyBatch);
    }
    let dim = head.weights.nrows();
    if head.bias.len() != head.classes() {
        return Err(DescriptorError::DimensionMismatch {
            expected: head.classes(),
            got: head.bias.len(),
        });
    }
    let mut total = 0.0;
    for (x, y) in batch {
        if x.len() != dim {
            return Err(DescriptorError::DimensionMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        if *y >= head.classes() {
            return Err(DescriptorError::ClassOutOfRange {
                class: *y,
                classes: head.classes(),
            });
        }
        let logits = head.logits(x, *y);
        // -log softmax_y = lse(logits) - logit_y, written as lse of shifted logits
        // so that a dominant target logit evaluates to a tiny positive value.
        let shifted: Vec<f64> = logits.iter().map(|l| l - logits[*y]).collect();
        let others: f64 = shifted
            .iter()
            .enumerate()
            .filter(|(j, _)| j != y)
            .map(|(_, s)| s.exp())
            .sum();
        let nll = if shifted.iter().all(|s| *s <= 0.0) {
            others.ln_1p()
        } else {
            log_sum_exp(&shifted)
        };
        total += nll;
    }
    Ok(total / batch.len() as f64)
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, DescriptorError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12) {
        return Err(DescriptorError::NearZero(n));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Normalizes an `f32` descriptor in place, computing in `f64`.
pub fn l2_normalize_f32(v: &mut [f32]) -> Result<(), DescriptorError> {
    let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !(n > 1e-12) {
        return Err(DescriptorError::NearZero(n));
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / n) as f32;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// `dim x out_dim`, orthonormal columns by descending variance.
    pub basis: DMatrix<f64>,
}

/// Relative eigenvalue threshold below which a direction counts as null.
const PCA_RANK_TOL: f64 = 1e-10;

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>, DescriptorError> {
        pca_apply(self, v)
    }

    /// Maps reduced coordinates back to the input space.
    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        let y = DVector::from_column_slice(y);
        (&self.mean + &self.basis * y).iter().cloned().collect()
    }
}

pub fn pca_fit(samples: &[Vec<f64>], out_dim: usize) -> Result<PcaModel, DescriptorError> {
    if samples.len() < 2 {
        return Err(DescriptorError::TooFewSamples(samples.len()));
    }
    let dim = samples[0].len();
    for s in samples {
        if s.len() != dim {
            return Err(DescriptorError::DimensionMismatch { expected: dim, got: s.len() });
        }
    }
    let n = samples.len() as f64;
    let mut mean = DVector::<f64>::zeros(dim);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= n;
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for s in samples {
        let c = DVector::from_column_slice(s) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n - 1.0;

    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let largest = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| largest > 0.0 && eig.eigenvalues[i] > PCA_RANK_TOL * largest)
        .count();
    if out_dim > rank || out_dim == 0 {
        return Err(DescriptorError::RankDeficient { requested: out_dim, rank });
    }

    let mut basis = DMatrix::<f64>::zeros(dim, out_dim);
    for (k, &i) in order.iter().take(out_dim).enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        if let Some(first) = col.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                col = -col;
            }
        }
        basis.set_column(k, &col);
    }
    Ok(PcaModel { mean, basis })
}

pub fn pca_apply(model: &PcaModel, v: &[f64]) -> Result<Vec<f64>, DescriptorError> {
    if v.len() != model.input_dim() {
        return Err(DescriptorError::DimensionMismatch { expected: model.input_dim(), got: v.len() });
    }
    let c = DVector::from_column_slice(v) - &model.mean;
    Ok(model.basis.tr_mul(&c).iter().cloned().collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

pub fn euclidean<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.into() - y.into();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Exact k nearest neighbours by Euclidean distance, ascending, ties by lower index.
pub fn knn_search<T, V>(query: &[T], database: &[V], k: usize) -> Result<Vec<Neighbor>, DescriptorError>
where
    T: Copy + Into<f64>,
    V: AsRef<[T]>,
{
    if database.is_empty() {
        return Err(DescriptorError::EmptyDatabase);
    }
    if k == 0 {
        return Err(DescriptorError::ZeroK);
    }
    let mut all = Vec::with_capacity(database.len());
    for (index, v) in database.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != query.len() {
            return Err(DescriptorError::DimensionMismatch { expected: query.len(), got: v.len() });
        }
        all.push(Neighbor { index, distance: euclidean(query, v) });
    }
    let cmp = |a: &Neighbor, b: &Neighbor| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index));
    let k = k.min(all.len());
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(ch: Vec<f64>) -> FeatureMap {
        FeatureMap::new(vec![ch]).unwrap()
    }

    #[test]
    fn gem_examples() {
        let fm = single(vec![1.0, 2.0]);
        assert_eq!(gem_pool(&fm, 1.0).unwrap(), vec![1.5]);
        // (1 + 8) / 2 = 4.5
        assert_relative_eq!(gem_pool(&fm, 3.0).unwrap()[0], 4.5f64.cbrt(), epsilon = 1e-12);
        assert_relative_eq!(gem_pool(&fm, 3.0).unwrap()[0], 1.65096, epsilon = 1e-5);
        let g100 = gem_pool(&fm, 100.0).unwrap()[0];
        // 2 * 0.5^(1/100), evaluated directly
        assert_relative_eq!(g100, 1.98618, epsilon = 1e-5);
        assert!((2.0 - g100) / 2.0 < 0.01);
    }

    #[test]
    fn gem_errors() {
        assert_eq!(FeatureMap::new(vec![vec![]]), Err(DescriptorError::EmptyChannel(0)));
        assert_eq!(FeatureMap::new(vec![vec![-1.0]]), Err(DescriptorError::InvalidActivation(0)));
        assert_eq!(gem_pool(&single(vec![1.0]), 0.5), Err(DescriptorError::InvalidPower(0.5)));
    }

    #[test]
    fn gem_monotone_in_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let fm = FeatureMap::new(
                (0..4)
                    .map(|_| (0..rng.random_range(1..20)).map(|_| rng.random_range(0.0..5.0)).collect())
                    .collect(),
            )
            .unwrap();
            let mut prev = gem_pool(&fm, 1.0).unwrap();
            for p in [2.0, 3.0, 10.0] {
                let cur = gem_pool(&fm, p).unwrap();
                for (a, b) in prev.iter().zip(&cur) {
                    assert!(b + 1e-12 >= *a);
                }
                prev = cur;
            }
        }
    }

    fn head(w: &[[f64; 2]], b: &[f64]) -> ClassifierHead {
        let mut m = DMatrix::zeros(2, w.len());
        for (j, c) in w.iter().enumerate() {
            m[(0, j)] = c[0];
            m[(1, j)] = c[1];
        }
        ClassifierHead { weights: m, bias: DVector::from_column_slice(b), angular_margin: None }
    }

    #[test]
    fn loss_examples() {
        let sym = head(&[[0.3, -0.2], [0.3, -0.2]], &[0.0, 0.0]);
        let l = classification_loss(&[(vec![0.7, 1.9], 1)], &sym).unwrap();
        assert_relative_eq!(l, 2f64.ln(), epsilon = 1e-12);

        let h = head(&[[1.0, 0.0], [0.0, 1.0]], &[0.0, 0.0]);
        let l = classification_loss(&[(vec![1.0, 0.0], 0)], &h).unwrap();
        assert_relative_eq!(l, (1.0 + (-1f64).exp()).ln(), epsilon = 1e-12);

        let sat = head(&[[0.0, 0.0], [0.0, 0.0]], &[50.0, 0.0]);
        let l = classification_loss(&[(vec![0.4, 0.1], 0)], &sat).unwrap();
        assert!(l < 1e-20 && l >= 0.0);
    }

    #[test]
    fn loss_with_angular_margin_penalizes_target() {
        let mut h = head(&[[1.0, 0.2], [0.1, 1.0]], &[0.0, 0.0]);
        let batch = vec![(vec![1.0, 0.3], 0)];
        h.angular_margin = Some(AngularMargin { margin: 0.0, ..AngularMargin::default() });
        let plain = classification_loss(&batch, &h).unwrap();
        h.angular_margin = Some(AngularMargin::default());
        let margin = classification_loss(&batch, &h).unwrap();
        assert!(margin > plain);
    }

    #[test]
    fn loss_errors() {
        let h = head(&[[1.0, 0.0], [0.0, 1.0]], &[0.0, 0.0]);
        assert_eq!(classification_loss(&[], &h), Err(DescriptorError::EmptyBatch));
        assert!(matches!(
            classification_loss(&[(vec![1.0], 0)], &h),
            Err(DescriptorError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            classification_loss(&[(vec![1.0, 0.0], 5)], &h),
            Err(DescriptorError::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(DescriptorError::NearZero(_))));
    }

    #[test]
    fn pca_axis_aligned() {
        let pts = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![2.0, 0.0], vec![-2.0, 0.0]];
        let m = pca_fit(&pts, 1).unwrap();
        let proj: Vec<f64> = pts.iter().map(|p| pca_apply(&m, p).unwrap()[0]).collect();
        let sign = proj[0].signum();
        for (p, e) in proj.iter().zip([1.0, -1.0, 2.0, -2.0]) {
            assert_relative_eq!(p * sign, e, epsilon = 1e-12);
        }
        // first nonzero component positive
        assert!(m.basis[(0, 0)] > 0.0);
    }

    #[test]
    fn pca_full_rank_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec<f64>> = (0..30).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let m = pca_fit(&pts, 5).unwrap();
        let gram = m.basis.tr_mul(&m.basis);
        assert!((gram - DMatrix::identity(5, 5)).abs().max() < 1e-9);
        for p in &pts {
            let back = m.reconstruct(&pca_apply(&m, p).unwrap());
            for (a, b) in back.iter().zip(p) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_preserves_distances_at_data_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // rank-2 data embedded in 4 dims
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                vec![a + b, a - b, 2.0 * a, 0.5 * b]
            })
            .collect();
        assert!(matches!(pca_fit(&pts, 3), Err(DescriptorError::RankDeficient { rank: 2, .. })));
        let m = pca_fit(&pts, 2).unwrap();
        let proj: Vec<Vec<f64>> = pts.iter().map(|p| pca_apply(&m, p).unwrap()).collect();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                assert!((euclidean(&pts[i], &pts[j]) - euclidean(&proj[i], &proj[j])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_identical_inputs_rank_error() {
        let pts = vec![vec![1.0, 2.0]; 5];
        assert!(matches!(pca_fit(&pts, 1), Err(DescriptorError::RankDeficient { rank: 0, .. })));
    }

    #[test]
    fn knn_examples() {
        let db = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = knn_search(&[0.9, 0.0], &db, 1).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].index, 1);
        assert_relative_eq!(r[0].distance, 0.1, epsilon = 1e-12);
        assert_eq!(knn_search(&[0.0, 1.0], &db, 1).unwrap(), vec![Neighbor { index: 2, distance: 0.0 }]);
        assert_eq!(knn_search(&[0.0, 1.0], &db, 5).unwrap().len(), 3);
        let empty: Vec<Vec<f64>> = vec![];
        assert_eq!(knn_search(&[0.0], &empty, 1), Err(DescriptorError::EmptyDatabase));
    }

    #[test]
    fn knn_ties_break_by_index() {
        let db = vec![vec![1.0], vec![-1.0], vec![1.0]];
        let r = knn_search(&[0.0], &db, 3).unwrap();
        assert_eq!(r.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}
