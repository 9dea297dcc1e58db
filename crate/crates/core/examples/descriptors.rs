//! Global descriptors: generalized-mean pooling, PCA reduction,
//! the classification loss used to train the pooled features, and exact kNN.
//!
//! cargo run --example descriptors

use nalgebra::{DMatrix, DVector};
use ocloc::descriptor::{
    classification_loss, gem_pool, knn_search, l2_normalize, pca_fit, AngularMargin, ClassifierHead, FeatureMap,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    // two channels over a 2x2 activation map
    let fm = FeatureMap::new(vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 0.5, 0.5, 8.0]]).unwrap();
    for p in [1.0, 3.0, 10.0, 100.0] {
        let v = gem_pool(&fm, p).unwrap();
        println!("GeM p={p:<5} -> [{:.4}, {:.4}]", v[0], v[1]);
    }
    println!("(p=1 is average pooling, large p approaches max pooling)");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let db: Vec<Vec<f64>> = (0..500)
        .map(|_| l2_normalize(&(0..64).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap())
        .collect();

    let pca = pca_fit(&db, 16).unwrap();
    let reduced: Vec<Vec<f64>> = db.iter().map(|v| pca.apply(v).unwrap()).collect();
    println!("PCA {} -> {} dims", pca.input_dim(), pca.output_dim());

    let q = &db[42];
    let full = knn_search(q, &db, 3).unwrap();
    let small = knn_search(&pca.apply(q).unwrap(), &reduced, 3).unwrap();
    println!("3-NN full:    {:?}", full.iter().map(|n| n.index).collect::<Vec<_>>());
    println!("3-NN reduced: {:?}", small.iter().map(|n| n.index).collect::<Vec<_>>());

    let head = ClassifierHead {
        weights: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -1.0, 0.0, 1.0, 0.0]),
        bias: DVector::zeros(3),
        angular_margin: None,
    };
    let batch = vec![(vec![2.0, 0.1], 0), (vec![0.0, 1.5], 1)];
    println!("softmax loss: {:.6}", classification_loss(&batch, &head).unwrap());
    let margin = ClassifierHead { angular_margin: Some(AngularMargin::default()), ..head };
    println!("with angular margin: {:.6}", classification_loss(&batch, &margin).unwrap());
}
