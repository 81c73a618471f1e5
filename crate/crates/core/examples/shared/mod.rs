//! Ground-truth parameters shared by the fitting examples.

use prism::codec::Matrix;
use prism::explicit::MarkovModel;
use prism::implicit::{BridgeSet, CategoryGmm};
use prism::synth::{GroundTruthParams, PARAMS_VERSION};
use prism::Category;

/// Three well-separated regimes per category in four dimensions, with
/// bridges that shift the regime by one at each step boundary.
pub fn demo_params(layers: usize) -> GroundTruthParams {
    let (k, dim) = (3, 4);
    let markov = MarkovModel::from_probabilities(
        &[
            vec![0.4, 0.2, 0.2, 0.2],
            vec![0.1, 0.4, 0.4, 0.1],
            vec![0.15, 0.1, 0.5, 0.25],
            vec![0.25, 0.15, 0.3, 0.3],
        ],
        None,
    )
    .expect("valid chain");
    let gmms = Category::CORE
        .iter()
        .enumerate()
        .map(|(ci, &c)| {
            let mut means = Matrix::zeros(k, dim);
            for j in 0..k {
                means.set(j, j, 6.0);
                means.set(j, 3, ci as f64);
            }
            CategoryGmm::new(c, means, Matrix::from_rows(&vec![vec![1.0; dim]; k]), vec![0.5, 0.3, 0.2])
        })
        .collect();
    let mut shift = Matrix::zeros(k, k);
    for j in 0..k {
        for kk in 0..k {
            shift.set(j, kk, if (j + 1) % k == kk { 0.8 } else { 0.1 });
        }
    }
    GroundTruthParams {
        version: PARAMS_VERSION,
        markov,
        gmms,
        bridges: BridgeSet::from_entries(k, &vec![shift; 16]),
        length_range: [8, 30],
        layers,
        dim,
    }
}
