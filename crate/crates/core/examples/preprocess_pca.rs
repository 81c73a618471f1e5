//! Fit layer normalization and PCA on random activations, then project.
//!
//! cargo run --example preprocess_pca

use prism::preprocess::{fit_preprocess, project_trace_set};
use prism::trace::{Correctness, HiddenTensor, StepRecord, TraceSample, TraceSet};
use prism::Category;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (layers, dim) = (4, 16);
    // activations dominated by two hidden directions plus noise
    let dirs: Vec<Vec<f64>> = (0..2).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let samples = (0..50)
        .map(|i| {
            let t = rng.random_range(3..10);
            let mut values = Vec::with_capacity(t * layers * dim);
            for _ in 0..t * layers {
                let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
                for d in 0..dim {
                    values.push((a * dirs[0][d] + b * dirs[1][d] + 0.05 * rng.random_range(-1.0..1.0)) as f32);
                }
            }
            TraceSample {
                id: format!("s{i}"),
                steps: (1..=t as u32).map(|t| StepRecord { t, category: Category::Ac, text: None }).collect(),
                tensor: HiddenTensor::new(t, layers, dim, values),
                correctness: Correctness::Unlabeled,
                meta: Default::default(),
            }
        })
        .collect();
    let set = TraceSet::new(layers, dim, samples);
    let model = fit_preprocess(&set, 4)?;
    let ratio = model.explained_variance_ratio();
    println!("explained variance ratio of the first 4 directions:");
    for (j, r) in ratio.iter().enumerate() {
        println!("  pc{}: {:.4}", j + 1, r);
    }
    let projected = project_trace_set(Some(&model), &set)?;
    let first = &projected[0].features;
    println!("first sample projected to {}x{}x{}; step 1, layer 1 = {:?}", first.steps, first.layers, first.dim, &first.vector(0, 0));
    Ok(())
}
