//! Write ground-truth parameters, sample a trace set from them and save it.
//! The saved params file is accepted by `prism simulate --params`.
//!
//! cargo run --example simulate -- [out_dir]

use prism::codec::Matrix;
use prism::explicit::MarkovModel;
use prism::implicit::{BridgeSet, CategoryGmm};
use prism::synth::{sample_with_labels, GroundTruthParams, PARAMS_VERSION};
use prism::trace::save_trace_set;
use prism::Category;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: std::path::PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("prism-simulate"));
    let (k, dim) = (2, 2);
    let markov = MarkovModel::from_probabilities(
        &[
            vec![0.6, 0.1, 0.1, 0.2],
            vec![0.05, 0.5, 0.4, 0.05],
            vec![0.1, 0.1, 0.6, 0.2],
            vec![0.2, 0.1, 0.3, 0.4],
        ],
        Some(vec![0.0, 1.0, 0.0, 0.0]),
    )?;
    let gmms = Category::CORE
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let s = i as f64;
            CategoryGmm::new(
                c,
                Matrix::from_rows(&[vec![s, -4.0], vec![s, 4.0]]),
                Matrix::from_rows(&[vec![1.0; 2], vec![1.0; 2]]),
                vec![0.5, 0.5],
            )
        })
        .collect();
    // regimes tend to persist across step boundaries
    let sticky = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]);
    let params = GroundTruthParams {
        version: PARAMS_VERSION,
        markov,
        gmms,
        bridges: BridgeSet::from_entries(k, &vec![sticky; 16]),
        length_range: [6, 14],
        layers: 3,
        dim,
    };
    params.validate()?;
    std::fs::create_dir_all(&out)?;
    params.save(out.join("params.json"))?;
    let (set, labels) = sample_with_labels(&params, 25, 11)?;
    save_trace_set(&set, out.join("traces"))?;
    let s = &set.samples[0];
    println!("saved params and {} traces under {}", set.samples.len(), out.display());
    println!("{}: {} steps", s.id, s.len());
    for (t, c) in s.categories().iter().enumerate() {
        println!("  t={:>2} {:>3} regimes per layer {:?}", t + 1, c.short(), labels[0][t]);
    }
    Ok(())
}
