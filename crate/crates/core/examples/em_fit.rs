//! Two-phase EM on simulated projected traces, compared with the truth.
//!
//! cargo run --release --example em_fit

mod shared;

use prism::implicit::{fit_joint, fit_warmup, EmConfig};
use prism::preprocess::project_trace_set;
use prism::synth::{match_regimes, sample_trace_set};
use prism::Category;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let truth = shared::demo_params(6);
    let set = sample_trace_set(&truth, 300, 5)?;
    let trajs = project_trace_set(None, &set)?;
    let cfg = EmConfig::with_k(3);
    let warm = fit_warmup(&trajs, &cfg)?;
    for log in &warm.logs {
        println!(
            "warm-up {:>3}: {} vectors, {} iterations, log-likelihood {:.1} -> {:.1}",
            log.category.short(),
            log.n_vectors,
            log.iterations,
            log.log_likelihood.first().unwrap_or(&f64::NAN),
            log.log_likelihood.last().unwrap_or(&f64::NAN)
        );
    }
    let model = fit_joint(&warm, &trajs, &cfg)?;
    let joint = &model.log.as_ref().unwrap().joint;
    println!(
        "joint EM: {:.1} -> {:.1} (largest relative drop {:.2e})",
        joint.log_likelihood[0],
        joint.log_likelihood.last().unwrap(),
        joint.max_relative_decrease
    );
    for g in &truth.gmms {
        let m = match_regimes(g, model.gmm(g.category).unwrap())?;
        println!(
            "{:>3}: regime map {:?}, max |mean err| {:.3}, max |weight err| {:.3}",
            g.category.short(),
            m.perm,
            m.max_mean_abs_error,
            m.max_weight_abs_error
        );
    }
    let ac = model.bridges.entry(Category::Ac, Category::Uv).unwrap();
    println!("fitted AC->UV entry matrix (rows: exit regime of AC, fitted labels):");
    for j in 0..ac.rows {
        println!("  {:?}", ac.row(j).iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());
    }
    Ok(())
}
