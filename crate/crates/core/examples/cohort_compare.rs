//! Side-by-side comparison of cohorts selected by metadata.
//!
//! cargo run --release --example cohort_compare

mod shared;

use prism::diagnostics::{compare_cohorts, CohortFilter};
use prism::explicit::SummaryOptions;
use prism::implicit::{decode_all, fit_joint, fit_warmup, EmConfig};
use prism::preprocess::project_trace_set;
use prism::synth::sample_trace_set;
use prism::trace::Correctness;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let truth = shared::demo_params(3);
    let mut set = sample_trace_set(&truth, 150, 13)?;
    for (i, s) in set.samples.iter_mut().enumerate() {
        let prompt = ["plain", "step-by-step", "verify"][i % 3];
        s.meta.insert("prompt".into(), prompt.into());
        s.correctness = if (i * 7) % 10 < 6 { Correctness::Correct } else { Correctness::Incorrect };
    }
    let trajs = project_trace_set(None, &set)?;
    let cfg = EmConfig::with_k(3);
    let model = fit_joint(&fit_warmup(&trajs, &cfg)?, &trajs, &cfg)?;
    let decoded = decode_all(&model, &trajs)?;
    let cohorts: Vec<(String, CohortFilter)> = ["plain", "step-by-step", "verify"]
        .iter()
        .map(|p| (p.to_string(), CohortFilter::all().with_meta("prompt", p)))
        .collect();
    let cmp = compare_cohorts(&set, Some(&decoded), &cohorts, SummaryOptions { allow_uniform_fill: true })?;
    println!("baseline: {}", cmp.baseline);
    for c in &cmp.columns {
        let l2: Vec<String> = c.l2_vs_baseline.iter().map(|v| v.map_or("-".into(), |x| format!("{x:.3}"))).collect();
        println!(
            "{:>12}: n={} accuracy={:.2} mean length={:.1} profile L2 vs baseline (FA SR AC UV) = {}",
            c.name,
            c.n_samples,
            c.accuracy.unwrap_or(f64::NAN),
            c.mean_length.unwrap_or(f64::NAN),
            l2.join(" ")
        );
    }
    Ok(())
}
