//! Full diagnostics report over labeled synthetic traces, written as JSON
//! and CSV tables.
//!
//! cargo run --release --example diagnostics_report -- [out_dir]

mod shared;

use prism::diagnostics::{build_report, report_tables, ReportConfig, ReportInputs};
use prism::implicit::{decode_all, fit_joint, fit_warmup, EmConfig};
use prism::preprocess::project_trace_set;
use prism::synth::sample_trace_set;
use prism::trace::Correctness;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: std::path::PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("prism-report"));
    let truth = shared::demo_params(3);
    let mut set = sample_trace_set(&truth, 200, 8)?;
    // label long traces as failures more often, and spread over two models
    for (i, s) in set.samples.iter_mut().enumerate() {
        let fail = s.len() > 22 || i % 4 == 0;
        s.correctness = if fail { Correctness::Incorrect } else { Correctness::Correct };
        s.meta.insert("model".into(), format!("model-{}", i % 2));
        s.meta.insert("dataset".into(), "demo".into());
    }
    let trajs = project_trace_set(None, &set)?;
    let cfg = EmConfig::with_k(3);
    let model = fit_joint(&fit_warmup(&trajs, &cfg)?, &trajs, &cfg)?;
    let decoded = decode_all(&model, &trajs)?;
    let report = build_report(
        &ReportInputs { set: &set, projected: Some(&trajs), implicit: Some(&model), decoded: Some(&decoded) },
        &ReportConfig { long_threshold: 22, ..ReportConfig::default() },
    )?;
    for c in &report.cohorts {
        let med = c.fa_visits.pooled.first_pos.as_ref().map(|q| q.median);
        println!("{:>13}: {:>3} samples, median first-FA position {}", c.name, c.n_samples, med.map_or("-".into(), |m| format!("{m:.3}")));
    }
    std::fs::create_dir_all(out.join("tables"))?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    for (name, csv) in report_tables(&report) {
        std::fs::write(out.join("tables").join(name), csv)?;
    }
    println!("report written to {}", out.display());
    Ok(())
}
