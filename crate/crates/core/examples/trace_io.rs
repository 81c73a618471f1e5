//! Build a small trace set in memory, write it to disk and read it back.
//!
//! cargo run --example trace_io -- [out_dir]

use std::collections::BTreeMap;

use prism::trace::{load_trace_set, save_trace_set, Correctness, HiddenTensor, StepRecord, TraceSample, TraceSet};
use prism::Category;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("prism-trace-io"));
    let (layers, dim) = (2, 3);
    let cats = [
        vec![Category::Sr, Category::Ac, Category::Ac, Category::Fa],
        vec![Category::Sr, Category::Uv, Category::Unk, Category::Ac, Category::Fa, Category::Uv],
    ];
    let samples: Vec<TraceSample> = cats
        .iter()
        .enumerate()
        .map(|(i, cs)| {
            let values = (0..cs.len() * layers * dim).map(|v| (v as f32).sin()).collect();
            let mut meta = BTreeMap::new();
            meta.insert("model".to_string(), "demo".to_string());
            TraceSample {
                id: format!("trace-{i}"),
                steps: cs
                    .iter()
                    .enumerate()
                    .map(|(t, &category)| StepRecord { t: t as u32 + 1, category, text: Some(format!("step {}", t + 1)) })
                    .collect(),
                tensor: HiddenTensor::new(cs.len(), layers, dim, values),
                correctness: if i == 0 { Correctness::Correct } else { Correctness::Incorrect },
                meta,
            }
        })
        .collect();
    let set = TraceSet::new(layers, dim, samples);
    save_trace_set(&set, &out)?;
    let back = load_trace_set(&out)?;
    println!("wrote {} samples to {}", back.samples.len(), out.display());
    for s in &back.samples {
        let labels: Vec<&str> = s.categories().iter().map(|c| c.short()).collect();
        println!("  {} ({:?}): {}", s.id, s.correctness, labels.join(" "));
    }
    println!("round trip identical: {}", back == set);
    Ok(())
}
