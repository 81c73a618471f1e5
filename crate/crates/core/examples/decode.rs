//! Decode MAP regime paths under a fitted model and print one trace.
//!
//! cargo run --release --example decode

mod shared;

use prism::implicit::{decode, decode_csv_header, fit_joint, fit_warmup, EmConfig};
use prism::preprocess::project_trace_set;
use prism::synth::{match_regimes, sample_with_labels};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let truth = shared::demo_params(3);
    let (set, labels) = sample_with_labels(&truth, 150, 21)?;
    let trajs = project_trace_set(None, &set)?;
    let cfg = EmConfig::with_k(3);
    let model = fit_joint(&fit_warmup(&trajs, &cfg)?, &trajs, &cfg)?;
    // perms[c][true regime] = fitted regime
    let perms = truth
        .gmms
        .iter()
        .map(|g| match_regimes(g, model.gmm(g.category).unwrap()).map(|m| m.perm))
        .collect::<Result<Vec<_>, _>>()?;
    let d = decode(&model, &trajs[0])?;
    println!("trace {} (true regimes mapped to fitted labels):", d.id);
    for (t, c) in d.categories.iter().enumerate() {
        let ci = c.core_index().unwrap();
        let want: Vec<usize> = labels[0][t].iter().map(|&j| perms[ci][j]).collect();
        let got = d.path.steps[t].as_ref().unwrap();
        let mark = if *got == want { "" } else { "  <- differs" };
        println!("  t={:>2} {:>3} decoded {:?} true {:?}{mark}", t + 1, c.short(), got, want);
    }
    let mut csv = decode_csv_header(model.k);
    d.to_csv_rows(&mut csv);
    println!("first CSV rows:");
    for line in csv.lines().take(4) {
        println!("  {line}");
    }
    Ok(())
}
