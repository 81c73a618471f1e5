//! Silhouette sweep over the number of regimes.
//!
//! cargo run --release --example k_selection

mod shared;

use prism::implicit::{collect_category_points, select_k, EmConfig};
use prism::preprocess::project_trace_set;
use prism::synth::sample_trace_set;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let truth = shared::demo_params(4);
    let set = sample_trace_set(&truth, 120, 2)?;
    let trajs = project_trace_set(None, &set)?;
    let points = collect_category_points(&trajs);
    let cfg = EmConfig { n_sil: 1500, ..EmConfig::with_k(3) };
    let sel = select_k(&points, 2, 6, &cfg)?;
    for row in &sel.rows {
        let per: Vec<String> = row
            .categories
            .iter()
            .map(|c| format!("{}={}", c.category.short(), c.silhouette.map_or("-".into(), |s| format!("{s:.3}"))))
            .collect();
        println!("K={} mean silhouette {} [{}]", row.k, row.silhouette.map_or("-".into(), |s| format!("{s:.3}")), per.join(" "));
    }
    println!("selected K = {} (truth {})", sel.best_k, truth.k());
    Ok(())
}
