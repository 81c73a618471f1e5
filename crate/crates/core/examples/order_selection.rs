//! BIC order selection on sequences from first- and second-order sources.
//!
//! cargo run --example order_selection

use prism::explicit::select_order;
use prism::Category;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn source(rng: &mut ChaCha8Rng, second_order: bool) -> Vec<Vec<Category>> {
    (0..40)
        .map(|_| {
            let mut s: Vec<usize> = vec![rng.random_range(0..4), rng.random_range(0..4)];
            while s.len() < 200 {
                let (a, b) = (s[s.len() - 2], s[s.len() - 1]);
                let next = if second_order && rng.random_bool(0.6) { (3 * a + 2 * b + 1) % 4 } else { rng.random_range(0..4) };
                s.push(next);
            }
            s.into_iter().map(|i| Category::CORE[i]).collect()
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (name, second) in [("i.i.d. source", false), ("second-order source", true)] {
        let sel = select_order(&source(&mut rng, second), 1, 3)?;
        println!("{name}:");
        for r in &sel.rows {
            println!("  m={} params={} bic={}", r.order, r.n_params, r.bic.map_or(r.status.clone(), |b| format!("{b:.1}")));
        }
        println!("  selected order {}", sel.best_order);
    }
    Ok(())
}
