//! Chain analytics on a fixed transition table: stationary
//! distribution, expected steps to FA and the correct-minus-incorrect diff.
//!
//! cargo run --example markov_chain

use prism::explicit::{hitting_times, stationary_distribution, transition_diff, MarkovModel};
use prism::Category;

fn table(rows: [[f64; 4]; 4]) -> MarkovModel {
    MarkovModel::from_probabilities(&rows.map(|r| r.to_vec()), None).expect("valid table")
}

fn main() {
    let pooled = table([
        [0.466, 0.076, 0.131, 0.326],
        [0.038, 0.419, 0.445, 0.098],
        [0.060, 0.079, 0.715, 0.147],
        [0.124, 0.119, 0.320, 0.438],
    ]);
    let (pi, unique) = stationary_distribution(&pooled.trans);
    println!("stationary (unique: {unique}):");
    for (c, p) in Category::CORE.iter().zip(&pi) {
        println!("  {:>3} {:.4}", c.short(), p);
    }
    println!("expected steps to first FA:");
    for (i, h) in hitting_times(&pooled.trans, 0).iter().enumerate().skip(1) {
        match h {
            Some(h) => println!("  from {:>3}: {:.2}", Category::CORE[i].short(), h),
            None => println!("  from {:>3}: never", Category::CORE[i].short()),
        }
    }

    let correct = table([
        [0.454, 0.085, 0.131, 0.331],
        [0.034, 0.416, 0.464, 0.086],
        [0.061, 0.073, 0.734, 0.132],
        [0.120, 0.117, 0.342, 0.421],
    ]);
    let incorrect = table([
        [0.487, 0.062, 0.131, 0.319],
        [0.043, 0.424, 0.413, 0.119],
        [0.057, 0.088, 0.683, 0.172],
        [0.129, 0.122, 0.283, 0.466],
    ]);
    let d = transition_diff(&correct, &incorrect).unwrap();
    println!("correct - incorrect:");
    print!("{}", prism::explicit::matrix_csv(&d, 1));
}
