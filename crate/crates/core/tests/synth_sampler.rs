mod common;

use prism::codec::Matrix;
use prism::explicit::fit_markov;
use prism::synth::{sample_trace_set, sample_with_labels, GroundTruthParams, SynthError};
use prism::trace::{Correctness, FeatureSpace};

#[test]
fn same_seed_same_set() {
    let p = common::params(common::mixing_chain(), 3, 3, 2, [4, 9]);
    let a = sample_trace_set(&p, 25, 7).unwrap();
    let b = sample_trace_set(&p, 25, 7).unwrap();
    let c = sample_trace_set(&p, 25, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.space, FeatureSpace::Projected);
    assert!(a.samples.iter().all(|s| (4..=9).contains(&s.len()) && s.correctness == Correctness::Unlabeled));
    assert_eq!(a.samples[3].id, "synth-00003");
    // a prefix of a larger draw is the smaller draw
    let big = sample_trace_set(&p, 40, 7).unwrap();
    assert_eq!(&big.samples[..25], &a.samples[..]);
}

#[test]
fn vanishing_noise_puts_vectors_on_the_means() {
    let mut p = common::params(common::mixing_chain(), 3, 2, 3, [5, 5]);
    for g in &mut p.gmms {
        g.variances = Matrix::from_rows(&vec![vec![1e-12; 2]; 3]);
    }
    let (set, labels) = sample_with_labels(&p, 20, 1).unwrap();
    for (s, lab) in set.samples.iter().zip(&labels) {
        for (t, c) in s.categories().iter().enumerate() {
            let g = &p.gmms[c.core_index().unwrap()];
            for l in 0..3 {
                let x = s.tensor.vector(t, l);
                let m = g.means.row(lab[t][l]);
                for i in 0..2 {
                    assert!((x[i] as f64 - m[i]).abs() < 1e-4);
                }
            }
        }
    }
}

#[test]
fn transition_frequencies_match_the_chain() {
    let p = common::params(common::mixing_chain(), 2, 1, 1, [1000, 1000]);
    let set = sample_trace_set(&p, 100, 3).unwrap();
    let fitted = fit_markov(&set.category_sequences(), 1).unwrap();
    assert!(fitted.n_transitions >= 99_900);
    for i in 0..4 {
        for j in 0..4 {
            assert!((fitted.trans[i][j] - p.markov.trans[i][j]).abs() < 0.01);
        }
    }
}

#[test]
fn emission_moments_match_the_mixture() {
    let p = common::params(common::cyclic_chain(0.5), 2, 2, 2, [50, 50]);
    let (set, labels) = sample_with_labels(&p, 200, 4).unwrap();
    let mut sums = vec![[0.0f64; 4]; 8];
    let mut n = vec![0usize; 8];
    for (s, lab) in set.samples.iter().zip(&labels) {
        for (t, c) in s.categories().iter().enumerate() {
            for l in 0..2 {
                let slot = c.core_index().unwrap() * 2 + lab[t][l];
                let x = s.tensor.vector(t, l);
                sums[slot][0] += x[0] as f64;
                sums[slot][1] += x[1] as f64;
                sums[slot][2] += (x[0] as f64).powi(2);
                sums[slot][3] += (x[1] as f64).powi(2);
                n[slot] += 1;
            }
        }
    }
    for slot in 0..8 {
        let g = &p.gmms[slot / 2];
        let k = slot % 2;
        let nn = n[slot] as f64;
        for d in 0..2 {
            let mean = sums[slot][d] / nn;
            let var = sums[slot][d + 2] / nn - mean * mean;
            assert!((mean - g.means.get(k, d)).abs() < 5.0 / nn.sqrt(), "slot {slot} mean");
            assert!((var - g.variances.get(k, d)).abs() < 0.15, "slot {slot} var {var}");
        }
    }
}

#[test]
fn params_round_trip_and_validation() {
    let p = common::params(common::mixing_chain(), 2, 3, 2, [3, 6]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    p.save(&path).unwrap();
    let back = GroundTruthParams::load(&path).unwrap();
    assert_eq!(back.k(), 2);
    assert_eq!(back.length_range, [3, 6]);

    let mut bad = p.clone();
    bad.length_range = [5, 2];
    assert!(matches!(bad.validate(), Err(SynthError::InvalidParams(_))));
    let mut bad = p.clone();
    bad.gmms.swap(0, 1);
    assert!(matches!(bad.validate(), Err(SynthError::InvalidParams(_))));
    let mut bad = p;
    bad.markov.trans[0] = vec![0.5, 0.5, 0.5, 0.0];
    assert!(sample_trace_set(&bad, 1, 0).is_err());
}
