#![allow(dead_code)]

use std::collections::BTreeMap;

use prism::codec::Matrix;
use prism::explicit::MarkovModel;
use prism::implicit::{BridgeAccumulator, BridgeSet, CategoryGmm};
use prism::synth::{GroundTruthParams, RegimeLabels, PARAMS_VERSION};
use prism::trace::{Correctness, HiddenTensor, StepRecord, TraceSample, TraceSet};
use prism::Category;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SR→AC→UV→FA→SR with probability `p_next`, self-loop otherwise.
pub fn cyclic_chain(p_next: f64) -> MarkovModel {
    let mut rows = vec![vec![0.0; 4]; 4];
    // core order FA, SR, AC, UV
    let next = [1, 2, 3, 0];
    for i in 0..4 {
        rows[i][i] = 1.0 - p_next;
        rows[i][next[i]] = p_next;
    }
    MarkovModel::from_probabilities(&rows, Some(vec![0.25; 4])).unwrap()
}

pub fn mixing_chain() -> MarkovModel {
    MarkovModel::from_probabilities(
        &[
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.2, 0.3, 0.3, 0.2],
            vec![0.25, 0.2, 0.3, 0.25],
            vec![0.3, 0.2, 0.2, 0.3],
        ],
        Some(vec![0.25; 4]),
    )
    .unwrap()
}

/// Regime `j` of category `c` sits at `sep` along axis `j % dim`, shifted
/// by `c` along the last axis; unit variances.
pub fn separated_gmms(k: usize, dim: usize, sep: f64) -> Vec<CategoryGmm> {
    let base_w: Vec<f64> = match k {
        1 => vec![1.0],
        2 => vec![0.6, 0.4],
        3 => vec![0.5, 0.3, 0.2],
        _ => vec![1.0 / k as f64; k],
    };
    Category::CORE
        .iter()
        .enumerate()
        .map(|(ci, &c)| {
            let mut means = Matrix::zeros(k, dim);
            for j in 0..k {
                means.set(j, j % dim, sep * (1 + j / dim) as f64);
                let last = dim - 1;
                means.set(j, last, means.get(j, last) + ci as f64);
            }
            let weights: Vec<f64> = (0..k).map(|j| base_w[(j + ci) % k]).collect();
            CategoryGmm::new(c, means, Matrix::from_rows(&vec![vec![1.0; dim]; k]), weights)
        })
        .collect()
}

/// Entry row `j` puts `strength` on regime `(j + s + t + 1) % k`.
pub fn shifted_bridges(k: usize, strength: f64) -> BridgeSet {
    let mut entries = Vec::new();
    for s in 0..4 {
        for t in 0..4 {
            let mut m = Matrix::zeros(k, k);
            for j in 0..k {
                for kk in 0..k {
                    let hot = (j + s + t + 1) % k == kk;
                    let v = if k == 1 {
                        1.0
                    } else if hot {
                        strength
                    } else {
                        (1.0 - strength) / (k - 1) as f64
                    };
                    m.set(j, kk, v);
                }
            }
            entries.push(m);
        }
    }
    BridgeSet::from_entries(k, &entries)
}

pub fn params(markov: MarkovModel, k: usize, dim: usize, layers: usize, len: [usize; 2]) -> GroundTruthParams {
    GroundTruthParams {
        version: PARAMS_VERSION,
        markov,
        gmms: separated_gmms(k, dim, 8.0),
        bridges: shifted_bridges(k, 0.7),
        length_range: len,
        layers,
        dim,
    }
}

/// Bridge estimated from the true regime labels of a sample.
pub fn complete_data_bridges(set: &TraceSet, labels: &[RegimeLabels], k: usize) -> BridgeSet {
    let mut acc = BridgeAccumulator::new(k);
    let one_hot = |j: usize| {
        let mut v = vec![0.0; k];
        v[j] = 1.0;
        v
    };
    for (s, lab) in set.samples.iter().zip(labels) {
        let cats = s.categories();
        for t in 1..cats.len() {
            let (a, b) = (cats[t - 1].core_index().unwrap(), cats[t].core_index().unwrap());
            let exit = one_hot(*lab[t - 1].last().unwrap());
            let entry = one_hot(lab[t][0]);
            acc.add_outer(a, b, &exit, &entry);
        }
    }
    acc.finish()
}

pub fn random_category(rng: &mut impl Rng, with_unk: bool) -> Category {
    let n = if with_unk { 5 } else { 4 };
    Category::ALL[rng.random_range(0..n)]
}

/// Random raw trace set with `n` samples.
pub fn random_trace_set(rng: &mut impl Rng, n: usize, layers: usize, dim: usize, max_len: usize) -> TraceSet {
    let samples = (0..n)
        .map(|i| {
            let t = rng.random_range(1..=max_len);
            let steps = (1..=t as u32)
                .map(|t| StepRecord {
                    t,
                    category: random_category(rng, true),
                    text: if rng.random_bool(0.3) { Some(format!("step {t}")) } else { None },
                })
                .collect();
            let values = (0..t * layers * dim).map(|_| rng.random_range(-3.0f32..3.0)).collect();
            let mut meta = BTreeMap::new();
            meta.insert("model".into(), format!("m{}", i % 2));
            meta.insert("dataset".into(), "d".into());
            TraceSample {
                id: format!("s{i}"),
                steps,
                tensor: HiddenTensor::new(t, layers, dim, values),
                correctness: [Correctness::Correct, Correctness::Incorrect, Correctness::Unlabeled][i % 3],
                meta,
            }
        })
        .collect();
    TraceSet::new(layers, dim, samples)
}

/// Symbols from an order-2 source where the successor is fixed by the pair
/// with probability `p`.
pub fn order2_sequences(rng: &mut impl Rng, n_seq: usize, len: usize, p: f64) -> Vec<Vec<Category>> {
    (0..n_seq)
        .map(|_| {
            let mut s = vec![random_category(rng, false), random_category(rng, false)];
            while s.len() < len {
                let a = s[s.len() - 2].core_index().unwrap();
                let b = s[s.len() - 1].core_index().unwrap();
                let next = if rng.random_bool(p) {
                    (a * 3 + b * 2 + 1) % 4
                } else {
                    rng.random_range(0..4)
                };
                s.push(Category::CORE[next]);
            }
            s
        })
        .collect()
}

pub fn iid_sequences(rng: &mut impl Rng, n_seq: usize, len: usize) -> Vec<Vec<Category>> {
    (0..n_seq)
        .map(|_| (0..len).map(|_| random_category(rng, false)).collect())
        .collect()
}

/// Walks `p` from `from` until `target`, returning the step count.
pub fn walk_to(p: &[Vec<f64>], from: usize, target: usize, rng: &mut impl Rng) -> usize {
    let mut s = from;
    let mut n = 0;
    while s != target {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = p[s].len() - 1;
        for (j, &v) in p[s].iter().enumerate() {
            acc += v;
            if u < acc {
                next = j;
                break;
            }
        }
        s = next;
        n += 1;
    }
    n
}
