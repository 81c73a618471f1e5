//! Generative sampler for known parameters, plus regime matching for
//! recovery checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::category::{Category, NUM_CORE};
use crate::explicit::MarkovModel;
use crate::implicit::{BridgeSet, CategoryGmm};
use crate::parallel;
use crate::trace::{Correctness, FeatureSpace, HiddenTensor, StepRecord, TraceSample, TraceSet};

pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("regime count mismatch: truth K={0}, fitted K={1}")]
    KMismatch(usize, usize),
    #[error("params i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("params json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Parameters of the generative model. Mixtures and bridges use the same
/// schema as fitted implicit models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthParams {
    pub version: u32,
    /// First-order chain over core categories.
    pub markov: MarkovModel,
    /// One mixture per core category, in core order.
    pub gmms: Vec<CategoryGmm>,
    pub bridges: BridgeSet,
    /// Inclusive range of trajectory lengths.
    pub length_range: [usize; 2],
    pub layers: usize,
    pub dim: usize,
}

fn stochastic(v: &[f64]) -> bool {
    v.iter().all(|p| p.is_finite() && *p >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-9
}

impl GroundTruthParams {
    pub fn k(&self) -> usize {
        self.gmms.first().map_or(0, |g| g.k)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidParams(m));
        if self.version != PARAMS_VERSION {
            return bad(format!("version {} unsupported", self.version));
        }
        if self.markov.order != 1 {
            return bad("the sampler draws from a first-order chain".into());
        }
        if self.markov.trans.len() != NUM_CORE || !self.markov.trans.iter().all(|r| stochastic(r)) {
            return bad("transition rows must be stochastic".into());
        }
        if !stochastic(&self.markov.start) {
            return bad("start distribution must sum to 1".into());
        }
        if self.gmms.len() != NUM_CORE
            || self
                .gmms
                .iter()
                .zip(Category::CORE)
                .any(|(g, c)| g.category != c)
        {
            return bad("need one mixture per core category in FA, SR, AC, UV order".into());
        }
        let k = self.k();
        for g in &self.gmms {
            if g.k != k || g.dim != self.dim || k == 0 {
                return bad(format!("{} mixture has K={} D={}", g.category, g.k, g.dim));
            }
            if !g.variances.data.iter().all(|v| *v > 0.0 && v.is_finite())
                || !g.means.data.iter().all(|v| v.is_finite())
                || !stochastic(&g.weights)
            {
                return bad(format!("{} mixture has invalid entries", g.category));
            }
        }
        if self.bridges.k != k || self.bridges.pairs.len() != NUM_CORE * NUM_CORE {
            return bad("bridge set shape does not match K".into());
        }
        for p in &self.bridges.pairs {
            if p.entry.rows != k || p.entry.cols != k || !(0..k).all(|j| stochastic(p.entry.row(j))) {
                return bad(format!("bridge {}->{} rows must be stochastic", p.source, p.target));
            }
        }
        let [lo, hi] = self.length_range;
        if lo == 0 || lo > hi {
            return bad(format!("length range [{lo}, {hi}] invalid"));
        }
        if self.layers == 0 || self.dim == 0 {
            return bad("layers and dim must be positive".into());
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SynthError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let p: GroundTruthParams = serde_json::from_str(&fs::read_to_string(path)?)?;
        p.validate()?;
        Ok(p)
    }
}

fn pick(p: &[f64], rng: &mut impl Rng) -> usize {
    let mut u: f64 = rng.random();
    for (i, &v) in p.iter().enumerate() {
        if u < v {
            return i;
        }
        u -= v;
    }
    p.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

/// True regime labels of a sampled trajectory, `[t][layer]`.
pub type RegimeLabels = Vec<Vec<usize>>;

fn sample_one(params: &GroundTruthParams, i: usize, seed: u64) -> (TraceSample, RegimeLabels) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let [lo, hi] = params.length_range;
    let t_len = rng.random_range(lo..=hi);
    let (l_n, d) = (params.layers, params.dim);
    let mut values = Vec::with_capacity(t_len * l_n * d);
    let mut steps = Vec::with_capacity(t_len);
    let mut labels = Vec::with_capacity(t_len);
    let mut prev: Option<(usize, usize)> = None;
    for t in 0..t_len {
        let c = match prev {
            None => pick(&params.markov.start, &mut rng),
            Some((pc, _)) => pick(&params.markov.trans[pc], &mut rng),
        };
        let g = &params.gmms[c];
        let mut z = Vec::with_capacity(l_n);
        for l in 0..l_n {
            let zl = match (l, prev) {
                (0, Some((pc, exit))) => pick(params.bridges.entry_by_index(pc, c).row(exit), &mut rng),
                _ => pick(&g.weights, &mut rng),
            };
            let mu = g.means.row(zl);
            let var = g.variances.row(zl);
            for i in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                values.push((mu[i] + var[i].sqrt() * e) as f32);
            }
            z.push(zl);
        }
        prev = Some((c, z[l_n - 1]));
        steps.push(StepRecord {
            t: t as u32 + 1,
            category: Category::CORE[c],
            text: None,
        });
        labels.push(z);
    }
    let mut meta = BTreeMap::new();
    meta.insert("source".to_string(), "synthetic".to_string());
    meta.insert("seed".to_string(), seed.to_string());
    let sample = TraceSample {
        id: format!("synth-{i:05}"),
        steps,
        tensor: HiddenTensor::new(t_len, l_n, d, values),
        correctness: Correctness::Unlabeled,
        meta,
    };
    (sample, labels)
}

/// Draws `n` trajectories plus their true regime labels. Sample `i` uses its
/// own ChaCha stream of `seed`, so output is identical for any worker count.
pub fn sample_with_labels(
    params: &GroundTruthParams,
    n: usize,
    seed: u64,
) -> Result<(TraceSet, Vec<RegimeLabels>), SynthError> {
    params.validate()?;
    let idx: Vec<usize> = (0..n).collect();
    let drawn = parallel::ordered_map(&idx, |_, &i| sample_one(params, i, seed));
    let (samples, labels): (Vec<_>, Vec<_>) = drawn.into_iter().unzip();
    let mut set = TraceSet::new(params.layers, params.dim, samples);
    set.space = FeatureSpace::Projected;
    Ok((set, labels))
}

/// Draws `n` trajectories, already in projected space.
pub fn sample_trace_set(params: &GroundTruthParams, n: usize, seed: u64) -> Result<TraceSet, SynthError> {
    sample_with_labels(params, n, seed).map(|(s, _)| s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeMatch {
    /// `perm[i]` is the fitted regime matched to true regime `i`.
    pub perm: Vec<usize>,
    /// `sqrt(Σ_i ‖μ_i − μ̂_perm[i]‖²)`.
    pub mean_error: f64,
    pub max_mean_abs_error: f64,
    pub max_weight_abs_error: f64,
    pub max_variance_abs_error: f64,
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

/// Brute-force regime alignment minimizing summed squared mean distance.
/// Ties go to the lexicographically first permutation.
pub fn match_regimes(truth: &CategoryGmm, fitted: &CategoryGmm) -> Result<RegimeMatch, SynthError> {
    if truth.k != fitted.k {
        return Err(SynthError::KMismatch(truth.k, fitted.k));
    }
    if truth.dim != fitted.dim {
        return Err(SynthError::InvalidParams(format!(
            "dimension {} vs {}",
            truth.dim, fitted.dim
        )));
    }
    if truth.k > 8 {
        return Err(SynthError::InvalidParams("matching supports K <= 8".into()));
    }
    let k = truth.k;
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    truth
                        .means
                        .row(i)
                        .iter()
                        .zip(fitted.means.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                })
                .collect()
        })
        .collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in permutations(k) {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        if best.as_ref().is_none_or(|(b, _)| c < *b) {
            best = Some((c, p));
        }
    }
    let (total, perm) = best.unwrap();
    let mut max_mean: f64 = 0.0;
    let mut max_var: f64 = 0.0;
    let mut max_w: f64 = 0.0;
    for (i, &j) in perm.iter().enumerate() {
        for (a, b) in truth.means.row(i).iter().zip(fitted.means.row(j)) {
            max_mean = max_mean.max((a - b).abs());
        }
        for (a, b) in truth.variances.row(i).iter().zip(fitted.variances.row(j)) {
            max_var = max_var.max((a - b).abs());
        }
        max_w = max_w.max((truth.weights[i] - fitted.weights[j]).abs());
    }
    Ok(RegimeMatch {
        perm,
        mean_error: total.sqrt(),
        max_mean_abs_error: max_mean,
        max_weight_abs_error: max_w,
        max_variance_abs_error: max_var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Matrix;

    fn gmm(means: &[f64]) -> CategoryGmm {
        let k = means.len();
        CategoryGmm::new(
            Category::Ac,
            Matrix::from_rows(&means.iter().map(|&m| vec![m]).collect::<Vec<_>>()),
            Matrix::from_rows(&vec![vec![1.0]; k]),
            vec![1.0 / k as f64; k],
        )
    }

    #[test]
    fn matching_hand_cases() {
        let t = gmm(&[0.0, 10.0]);
        let m = match_regimes(&t, &gmm(&[9.9, 0.2])).unwrap();
        assert_eq!(m.perm, vec![1, 0]);
        assert!((m.mean_error - 0.05f64.sqrt()).abs() < 1e-12);
        let m = match_regimes(&t, &t).unwrap();
        assert_eq!(m.perm, vec![0, 1]);
        assert_eq!(m.mean_error, 0.0);
        let m = match_regimes(&t, &t.permuted(&[1, 0])).unwrap();
        assert_eq!(m.perm, vec![1, 0]);
        assert_eq!(m.mean_error, 0.0);
        assert!(matches!(match_regimes(&t, &gmm(&[1.0])), Err(SynthError::KMismatch(2, 1))));
    }

    #[test]
    fn permutation_count() {
        assert_eq!(permutations(4).len(), 24);
        assert_eq!(permutations(1), vec![vec![0]]);
    }
}
