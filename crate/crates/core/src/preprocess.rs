//! Layer normalization, per-step RMS equalization and PCA projection.
//!
//! Raw activations `h[t][ℓ]` go through three maps, in order:
//!
//! 1. `h̃ = (h − μ_ℓ) / ρ_ℓ` with per-layer statistics estimated on training
//!    steps, where `ρ_ℓ = sqrt(E‖h − μ_ℓ‖² / d)`.
//! 2. `ȟ = h̃ / ρ_step` with `ρ_step = sqrt(Σ_ℓ ‖h̃_ℓ‖² / (L·d))`, one scalar per
//!    step.
//! 3. `ĥ = Wᵀ (ȟ − h̄)` with `W` the top principal directions of the training
//!    `ȟ` vectors.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::category::Category;
use crate::codec::{self, Matrix};
use crate::trace::{FeatureSpace, HiddenTensor, TraceSample, TraceSet};

pub const PREPROCESS_VERSION: u32 = 1;
pub const DEFAULT_D_PCA: usize = 128;
/// Floor on `ρ_ℓ` and `ρ_step`.
pub const EPS_RMS: f64 = 1e-8;

/// Rows per chunk when accumulating the covariance.
const COV_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("too few training vectors: have {have}, need at least {need}")]
    TooFewVectors { have: usize, need: usize },
    #[error("d_pca = {d_pca} exceeds hidden dimension {dim}")]
    DpcaExceedsD { d_pca: usize, dim: usize },
    #[error("d_pca must be positive")]
    ZeroDpca,
    #[error("layer {layer} is degenerate (rms {rho:e} below floor)")]
    DegenerateLayer { layer: usize, rho: f64 },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("preprocess model i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("preprocess model json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported preprocess model version {0}")]
    UnsupportedVersion(u32),
}

/// Frozen normalization statistics and PCA basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessModel {
    pub version: u32,
    pub layers: usize,
    pub dim: usize,
    pub d_pca: usize,
    /// `L×d` per-layer means.
    pub mu_layer: Matrix,
    pub rho_layer: Vec<f64>,
    /// `d×d_pca` basis with orthonormal columns.
    pub pca_basis: Matrix,
    #[serde(with = "codec::vector")]
    pub global_mean: Vec<f64>,
    /// Variance along each retained direction, non-increasing.
    pub explained_variance: Vec<f64>,
    /// Trace of the training covariance.
    pub total_variance: f64,
    pub n_train_vectors: usize,
    /// Training steps whose step RMS hit the floor.
    pub degenerate_train_steps: usize,
    /// PCA is fitted once per fit invocation (one configuration).
    pub scope: String,
}

impl PreprocessModel {
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        if self.total_variance <= 0.0 {
            return vec![0.0; self.explained_variance.len()];
        }
        self.explained_variance
            .iter()
            .map(|v| v / self.total_variance)
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PreprocessError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PreprocessError> {
        let m: PreprocessModel = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.version != PREPROCESS_VERSION {
            return Err(PreprocessError::UnsupportedVersion(m.version));
        }
        Ok(m)
    }
}

/// `T×L×D` projected features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedTensor {
    pub steps: usize,
    pub layers: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl ProjectedTensor {
    pub fn new(steps: usize, layers: usize, dim: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), steps * layers * dim, "projected payload size");
        ProjectedTensor {
            steps,
            layers,
            dim,
            values,
        }
    }

    pub fn vector(&self, t: usize, layer: usize) -> &[f64] {
        let s = (t * self.layers + layer) * self.dim;
        &self.values[s..s + self.dim]
    }

    /// The `L×D` block of step `t`.
    pub fn step(&self, t: usize) -> &[f64] {
        let n = self.layers * self.dim;
        &self.values[t * n..(t + 1) * n]
    }

    pub fn from_hidden(h: &HiddenTensor) -> Self {
        ProjectedTensor {
            steps: h.steps,
            layers: h.layers,
            dim: h.dim,
            values: h.values.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_hidden(&self) -> HiddenTensor {
        HiddenTensor::new(
            self.steps,
            self.layers,
            self.dim,
            self.values.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// Result of projecting one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub tensor: ProjectedTensor,
    /// Steps whose RMS was floored (not fatal).
    pub degenerate_steps: Vec<usize>,
}

/// One trajectory in projected space, ready for the implicit stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedTrace {
    pub id: String,
    pub categories: Vec<Category>,
    pub features: ProjectedTensor,
}

impl ProjectedTrace {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

/// Layer-normalizes every step of `h` and divides by its step RMS, calling
/// `sink(t, step_block, degenerate)` with the `L×d` result.
fn normalize_steps(
    h: &HiddenTensor,
    mu: &Matrix,
    rho: &[f64],
    mut sink: impl FnMut(usize, &[f64], bool),
) {
    let (l, d) = (h.layers, h.dim);
    let mut buf = vec![0.0f64; l * d];
    for t in 0..h.steps {
        let mut sq = 0.0;
        for layer in 0..l {
            let src = h.vector(t, layer);
            let m = mu.row(layer);
            let r = rho[layer];
            let dst = &mut buf[layer * d..(layer + 1) * d];
            for i in 0..d {
                let v = (src[i] as f64 - m[i]) / r;
                dst[i] = v;
                sq += v * v;
            }
        }
        let rho_step = (sq / (l * d) as f64).sqrt();
        let degenerate = rho_step < EPS_RMS;
        let scale = rho_step.max(EPS_RMS);
        for v in buf.iter_mut() {
            *v /= scale;
        }
        sink(t, &buf, degenerate);
    }
}

/// Fits layer statistics and the PCA basis on `train`.
pub fn fit_preprocess(train: &TraceSet, d_pca: usize) -> Result<PreprocessModel, PreprocessError> {
    let (l, d) = (train.layers, train.hidden_dim);
    if d_pca == 0 {
        return Err(PreprocessError::ZeroDpca);
    }
    if d_pca > d {
        return Err(PreprocessError::DpcaExceedsD { d_pca, dim: d });
    }
    let n_steps: usize = train.samples.iter().map(|s| s.tensor.steps).sum();
    let n_vectors = n_steps * l;
    let need = d_pca.max(2);
    if n_vectors < need {
        return Err(PreprocessError::TooFewVectors {
            have: n_vectors,
            need,
        });
    }
    for s in &train.samples {
        check_dims(&s.tensor, l, d)?;
    }

    let mut mu = Matrix::zeros(l, d);
    for s in &train.samples {
        for t in 0..s.tensor.steps {
            for layer in 0..l {
                let row = mu.row_mut(layer);
                for (acc, &v) in row.iter_mut().zip(s.tensor.vector(t, layer)) {
                    *acc += v as f64;
                }
            }
        }
    }
    for v in mu.data.iter_mut() {
        *v /= n_steps as f64;
    }

    let mut rho = vec![0.0f64; l];
    for s in &train.samples {
        for t in 0..s.tensor.steps {
            for (layer, acc) in rho.iter_mut().enumerate() {
                let m = mu.row(layer);
                *acc += s
                    .tensor
                    .vector(t, layer)
                    .iter()
                    .zip(m)
                    .map(|(&v, &mm)| (v as f64 - mm).powi(2))
                    .sum::<f64>();
            }
        }
    }
    for (layer, r) in rho.iter_mut().enumerate() {
        *r = (*r / (n_steps as f64 * d as f64)).sqrt();
        if *r < EPS_RMS {
            return Err(PreprocessError::DegenerateLayer { layer, rho: *r });
        }
    }

    let mut mean = vec![0.0f64; d];
    let mut degenerate_train_steps = 0usize;
    for s in &train.samples {
        normalize_steps(&s.tensor, &mu, &rho, |_, block, degen| {
            degenerate_train_steps += degen as usize;
            for v in block.chunks_exact(d) {
                for (m, x) in mean.iter_mut().zip(v) {
                    *m += x;
                }
            }
        });
    }
    for m in mean.iter_mut() {
        *m /= n_vectors as f64;
    }

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut chunk: Vec<f64> = Vec::with_capacity(COV_CHUNK * d);
    let flush = |chunk: &mut Vec<f64>, cov: &mut DMatrix<f64>| {
        if chunk.is_empty() {
            return;
        }
        let rows = chunk.len() / d;
        let x = DMatrix::from_row_slice(rows, d, chunk);
        cov.gemm_tr(1.0, &x, &x, 1.0);
        chunk.clear();
    };
    for s in &train.samples {
        normalize_steps(&s.tensor, &mu, &rho, |_, block, _| {
            for v in block.chunks_exact(d) {
                chunk.extend(v.iter().zip(&mean).map(|(x, m)| x - m));
                if chunk.len() >= COV_CHUNK * d {
                    flush(&mut chunk, &mut cov);
                }
            }
        });
    }
    flush(&mut chunk, &mut cov);
    cov /= (n_vectors - 1) as f64;
    // gemm_tr only guarantees symmetry up to rounding
    let cov = (&cov + cov.transpose()) * 0.5;
    let total_variance = cov.trace();

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut basis = Matrix::zeros(d, d_pca);
    let mut explained = Vec::with_capacity(d_pca);
    for (j, &src) in order.iter().take(d_pca).enumerate() {
        let col = eig.eigenvectors.column(src);
        let mut pivot = 0usize;
        for i in 1..d {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            basis.set(i, j, sign * col[i]);
        }
        explained.push(eig.eigenvalues[src].max(0.0));
    }
    // clamping can break monotonicity only among ~0 eigenvalues
    for j in 1..explained.len() {
        if explained[j] > explained[j - 1] {
            explained[j] = explained[j - 1];
        }
    }

    Ok(PreprocessModel {
        version: PREPROCESS_VERSION,
        layers: l,
        dim: d,
        d_pca,
        mu_layer: mu,
        rho_layer: rho,
        pca_basis: basis,
        global_mean: mean,
        explained_variance: explained,
        total_variance,
        n_train_vectors: n_vectors,
        degenerate_train_steps,
        scope: "per-invocation".to_string(),
    })
}

fn check_dims(h: &HiddenTensor, layers: usize, dim: usize) -> Result<(), PreprocessError> {
    if h.layers != layers || h.dim != dim {
        return Err(PreprocessError::DimMismatch(format!(
            "tensor has L={} d={}, model expects L={} d={}",
            h.layers, h.dim, layers, dim
        )));
    }
    Ok(())
}

/// Applies layer normalization, step RMS and PCA projection to one tensor.
pub fn apply_preprocess(
    model: &PreprocessModel,
    tensor: &HiddenTensor,
) -> Result<Projection, PreprocessError> {
    check_dims(tensor, model.layers, model.dim)?;
    let (l, d, p) = (model.layers, model.dim, model.d_pca);
    let mut out = vec![0.0f64; tensor.steps * l * p];
    let mut degenerate_steps = Vec::new();
    let mut centered = vec![0.0f64; d];
    normalize_steps(tensor, &model.mu_layer, &model.rho_layer, |t, block, degen| {
        if degen {
            degenerate_steps.push(t);
        }
        for layer in 0..l {
            let v = &block[layer * d..(layer + 1) * d];
            for i in 0..d {
                centered[i] = v[i] - model.global_mean[i];
            }
            let dst = &mut out[(t * l + layer) * p..(t * l + layer + 1) * p];
            for (i, &c) in centered.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let row = model.pca_basis.row(i);
                for j in 0..p {
                    dst[j] += row[j] * c;
                }
            }
        }
    });
    Ok(Projection {
        tensor: ProjectedTensor::new(tensor.steps, l, p, out),
        degenerate_steps,
    })
}

/// Projects every sample of `set`. Sets already in projected space pass
/// through unchanged and `model` is ignored.
pub fn project_trace_set(
    model: Option<&PreprocessModel>,
    set: &TraceSet,
) -> Result<Vec<ProjectedTrace>, PreprocessError> {
    let project = |s: &TraceSample| -> Result<ProjectedTrace, PreprocessError> {
        let features = match (set.space, model) {
            (FeatureSpace::Projected, _) => ProjectedTensor::from_hidden(&s.tensor),
            (FeatureSpace::Raw, Some(m)) => apply_preprocess(m, &s.tensor)?.tensor,
            (FeatureSpace::Raw, None) => {
                return Err(PreprocessError::DimMismatch(
                    "raw trace set needs a preprocess model".into(),
                ))
            }
        };
        Ok(ProjectedTrace {
            id: s.id.clone(),
            categories: s.categories(),
            features,
        })
    };
    crate::parallel::ordered_map(&set.samples, |_, s| project(s))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Correctness, StepRecord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    pub(crate) fn set_from_steps(layers: usize, dim: usize, steps: &[Vec<f32>]) -> TraceSet {
        let values: Vec<f32> = steps.iter().flatten().copied().collect();
        let sample = TraceSample {
            id: "s".into(),
            steps: (0..steps.len())
                .map(|i| StepRecord {
                    t: i as u32 + 1,
                    category: Category::Ac,
                    text: None,
                })
                .collect(),
            tensor: HiddenTensor::new(steps.len(), layers, dim, values),
            correctness: Correctness::Unlabeled,
            meta: BTreeMap::new(),
        };
        TraceSet::new(layers, dim, vec![sample])
    }

    #[test]
    fn identical_vectors_are_degenerate() {
        let set = set_from_steps(1, 3, &vec![vec![1.0, 2.0, 3.0]; 5]);
        assert!(matches!(
            fit_preprocess(&set, 1),
            Err(PreprocessError::DegenerateLayer { layer: 0, .. })
        ));
    }

    #[test]
    fn argument_errors() {
        let set = set_from_steps(1, 2, &[vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!(matches!(
            fit_preprocess(&set, 3),
            Err(PreprocessError::DpcaExceedsD { .. })
        ));
        let set = set_from_steps(1, 3, &[vec![1.0, 2.0, 0.0], vec![0.0, 1.0, 1.0]]);
        assert!(matches!(
            fit_preprocess(&set, 3),
            Err(PreprocessError::TooFewVectors { have: 2, need: 3 })
        ));
    }

    #[test]
    fn rank_one_data_has_all_variance_in_first_component() {
        // single layer so step RMS keeps collinearity up to sign
        let steps: Vec<Vec<f32>> = [-2.0f32, -1.0, 1.0, 2.0, 3.0]
            .iter()
            .map(|&s| vec![s, 2.0 * s, -s])
            .collect();
        let set = set_from_steps(1, 3, &steps);
        let m = fit_preprocess(&set, 1).unwrap();
        assert!((m.explained_variance[0] - m.total_variance).abs() < 1e-9);
        assert!((m.explained_variance_ratio()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_step_is_flagged_and_zero() {
        // symmetric training set: μ = 0 and h̄ = 0
        let steps = vec![
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
            vec![0.0, 0.0],
        ];
        let set = set_from_steps(1, 2, &steps);
        let m = fit_preprocess(&set, 2).unwrap();
        assert_eq!(m.degenerate_train_steps, 1);
        let p = apply_preprocess(&m, &set.samples[0].tensor).unwrap();
        assert_eq!(p.degenerate_steps, vec![4]);
        assert!(p.tensor.vector(4, 0).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn identity_model_divides_by_step_rms() {
        let mut m = PreprocessModel {
            version: PREPROCESS_VERSION,
            layers: 2,
            dim: 2,
            d_pca: 2,
            mu_layer: Matrix::zeros(2, 2),
            rho_layer: vec![1.0, 1.0],
            pca_basis: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            global_mean: vec![0.0, 0.0],
            explained_variance: vec![1.0, 1.0],
            total_variance: 2.0,
            n_train_vectors: 0,
            degenerate_train_steps: 0,
            scope: String::new(),
        };
        let h = HiddenTensor::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let rms = ((1.0f64 + 4.0 + 9.0 + 16.0) / 4.0).sqrt();
        let p = apply_preprocess(&m, &h).unwrap();
        for (got, raw) in p.tensor.values.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((got - raw / rms).abs() < 1e-12);
        }
        m.layers = 3;
        assert!(matches!(
            apply_preprocess(&m, &h),
            Err(PreprocessError::DimMismatch(_))
        ));
    }

    #[test]
    fn full_rank_reconstruction_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let steps: Vec<Vec<f32>> = (0..50)
            .map(|_| (0..8).map(|_| rng.random_range(-3.0f32..3.0)).collect())
            .collect();
        let set = set_from_steps(1, 8, &steps);
        let m = fit_preprocess(&set, 8).unwrap();
        for a in 0..8 {
            for b in 0..8 {
                let dot: f64 = (0..8).map(|i| m.pca_basis.get(i, a) * m.pca_basis.get(i, b)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6);
            }
        }
        for w in m.explained_variance.windows(2) {
            assert!(w[0] >= w[1]);
        }
        // W ĥ must give back the centered step-normalized vector
        let p = apply_preprocess(&m, &set.samples[0].tensor).unwrap();
        let mut checked = Vec::new();
        normalize_steps(&set.samples[0].tensor, &m.mu_layer, &m.rho_layer, |_, b, _| {
            checked.push(b.to_vec())
        });
        for (t, c) in checked.iter().enumerate() {
            let proj = p.tensor.vector(t, 0);
            for i in 0..8 {
                let rec: f64 = (0..8).map(|j| m.pca_basis.get(i, j) * proj[j]).sum();
                assert!((rec - (c[i] - m.global_mean[i])).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sign_convention_makes_pivot_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let steps: Vec<Vec<f32>> = (0..40)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let m = fit_preprocess(&set_from_steps(1, 4, &steps), 3).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..4).map(|i| m.pca_basis.get(i, j)).collect();
            let pivot = col
                .iter()
                .copied()
                .fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn model_json_round_trip() {
        let steps: Vec<Vec<f32>> = (0..6).map(|i| vec![i as f32, (i * i) as f32 * 0.5]).collect();
        let m = fit_preprocess(&set_from_steps(1, 2, &steps), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preprocess.json");
        m.save(&path).unwrap();
        let back = PreprocessModel::load(&path).unwrap();
        assert_eq!(back.d_pca, 2);
        for (a, b) in back.pca_basis.data.iter().zip(&m.pca_basis.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
