//! Implicit stage: per-category regime mixtures over projected layer
//! vectors, trained in two phases and linked across steps by bridge
//! matrices.

mod bridge;
mod decode;
mod em;
mod gmm;
mod select;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::category::{Category, NUM_CORE};
use crate::preprocess::ProjectedTrace;

pub use bridge::{
    explicit_bridge, round_percent, BridgeAccumulator, BridgePair, BridgeSet, ExplicitBridge,
    ExplicitBridgeAccumulator,
};
pub use decode::{decode, decode_all, decode_csv_header, DecodedTrace, PosteriorField, RegimePath};
pub use em::{
    fit_gmm, fit_gmm_from, fit_joint, fit_warmup, hard_labels, init_bridges, initial_gmm,
    CategoryFitLog, JointLog, WarmupFit,
};
pub use gmm::{
    bridged_prior, log_emission, log_sum_exp, responsibilities, step_log_likelihood, CategoryGmm,
    EmissionCache,
};
pub use select::{select_k, silhouette, KCategoryScore, KRow, KSelection};

pub const IMPLICIT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ImplicitError {
    #[error("insufficient data for {category}: {have} layer vectors, need {need}")]
    InsufficientData {
        category: Category,
        have: usize,
        need: usize,
    },
    #[error("no category had enough data to fit")]
    NoFittedCategories,
    #[error("category {0} has no fitted mixture")]
    UnfittedCategory(Category),
    #[error("silhouette needs at least two non-empty clusters")]
    SingleCluster,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("regime count mismatch: {0} vs {1}")]
    KMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("implicit model i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("implicit model json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported implicit model version {0}")]
    UnsupportedVersion(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    /// Greedy k-means++ seeding on a seeded subsample, refined by Lloyd
    /// iterations.
    KMeansPlusPlus,
    /// Distinct random subsample points as means.
    RandomPoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeMStep {
    /// `Σ γ_{t−1,L}(j)·γ_{t,1}(k)`, row-normalized.
    OuterProduct,
    /// Joint posterior `∝ γ_{t−1,L}(j)·Ĵ_{jk}·b_k(ĥ_{t,1})`, normalized over
    /// `(j, k)` per step.
    Coupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub k: usize,
    pub n_warmup: usize,
    pub n_joint: usize,
    pub seed: u64,
    pub var_floor: f64,
    pub weight_floor: f64,
    /// Phase 1 stops once the relative log-likelihood gain drops below this.
    pub tol: f64,
    pub init: InitMethod,
    pub init_subsample: usize,
    pub kmeans_iters: usize,
    pub bridge_mstep: BridgeMStep,
    /// Silhouette subsample size per category in K selection.
    pub n_sil: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            k: 6,
            n_warmup: 20,
            n_joint: 30,
            seed: 0,
            var_floor: 1e-6,
            weight_floor: 1e-8,
            tol: 1e-7,
            init: InitMethod::KMeansPlusPlus,
            init_subsample: 10_000,
            kmeans_iters: 20,
            bridge_mstep: BridgeMStep::OuterProduct,
            n_sil: 5000,
        }
    }
}

impl EmConfig {
    pub fn with_k(k: usize) -> Self {
        EmConfig {
            k,
            ..EmConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ImplicitError> {
        let bad = |m: &str| Err(ImplicitError::InvalidConfig(m.to_string()));
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if self.n_warmup == 0 || self.n_joint == 0 {
            return bad("iteration counts must be at least 1");
        }
        if !(self.var_floor > 0.0) || !(self.weight_floor > 0.0) {
            return bad("floors must be positive");
        }
        if self.init_subsample == 0 || self.n_sil < 2 {
            return bad("subsample sizes too small");
        }
        Ok(())
    }

    /// Minimum number of layer vectors for fitting a category.
    pub fn min_vectors(&self, dim: usize) -> usize {
        self.k.max((self.k * dim).div_ceil(4))
    }
}

/// Full training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub warmup: Vec<CategoryFitLog>,
    pub joint: JointLog,
    pub warnings: Vec<String>,
}

/// Fitted bundle: mixtures, bridges, configuration and training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplicitModel {
    pub version: u32,
    pub k: usize,
    pub dim: usize,
    pub layers: usize,
    /// Sorted in core order; categories without enough data are absent.
    pub gmms: Vec<CategoryGmm>,
    pub bridges: BridgeSet,
    pub config: EmConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<TrainingLog>,
}

impl ImplicitModel {
    pub fn gmm(&self, c: Category) -> Option<&CategoryGmm> {
        self.gmms.iter().find(|g| g.category == c)
    }

    pub(crate) fn gmm_table(&self) -> [Option<&CategoryGmm>; NUM_CORE] {
        let mut out = [None; NUM_CORE];
        for g in &self.gmms {
            if let Some(i) = g.category.core_index() {
                out[i] = Some(g);
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ImplicitError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImplicitError> {
        let m: ImplicitModel = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.version != IMPLICIT_VERSION {
            return Err(ImplicitError::UnsupportedVersion(m.version));
        }
        Ok(m)
    }
}

/// All layer vectors of one category, `N×D` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPoints {
    pub category: Category,
    pub dim: usize,
    pub points: Vec<f64>,
}

impl CategoryPoints {
    pub fn len(&self) -> usize {
        self.points.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

/// Groups every layer vector of every core step by category.
pub fn collect_category_points(trajectories: &[ProjectedTrace]) -> Vec<CategoryPoints> {
    let dim = trajectories.first().map_or(0, |t| t.features.dim);
    let mut out: Vec<CategoryPoints> = Category::CORE
        .iter()
        .map(|&c| CategoryPoints {
            category: c,
            dim,
            points: Vec::new(),
        })
        .collect();
    for tr in trajectories {
        for (t, c) in tr.categories.iter().enumerate() {
            if let Some(i) = c.core_index() {
                out[i].points.extend_from_slice(tr.features.step(t));
            }
        }
    }
    out
}

pub(crate) fn check_trajectories(trajectories: &[ProjectedTrace]) -> Result<(usize, usize), ImplicitError> {
    let first = trajectories
        .first()
        .ok_or(ImplicitError::NoFittedCategories)?;
    let (l, d) = (first.features.layers, first.features.dim);
    for tr in trajectories {
        if tr.features.layers != l || tr.features.dim != d {
            return Err(ImplicitError::DimMismatch(format!(
                "trajectory {:?} has L={} D={}, expected L={l} D={d}",
                tr.id, tr.features.layers, tr.features.dim
            )));
        }
        if tr.features.steps != tr.categories.len() {
            return Err(ImplicitError::DimMismatch(format!(
                "trajectory {:?} has {} categories for {} steps",
                tr.id,
                tr.categories.len(),
                tr.features.steps
            )));
        }
    }
    Ok((l, d))
}
