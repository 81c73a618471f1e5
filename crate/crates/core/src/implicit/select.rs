//! Silhouette score and K selection.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::em::{category_rng, fit_gmm, hard_labels};
use super::{CategoryPoints, EmConfig, ImplicitError};
use crate::category::Category;

/// Mean silhouette of `points` (`N×dim` row-major) under `labels`. Points in
/// singleton clusters contribute 0, as do points with `max(a, b) = 0`.
pub fn silhouette(points: &[f64], dim: usize, labels: &[usize]) -> Result<f64, ImplicitError> {
    let n = labels.len();
    if points.len() != n * dim {
        return Err(ImplicitError::DimMismatch(format!(
            "{} values for {n} points of dimension {dim}",
            points.len()
        )));
    }
    let nc = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; nc];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(ImplicitError::SingleCluster);
    }
    let pt = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut sums = vec![0.0; nc];
    let mut total = 0.0;
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        let xi = pt(i);
        for j in 0..n {
            if i != j {
                let d2: f64 = xi.iter().zip(pt(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                sums[labels[j]] += d2.sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..nc)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KCategoryScore {
    pub category: Category,
    /// `None` when the category had too few vectors for this K.
    pub silhouette: Option<f64>,
    pub n_scored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRow {
    pub k: usize,
    /// Subsample-size-weighted mean over scored categories.
    pub silhouette: Option<f64>,
    pub categories: Vec<KCategoryScore>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub best_k: usize,
    pub rows: Vec<KRow>,
}

/// Phase-1 EM per K and category, hard labels, silhouette on a seeded
/// subsample of at most `cfg.n_sil` points per category. Best K maximizes
/// the weighted mean silhouette; scores within 1e-12 go to the smaller K.
pub fn select_k(
    data: &[CategoryPoints],
    k_min: usize,
    k_max: usize,
    cfg: &EmConfig,
) -> Result<KSelection, ImplicitError> {
    if k_min < 2 || k_min > k_max {
        return Err(ImplicitError::InvalidConfig(format!(
            "K range [{k_min}, {k_max}] must satisfy 2 <= min <= max"
        )));
    }
    // one subsample per category, shared across K
    let subsamples: Vec<Vec<usize>> = data
        .iter()
        .map(|pts| {
            let stream = 0x100 + pts.category.core_index().map_or(NUM_STREAMS, |i| i as u64);
            let mut rng = category_rng(cfg.seed, stream);
            let m = pts.len().min(cfg.n_sil);
            let mut idx = index::sample(&mut rng, pts.len(), m).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();

    let mut rows = Vec::new();
    for k in k_min..=k_max {
        let kcfg = EmConfig { k, ..cfg.clone() };
        kcfg.validate()?;
        let mut scores = Vec::new();
        let (mut num, mut den) = (0.0, 0usize);
        for (pts, sub) in data.iter().zip(&subsamples) {
            let stream = pts.category.core_index().map_or(NUM_STREAMS, |i| i as u64) + 1;
            let mut rng = category_rng(cfg.seed, stream);
            match fit_gmm(pts, &kcfg, &mut rng) {
                Ok((g, _)) => {
                    let labels = hard_labels(&g, pts);
                    let sub_labels: Vec<usize> = sub.iter().map(|&i| labels[i]).collect();
                    let sub_points: Vec<f64> = sub.iter().flat_map(|&i| pts.point(i).iter().copied()).collect();
                    let s = match silhouette(&sub_points, pts.dim, &sub_labels) {
                        Ok(s) => s,
                        Err(ImplicitError::SingleCluster) => 0.0,
                        Err(e) => return Err(e),
                    };
                    num += s * sub.len() as f64;
                    den += sub.len();
                    scores.push(KCategoryScore {
                        category: pts.category,
                        silhouette: Some(s),
                        n_scored: sub.len(),
                    });
                }
                Err(ImplicitError::InsufficientData { .. }) => scores.push(KCategoryScore {
                    category: pts.category,
                    silhouette: None,
                    n_scored: 0,
                }),
                Err(e) => return Err(e),
            }
        }
        let (silhouette, status) = if den > 0 {
            (Some(num / den as f64), "ok")
        } else {
            (None, "insufficient_data")
        };
        rows.push(KRow {
            k,
            silhouette,
            categories: scores,
            status: status.into(),
        });
    }
    let mut best: Option<(f64, usize)> = None;
    for r in &rows {
        if let Some(s) = r.silhouette {
            if best.is_none_or(|(b, _)| s > b + 1e-12) {
                best = Some((s, r.k));
            }
        }
    }
    let (_, best_k) = best.ok_or(ImplicitError::NoFittedCategories)?;
    Ok(KSelection { best_k, rows })
}

const NUM_STREAMS: u64 = 7;
