//! Forward MAP decoding of regime paths.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::gmm::{bridged_prior, normalize_log, EmissionCache};
use super::{ImplicitError, ImplicitModel};
use crate::category::{Category, NUM_CORE};
use crate::parallel;
use crate::preprocess::ProjectedTrace;

/// Per-step `L×K` posteriors; `None` for UNK steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorField {
    pub layers: usize,
    pub k: usize,
    pub steps: Vec<Option<Vec<f64>>>,
}

impl PosteriorField {
    pub fn layer(&self, t: usize, l: usize) -> Option<&[f64]> {
        self.steps[t].as_deref().map(|g| &g[l * self.k..(l + 1) * self.k])
    }

    /// Exit posterior (last layer) of step `t`.
    pub fn exit(&self, t: usize) -> Option<&[f64]> {
        self.layer(t, self.layers - 1)
    }
}

/// Per-step, per-layer hard labels; `None` for UNK steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimePath {
    pub steps: Vec<Option<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedTrace {
    pub id: String,
    pub categories: Vec<Category>,
    pub path: RegimePath,
    pub posteriors: PosteriorField,
}

impl DecodedTrace {
    /// Rows of `id,t,layer,category,regime,p0..p{K-1}`; `t` and `layer` are
    /// 1-based.
    pub fn to_csv_rows(&self, out: &mut String) {
        for (t, labels) in self.path.steps.iter().enumerate() {
            let Some(labels) = labels else { continue };
            for (l, z) in labels.iter().enumerate() {
                let _ = write!(out, "{},{},{},{},{}", self.id, t + 1, l + 1, self.categories[t], z);
                for p in self.posteriors.layer(t, l).unwrap() {
                    let _ = write!(out, ",{p:.6}");
                }
                out.push('\n');
            }
        }
    }
}

pub fn decode_csv_header(k: usize) -> String {
    let mut h = String::from("id,t,layer,category,regime");
    for i in 0..k {
        let _ = write!(h, ",p{i}");
    }
    h.push('\n');
    h
}

/// Decodes one trajectory. Layer 1 of a step whose predecessor is an
/// adjacent core step uses the bridged prior; every other layer uses the
/// mixture weights. Labels are `argmax_k` of log prior plus log emission,
/// ties to the smaller `k`.
pub fn decode(model: &ImplicitModel, tr: &ProjectedTrace) -> Result<DecodedTrace, ImplicitError> {
    let f = &tr.features;
    if f.dim != model.dim || f.layers != model.layers {
        return Err(ImplicitError::DimMismatch(format!(
            "trajectory {:?} has L={} D={}, model L={} D={}",
            tr.id, f.layers, f.dim, model.layers, model.dim
        )));
    }
    let table = model.gmm_table();
    for c in &tr.categories {
        if let Some(i) = c.core_index() {
            if table[i].is_none() {
                return Err(ImplicitError::UnfittedCategory(*c));
            }
        }
    }
    let mut caches: [Option<EmissionCache<'_>>; NUM_CORE] = [None, None, None, None];
    for (i, g) in table.iter().enumerate() {
        caches[i] = g.map(EmissionCache::new);
    }
    let (k, layers, d) = (model.k, f.layers, f.dim);
    let mut path = Vec::with_capacity(f.steps);
    let mut post = Vec::with_capacity(f.steps);
    let mut prev: Option<(usize, Vec<f64>)> = None;
    let mut scores = vec![0.0; k];
    for t in 0..f.steps {
        let Some(ci) = tr.categories[t].core_index() else {
            path.push(None);
            post.push(None);
            prev = None;
            continue;
        };
        let cache = caches[ci].as_ref().unwrap();
        let log_w = &cache.log_weights;
        let log_prior1: Vec<f64> = match &prev {
            Some((pc, exit)) => bridged_prior(exit, model.bridges.entry_by_index(*pc, ci))
                .iter()
                .map(|p| p.ln())
                .collect(),
            None => log_w.clone(),
        };
        let x = f.step(t);
        let mut labels = Vec::with_capacity(layers);
        let mut gamma = Vec::with_capacity(layers * k);
        for l in 0..layers {
            let lp = if l == 0 { &log_prior1 } else { log_w };
            let xl = &x[l * d..(l + 1) * d];
            let mut best = (f64::NEG_INFINITY, 0usize);
            for kk in 0..k {
                scores[kk] = lp[kk] + cache.log_emission(kk, xl);
                if scores[kk] > best.0 {
                    best = (scores[kk], kk);
                }
            }
            labels.push(best.1);
            normalize_log(&mut scores);
            gamma.extend_from_slice(&scores);
        }
        prev = Some((ci, gamma[(layers - 1) * k..].to_vec()));
        path.push(Some(labels));
        post.push(Some(gamma));
    }
    Ok(DecodedTrace {
        id: tr.id.clone(),
        categories: tr.categories.clone(),
        path: RegimePath { steps: path },
        posteriors: PosteriorField {
            layers,
            k,
            steps: post,
        },
    })
}

/// Decodes every trajectory, in input order.
pub fn decode_all(model: &ImplicitModel, trajectories: &[ProjectedTrace]) -> Result<Vec<DecodedTrace>, ImplicitError> {
    parallel::ordered_map(trajectories, |_, tr| decode(model, tr))
        .into_iter()
        .collect()
}
