//! Two-phase EM.
//!
//! Phase 1 fits each category's mixture independently, with the mixture
//! weights as prior for every layer. Phase 2 initializes the bridges from
//! Phase-1 posteriors and alternates a forward E-pass over each trajectory
//! (layer-1 prior from the previous step's exit posterior through the
//! bridge) with M-steps: means and variances over all layers, weights over
//! layers ≥ 2, bridges from adjacent-step posteriors.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bridge::{BridgeAccumulator, BridgeSet, ExplicitBridgeAccumulator};
use super::gmm::{bridged_prior, CategoryGmm, EmissionCache};
use super::{
    check_trajectories, collect_category_points, BridgeMStep, CategoryPoints, EmConfig,
    ImplicitError, ImplicitModel, InitMethod, TrainingLog, IMPLICIT_VERSION,
};
use crate::category::{Category, NUM_CORE};
use crate::codec::Matrix;
use crate::parallel;
use crate::preprocess::ProjectedTrace;

const POINT_CHUNK: usize = 2048;
const TRAJ_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryFitLog {
    pub category: Category,
    pub n_vectors: usize,
    pub iterations: usize,
    /// Log-likelihood of the initial parameters followed by one value per
    /// M-step.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    /// Some variance hit the floor (e.g. identical points).
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmupFit {
    pub gmms: Vec<CategoryGmm>,
    pub logs: Vec<CategoryFitLog>,
    pub warnings: Vec<String>,
}

impl WarmupFit {
    /// Sum of the final Phase-1 log-likelihoods.
    pub fn total_log_likelihood(&self) -> f64 {
        self.logs
            .iter()
            .filter(|l| l.skipped.is_none())
            .filter_map(|l| l.log_likelihood.last())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLog {
    pub bridge_mstep: BridgeMStep,
    pub phase1_log_likelihood: f64,
    /// Joint log-likelihood at each E-pass, the last after the final M-step.
    pub log_likelihood: Vec<f64>,
    pub max_relative_decrease: f64,
    /// Final joint likelihood is within 1e-6 relative of Phase 1 or better.
    pub not_below_phase1: bool,
    pub missing_pairs: Vec<String>,
}

#[derive(Debug, Clone)]
struct MixStats {
    k: usize,
    d: usize,
    nk: Vec<f64>,
    sx: Vec<f64>,
    sxx: Vec<f64>,
    /// Responsibility mass used for the weight update.
    wk: Vec<f64>,
    ll: f64,
}

impl MixStats {
    fn new(k: usize, d: usize) -> Self {
        MixStats {
            k,
            d,
            nk: vec![0.0; k],
            sx: vec![0.0; k * d],
            sxx: vec![0.0; k * d],
            wk: vec![0.0; k],
            ll: 0.0,
        }
    }

    fn add(&mut self, x: &[f64], gamma: &[f64], counts_for_weights: bool) {
        let d = self.d;
        for (k, &g) in gamma.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.nk[k] += g;
            if counts_for_weights {
                self.wk[k] += g;
            }
            let sx = &mut self.sx[k * d..(k + 1) * d];
            let sxx = &mut self.sxx[k * d..(k + 1) * d];
            for i in 0..d {
                let gx = g * x[i];
                sx[i] += gx;
                sxx[i] += gx * x[i];
            }
        }
    }

    fn merge(&mut self, o: &MixStats) {
        for (a, b) in self.nk.iter_mut().zip(&o.nk) {
            *a += b;
        }
        for (a, b) in self.wk.iter_mut().zip(&o.wk) {
            *a += b;
        }
        for (a, b) in self.sx.iter_mut().zip(&o.sx) {
            *a += b;
        }
        for (a, b) in self.sxx.iter_mut().zip(&o.sxx) {
            *a += b;
        }
        self.ll += o.ll;
    }
}

/// M-step from sufficient statistics. Returns the new mixture and whether
/// any variance was floored.
fn m_step(g: &CategoryGmm, s: &MixStats, cfg: &EmConfig) -> (CategoryGmm, bool) {
    let (k, d) = (s.k, s.d);
    let total: f64 = s.nk.iter().sum();
    let mut means = g.means.clone();
    let mut variances = g.variances.clone();
    let mut floored = false;
    for c in 0..k {
        let n = s.nk[c];
        if !(n > 1e-12 * total.max(1.0)) {
            continue;
        }
        for i in 0..d {
            let mu = s.sx[c * d + i] / n;
            let var = s.sxx[c * d + i] / n - mu * mu;
            means.set(c, i, mu);
            if var < cfg.var_floor {
                floored = true;
            }
            variances.set(c, i, var.max(cfg.var_floor));
        }
    }
    let wsum: f64 = s.wk.iter().sum();
    let raw: &[f64] = if wsum > 0.0 { &s.wk } else { &s.nk };
    let rsum: f64 = raw.iter().sum();
    let weights = floor_weights(raw.iter().map(|w| w / rsum).collect(), cfg.weight_floor);
    (CategoryGmm::new(g.category, means, variances, weights), floored)
}

fn floor_weights(mut w: Vec<f64>, floor: f64) -> Vec<f64> {
    if w.iter().any(|&v| !(v >= floor)) {
        for v in w.iter_mut() {
            if !(*v >= floor) {
                *v = floor;
            }
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
    }
    w
}

fn e_step_points(g: &CategoryGmm, pts: &CategoryPoints) -> MixStats {
    let n = pts.len();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(POINT_CHUNK)
        .map(|s| (s, (s + POINT_CHUNK).min(n)))
        .collect();
    let parts = parallel::ordered_map(&chunks, |_, &(a, b)| {
        let cache = EmissionCache::new(g);
        let mut st = MixStats::new(g.k, g.dim);
        let mut gamma = vec![0.0; g.k];
        for i in a..b {
            let x = pts.point(i);
            st.ll += cache.posterior(x, &cache.log_weights, &mut gamma);
            st.add(x, &gamma, true);
        }
        st
    });
    let mut total = MixStats::new(g.k, g.dim);
    for p in &parts {
        total.merge(p);
    }
    total
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Picks an index with probability proportional to `w`.
fn weighted_pick(w: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return rng.random_range(0..w.len());
    }
    let mut u = rng.random::<f64>() * total;
    for (i, &v) in w.iter().enumerate() {
        if u < v {
            return i;
        }
        u -= v;
    }
    w.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

/// Starting mixture for `pts`.
pub fn initial_gmm(
    category: Category,
    pts: &CategoryPoints,
    cfg: &EmConfig,
    rng: &mut impl Rng,
) -> CategoryGmm {
    let (k, d) = (cfg.k, pts.dim);
    let n = pts.len();
    let m = n.min(cfg.init_subsample);
    let idx = index::sample(rng, n, m).into_vec();
    let sub: Vec<&[f64]> = idx.iter().map(|&i| pts.point(i)).collect();

    let mut global_mean = vec![0.0; d];
    for p in &sub {
        for (g, x) in global_mean.iter_mut().zip(*p) {
            *g += x;
        }
    }
    global_mean.iter_mut().for_each(|g| *g /= m as f64);
    let mut global_var = vec![0.0; d];
    for p in &sub {
        for i in 0..d {
            global_var[i] += (p[i] - global_mean[i]).powi(2);
        }
    }
    global_var
        .iter_mut()
        .for_each(|v| *v = (*v / m as f64).max(cfg.var_floor));

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    match cfg.init {
        InitMethod::RandomPoints => {
            let pick = index::sample(rng, m, k.min(m)).into_vec();
            for i in 0..k {
                centers.push(sub[pick[i % pick.len()]].to_vec());
            }
        }
        InitMethod::KMeansPlusPlus => {
            centers.push(sub[rng.random_range(0..m)].to_vec());
            let mut dist: Vec<f64> = sub.iter().map(|p| sq_dist(p, &centers[0])).collect();
            let trials = 2 + (k as f64).ln().floor() as usize;
            while centers.len() < k {
                let mut best: Option<(f64, usize, Vec<f64>)> = None;
                for _ in 0..trials {
                    let cand = weighted_pick(&dist, rng);
                    let new_dist: Vec<f64> = sub
                        .iter()
                        .zip(&dist)
                        .map(|(p, &old)| old.min(sq_dist(p, sub[cand])))
                        .collect();
                    let pot: f64 = new_dist.iter().sum();
                    if best.as_ref().is_none_or(|(b, _, _)| pot < *b) {
                        best = Some((pot, cand, new_dist));
                    }
                }
                let (_, cand, new_dist) = best.expect("at least one trial");
                centers.push(sub[cand].to_vec());
                dist = new_dist;
            }
        }
    }

    let mut assign = vec![0usize; m];
    let lloyd = if cfg.init == InitMethod::KMeansPlusPlus {
        cfg.kmeans_iters
    } else {
        0
    };
    let nearest = |p: &[f64], centers: &[Vec<f64>]| {
        let mut best = (f64::INFINITY, 0usize);
        for (c, ctr) in centers.iter().enumerate() {
            let dd = sq_dist(p, ctr);
            if dd < best.0 {
                best = (dd, c);
            }
        }
        best.1
    };
    for (a, p) in assign.iter_mut().zip(&sub) {
        *a = nearest(p, &centers);
    }
    for _ in 0..lloyd {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in sub.iter().zip(&assign) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(*p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(&sub) {
            let b = nearest(p, &centers);
            changed |= b != *a;
            *a = b;
        }
        if !changed {
            break;
        }
    }

    let mut counts = vec![0usize; k];
    let mut var_sum = vec![vec![0.0; d]; k];
    for (p, &a) in sub.iter().zip(&assign) {
        counts[a] += 1;
        for i in 0..d {
            var_sum[a][i] += (p[i] - centers[a][i]).powi(2);
        }
    }
    let mut means = Matrix::zeros(k, d);
    let mut variances = Matrix::zeros(k, d);
    for c in 0..k {
        means.row_mut(c).copy_from_slice(&centers[c]);
        for i in 0..d {
            let v = if counts[c] >= 2 {
                var_sum[c][i] / counts[c] as f64
            } else {
                global_var[i]
            };
            variances.set(c, i, v.max(cfg.var_floor));
        }
    }
    let weights = if cfg.init == InitMethod::KMeansPlusPlus {
        floor_weights(
            counts.iter().map(|&c| c as f64 / m as f64).collect(),
            cfg.weight_floor,
        )
    } else {
        vec![1.0 / k as f64; k]
    };
    CategoryGmm::new(category, means, variances, weights)
}

/// Phase-1 EM on one category's vectors from a seeded initialization.
pub fn fit_gmm(
    pts: &CategoryPoints,
    cfg: &EmConfig,
    rng: &mut impl Rng,
) -> Result<(CategoryGmm, CategoryFitLog), ImplicitError> {
    cfg.validate()?;
    let need = cfg.min_vectors(pts.dim);
    if pts.len() < need {
        return Err(ImplicitError::InsufficientData {
            category: pts.category,
            have: pts.len(),
            need,
        });
    }
    let init = initial_gmm(pts.category, pts, cfg, rng);
    Ok(fit_gmm_from(pts, init, cfg))
}

/// Phase-1 EM from a given starting mixture.
pub fn fit_gmm_from(pts: &CategoryPoints, init: CategoryGmm, cfg: &EmConfig) -> (CategoryGmm, CategoryFitLog) {
    let mut g = init;
    let mut stats = e_step_points(&g, pts);
    let mut lls = vec![stats.ll];
    let mut converged = false;
    let mut degenerate = false;
    let mut iterations = 0;
    for it in 1..=cfg.n_warmup {
        let (next, floored) = m_step(&g, &stats, cfg);
        degenerate |= floored;
        g = next;
        stats = e_step_points(&g, pts);
        let prev = *lls.last().unwrap();
        lls.push(stats.ll);
        iterations = it;
        let rel = (stats.ll - prev) / prev.abs().max(f64::MIN_POSITIVE);
        if rel < cfg.tol {
            converged = true;
            break;
        }
    }
    let log = CategoryFitLog {
        category: g.category,
        n_vectors: pts.len(),
        iterations,
        log_likelihood: lls,
        converged,
        degenerate,
        skipped: None,
    };
    (g, log)
}

/// Hard regime label per point: argmax of log weight plus log emission,
/// ties to the smaller index.
pub fn hard_labels(g: &CategoryGmm, pts: &CategoryPoints) -> Vec<usize> {
    let cache = g.cache();
    (0..pts.len())
        .map(|i| {
            let x = pts.point(i);
            let mut best = (f64::NEG_INFINITY, 0usize);
            for k in 0..g.k {
                let s = cache.log_weights[k] + cache.log_emission(k, x);
                if s > best.0 {
                    best = (s, k);
                }
            }
            best.1
        })
        .collect()
}

pub(crate) fn category_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Phase 1 over all categories.
pub fn fit_warmup(trajectories: &[ProjectedTrace], cfg: &EmConfig) -> Result<WarmupFit, ImplicitError> {
    cfg.validate()?;
    check_trajectories(trajectories)?;
    let mut gmms = Vec::new();
    let mut logs = Vec::new();
    let mut warnings = Vec::new();
    for pts in collect_category_points(trajectories) {
        let stream = pts.category.core_index().unwrap() as u64 + 1;
        let mut rng = category_rng(cfg.seed, stream);
        match fit_gmm(&pts, cfg, &mut rng) {
            Ok((g, log)) => {
                if log.degenerate {
                    warnings.push(format!(
                        "DegenerateCluster: {} has floored variances",
                        pts.category
                    ));
                }
                gmms.push(g);
                logs.push(log);
            }
            Err(ImplicitError::InsufficientData { category, have, need }) => {
                let msg = format!("InsufficientData: {category} has {have} layer vectors, need {need}; skipped");
                log::warn!("{msg}");
                warnings.push(msg.clone());
                logs.push(CategoryFitLog {
                    category,
                    n_vectors: have,
                    iterations: 0,
                    log_likelihood: Vec::new(),
                    converged: false,
                    degenerate: false,
                    skipped: Some(msg),
                });
            }
            Err(e) => return Err(e),
        }
    }
    if gmms.is_empty() {
        return Err(ImplicitError::NoFittedCategories);
    }
    Ok(WarmupFit {
        gmms,
        logs,
        warnings,
    })
}

/// One step seen by the forward pass.
pub(crate) struct StepView<'a> {
    pub cat: usize,
    /// Previous adjacent fitted core step: its category and exit posterior.
    pub prev: Option<(usize, &'a [f64])>,
    pub prior1: &'a [f64],
    /// `L×K` posteriors.
    pub gamma: &'a [f64],
    pub x: &'a [f64],
}

/// Filters one trajectory front to back. With `bridges` the layer-1 prior of
/// a non-initial step comes from the previous exit posterior; without, every
/// layer uses the mixture weights. Steps whose category is `Unk` or has no
/// mixture break the chain.
pub(crate) fn forward_pass(
    caches: &[Option<EmissionCache<'_>>; NUM_CORE],
    bridges: Option<&BridgeSet>,
    tr: &ProjectedTrace,
    mut visit: impl FnMut(StepView<'_>),
) -> f64 {
    let f = &tr.features;
    let k = caches.iter().flatten().next().map_or(0, |c| c.gmm.k);
    let mut prev_gamma = vec![0.0; f.layers * k];
    let mut gamma = vec![0.0; f.layers * k];
    let mut prev_cat: Option<usize> = None;
    let mut total = 0.0;
    for t in 0..f.steps {
        let Some((ci, cache)) = tr.categories[t]
            .core_index()
            .and_then(|ci| caches[ci].as_ref().map(|c| (ci, c)))
        else {
            prev_cat = None;
            continue;
        };
        let exit_start = (f.layers - 1) * k;
        let prior1 = match (prev_cat, bridges) {
            (Some(pc), Some(b)) => {
                bridged_prior(&prev_gamma[exit_start..], b.entry_by_index(pc, ci))
            }
            _ => cache.gmm.weights.clone(),
        };
        let x = f.step(t);
        let ll = cache.step_posteriors(x, &prior1, &mut gamma);
        total += ll;
        visit(StepView {
            cat: ci,
            prev: prev_cat.map(|pc| (pc, &prev_gamma[exit_start..])),
            prior1: &prior1,
            gamma: &gamma,
            x,
        });
        std::mem::swap(&mut prev_gamma, &mut gamma);
        prev_cat = Some(ci);
    }
    total
}

struct PassStats {
    mix: Vec<MixStats>,
    bridge: BridgeAccumulator,
    explicit: ExplicitBridgeAccumulator,
    ll: f64,
}

impl PassStats {
    fn new(k: usize, d: usize) -> Self {
        PassStats {
            mix: (0..NUM_CORE).map(|_| MixStats::new(k, d)).collect(),
            bridge: BridgeAccumulator::new(k),
            explicit: ExplicitBridgeAccumulator::new(k),
            ll: 0.0,
        }
    }

    fn merge(&mut self, o: &PassStats) {
        for (a, b) in self.mix.iter_mut().zip(&o.mix) {
            a.merge(b);
        }
        self.bridge.merge(&o.bridge);
        self.explicit.merge(&o.explicit);
        self.ll += o.ll;
    }
}

fn make_caches(gmms: &[CategoryGmm]) -> [Option<EmissionCache<'_>>; NUM_CORE] {
    let mut caches: [Option<EmissionCache<'_>>; NUM_CORE] = [None, None, None, None];
    for g in gmms {
        if let Some(i) = g.category.core_index() {
            caches[i] = Some(EmissionCache::new(g));
        }
    }
    caches
}

/// One E-pass over all trajectories. `bridges = None` gives Phase-1
/// posteriors (used for bridge initialization).
fn e_pass(
    gmms: &[CategoryGmm],
    bridges: Option<&BridgeSet>,
    trajectories: &[ProjectedTrace],
    layers: usize,
    mstep: BridgeMStep,
) -> PassStats {
    let k = gmms[0].k;
    let d = gmms[0].dim;
    let chunks: Vec<&[ProjectedTrace]> = trajectories.chunks(TRAJ_CHUNK).collect();
    let parts = parallel::ordered_map(&chunks, |_, chunk| {
        let caches = make_caches(gmms);
        let mut st = PassStats::new(k, d);
        let mut joint = vec![0.0; k * k];
        for tr in chunk.iter() {
            st.ll += forward_pass(&caches, bridges, tr, |v| {
                let mix = &mut st.mix[v.cat];
                for l in 0..layers {
                    mix.add(
                        &v.x[l * d..(l + 1) * d],
                        &v.gamma[l * k..(l + 1) * k],
                        layers == 1 || l >= 1,
                    );
                }
                if let Some((pc, exit)) = v.prev {
                    let entry = &v.gamma[..k];
                    st.explicit.add(pc, v.cat, exit);
                    match (mstep, bridges) {
                        (BridgeMStep::Coupled, Some(b)) => {
                            // ξ(j,k) = exit_j·Ĵ_jk·γ_{t,1}(k) / prior1_k
                            let jm = b.entry_by_index(pc, v.cat);
                            for j in 0..k {
                                for kk in 0..k {
                                    let p = v.prior1[kk];
                                    joint[j * k + kk] = if p > 0.0 {
                                        exit[j] * jm.get(j, kk) * entry[kk] / p
                                    } else {
                                        0.0
                                    };
                                }
                            }
                            st.bridge.add_joint(pc, v.cat, &joint);
                        }
                        _ => st.bridge.add_outer(pc, v.cat, exit, entry),
                    }
                }
            });
        }
        st
    });
    let mut total = PassStats::new(k, d);
    for p in &parts {
        total.merge(p);
    }
    total
}

/// Bridge initialization from Phase-1 posteriors via outer products.
pub fn init_bridges(gmms: &[CategoryGmm], trajectories: &[ProjectedTrace]) -> BridgeSet {
    let layers = trajectories.first().map_or(1, |t| t.features.layers);
    let st = e_pass(gmms, None, trajectories, layers, BridgeMStep::OuterProduct);
    let mut b = st.bridge.finish();
    b.category_given_exit = st.explicit.finish();
    b
}

/// Phase 2: joint EM with bridges, starting from Phase-1 mixtures.
pub fn fit_joint(
    warmup: &WarmupFit,
    trajectories: &[ProjectedTrace],
    cfg: &EmConfig,
) -> Result<ImplicitModel, ImplicitError> {
    cfg.validate()?;
    let (layers, dim) = check_trajectories(trajectories)?;
    let first = warmup.gmms.first().ok_or(ImplicitError::NoFittedCategories)?;
    if first.dim != dim {
        return Err(ImplicitError::DimMismatch(format!(
            "mixtures have D={}, trajectories D={dim}",
            first.dim
        )));
    }
    if let Some(g) = warmup.gmms.iter().find(|g| g.k != cfg.k) {
        return Err(ImplicitError::KMismatch(g.k, cfg.k));
    }

    let mut gmms = warmup.gmms.clone();
    let mut bridges = init_bridges(&gmms, trajectories);
    let mut lls = Vec::with_capacity(cfg.n_joint + 1);
    let mut warnings = warmup.warnings.clone();
    let mut floored_any = false;
    for _ in 0..cfg.n_joint {
        let st = e_pass(&gmms, Some(&bridges), trajectories, layers, cfg.bridge_mstep);
        lls.push(st.ll);
        gmms = gmms
            .iter()
            .map(|g| {
                let ci = g.category.core_index().unwrap();
                let (next, floored) = m_step(g, &st.mix[ci], cfg);
                floored_any |= floored;
                next
            })
            .collect();
        bridges = st.bridge.finish();
    }
    let last = e_pass(&gmms, Some(&bridges), trajectories, layers, cfg.bridge_mstep);
    lls.push(last.ll);
    bridges.category_given_exit = last.explicit.finish();

    if floored_any {
        warnings.push("DegenerateCluster: variances floored during joint EM".into());
    }
    let fitted: Vec<usize> = gmms.iter().filter_map(|g| g.category.core_index()).collect();
    let missing_pairs: Vec<String> = bridges
        .missing_pairs()
        .into_iter()
        .filter(|(s, t)| {
            fitted.contains(&s.core_index().unwrap()) && fitted.contains(&t.core_index().unwrap())
        })
        .map(|(s, t)| format!("{s}->{t}"))
        .collect();
    for p in &missing_pairs {
        warnings.push(format!("MissingCategoryPairData: {p} bridge left uniform"));
    }

    let max_relative_decrease = lls
        .windows(2)
        .map(|w| ((w[0] - w[1]) / w[0].abs().max(f64::MIN_POSITIVE)).max(0.0))
        .fold(0.0, f64::max);
    let phase1 = warmup.total_log_likelihood();
    let final_ll = *lls.last().unwrap();
    let not_below_phase1 = final_ll >= phase1 - 1e-6 * phase1.abs();
    if !not_below_phase1 {
        warnings.push(format!(
            "joint log-likelihood {final_ll} ended below phase 1 value {phase1}"
        ));
    }

    Ok(ImplicitModel {
        version: IMPLICIT_VERSION,
        k: cfg.k,
        dim,
        layers,
        gmms,
        bridges,
        config: cfg.clone(),
        log: Some(TrainingLog {
            warmup: warmup.logs.clone(),
            joint: JointLog {
                bridge_mstep: cfg.bridge_mstep,
                phase1_log_likelihood: phase1,
                log_likelihood: lls,
                max_relative_decrease,
                not_below_phase1,
                missing_pairs,
            },
            warnings,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::ProjectedTensor;
    use rand_distr::{Distribution, Normal};

    fn blob_points(means: &[f64], sd: f64, per: usize, seed: u64) -> CategoryPoints {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::new();
        for &m in means {
            let n = Normal::new(m, sd).unwrap();
            for _ in 0..per {
                points.push(n.sample(&mut rng));
            }
        }
        CategoryPoints {
            category: Category::Ac,
            dim: 1,
            points,
        }
    }

    #[test]
    fn two_blobs_recovered() {
        let pts = blob_points(&[0.0, 10.0], 0.5, 200, 1);
        let cfg = EmConfig::with_k(2);
        let (g, log) = fit_gmm(&pts, &cfg, &mut category_rng(7, 1)).unwrap();
        let mut m = [g.means.get(0, 0), g.means.get(1, 0)];
        m.sort_by(f64::total_cmp);
        assert!((m[0] - 0.0).abs() < 0.15, "{m:?}");
        assert!((m[1] - 10.0).abs() < 0.15, "{m:?}");
        for w in log.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
    }

    #[test]
    fn single_component_closed_form() {
        let pts = blob_points(&[3.0], 2.0, 100, 2);
        let mut cfg = EmConfig::with_k(1);
        cfg.n_warmup = 1;
        let (g, _) = fit_gmm(&pts, &cfg, &mut category_rng(0, 0)).unwrap();
        let n = pts.points.len() as f64;
        let mean = pts.points.iter().sum::<f64>() / n;
        let var = pts.points.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((g.means.get(0, 0) - mean).abs() < 1e-12);
        assert!((g.variances.get(0, 0) - var).abs() < 1e-10);
        assert_eq!(g.weights, vec![1.0]);
    }

    #[test]
    fn identical_points_flag_degenerate() {
        let pts = CategoryPoints {
            category: Category::Fa,
            dim: 2,
            points: vec![1.5; 40],
        };
        let cfg = EmConfig::with_k(1);
        let (g, log) = fit_gmm(&pts, &cfg, &mut category_rng(0, 0)).unwrap();
        assert!(log.degenerate);
        assert_eq!(g.variances.row(0), &[cfg.var_floor, cfg.var_floor]);
    }

    #[test]
    fn too_few_points_rejected() {
        let pts = CategoryPoints {
            category: Category::Uv,
            dim: 8,
            points: vec![0.0; 8 * 5],
        };
        let cfg = EmConfig::with_k(3);
        assert!(matches!(
            fit_gmm(&pts, &cfg, &mut category_rng(0, 0)),
            Err(ImplicitError::InsufficientData { have: 5, need: 6, .. })
        ));
    }

    fn trajectory(id: &str, cats: Vec<Category>, values: Vec<f64>) -> ProjectedTrace {
        let t = cats.len();
        ProjectedTrace {
            id: id.into(),
            categories: cats,
            features: ProjectedTensor::new(t, 1, 1, values),
        }
    }

    #[test]
    fn missing_pairs_stay_uniform_and_flagged() {
        use Category::*;
        // FA and UV never adjacent
        let mut trajs = Vec::new();
        for i in 0..20 {
            let off = if i % 2 == 0 { 0.0 } else { 10.0 };
            trajs.push(trajectory(
                &format!("a{i}"),
                vec![Sr, Ac, Fa, Fa, Sr, Uv, Uv, Ac],
                vec![off, off + 0.1, off + 0.2, off - 0.1, off + 0.3, off, off + 0.2, off - 0.2],
            ));
        }
        let cfg = EmConfig {
            n_joint: 3,
            ..EmConfig::with_k(2)
        };
        let warm = fit_warmup(&trajs, &cfg).unwrap();
        let model = fit_joint(&warm, &trajs, &cfg).unwrap();
        let p = model.bridges.pair(Uv, Fa).unwrap();
        assert!(p.missing);
        assert!(p.entry.data.iter().all(|&v| v == 0.5));
        let log = model.log.unwrap();
        assert!(log.joint.missing_pairs.contains(&"UV->FA".to_string()));
        assert!(log.warnings.iter().any(|w| w.contains("UV->FA")));
    }
}
