//! Trajectory diagnostics: cohort Markov summaries and diffs, FA-visit
//! metrics, posterior profiles and their divergences, explicit-bridge
//! tables and scatter export.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::category::{Category, NUM_CORE};
use crate::explicit::{
    chain_summary, context_label, fit_markov, matrix_csv, pooled_transition_diff, transition_diff,
    ChainSummary, MarkovModel, PooledDiff, SummaryOptions,
};
use crate::implicit::{DecodedTrace, ImplicitModel};
use crate::preprocess::ProjectedTrace;
use crate::trace::{Correctness, TraceSample, TraceSet};

pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_LONG_THRESHOLD: usize = 100;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("profile shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing fit: {0}")]
    MissingFit(String),
    #[error("decoded trajectories do not line up with the trace set: {0}")]
    Misaligned(String),
}

/// Sample predicate. Empty fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correctness: Option<Correctness>,
    /// Inclusive lower bound on step count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_len: Option<usize>,
    /// Exclusive upper bound on step count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl CohortFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn correctness(c: Correctness) -> Self {
        CohortFilter {
            correctness: Some(c),
            ..Self::default()
        }
    }

    /// Incorrect samples with at least `threshold` steps.
    pub fn long_failures(threshold: usize) -> Self {
        CohortFilter {
            correctness: Some(Correctness::Incorrect),
            min_len: Some(threshold),
            ..Self::default()
        }
    }

    /// Incorrect samples with fewer than `threshold` steps.
    pub fn short_failures(threshold: usize) -> Self {
        CohortFilter {
            correctness: Some(Correctness::Incorrect),
            max_len: Some(threshold),
            ..Self::default()
        }
    }

    pub fn with_meta(mut self, key: &str, value: &str) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn matches(&self, s: &TraceSample) -> bool {
        self.correctness.is_none_or(|c| c == s.correctness)
            && self.min_len.is_none_or(|m| s.len() >= m)
            && self.max_len.is_none_or(|m| s.len() < m)
            && self.meta.iter().all(|(k, v)| s.meta.get(k) == Some(v))
    }

    pub fn select(&self, set: &TraceSet) -> Vec<usize> {
        (0..set.samples.len())
            .filter(|&i| self.matches(&set.samples[i]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaVisitMetrics {
    /// `t_first / T` with 1-based `t_first`.
    pub first_pos: Option<f64>,
    /// Number of maximal FA runs.
    pub reenter_count: usize,
    /// Share of non-FA steps strictly after the first FA.
    pub post_fa_nonfa_frac: Option<f64>,
}

pub fn fa_visit_metrics(categories: &[Category]) -> FaVisitMetrics {
    let is_fa = |c: &Category| *c == Category::Fa;
    let first = categories.iter().position(is_fa);
    let mut runs = 0;
    let mut in_run = false;
    for c in categories {
        if is_fa(c) && !in_run {
            runs += 1;
        }
        in_run = is_fa(c);
    }
    let t_len = categories.len();
    let frac = first.and_then(|f| {
        let after = &categories[f + 1..];
        (!after.is_empty()).then(|| after.iter().filter(|c| !is_fa(c)).count() as f64 / after.len() as f64)
    });
    FaVisitMetrics {
        first_pos: first.map(|f| (f + 1) as f64 / t_len as f64),
        reenter_count: runs,
        post_fa_nonfa_frac: frac,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub n: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Linear-interpolation quantile of sorted data at `p ∈ [0, 1]`.
fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Median and quartiles (linear interpolation between order statistics);
/// `None` for empty input.
pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Quartiles {
        n: v.len(),
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q3: quantile_sorted(&v, 0.75),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaSummary {
    pub first_pos: Option<Quartiles>,
    pub reenter_count: Option<Quartiles>,
    pub post_fa_nonfa_frac: Option<Quartiles>,
}

fn fa_summary(metrics: &[&FaVisitMetrics]) -> FaSummary {
    let first: Vec<f64> = metrics.iter().filter_map(|m| m.first_pos).collect();
    let blocks: Vec<f64> = metrics.iter().map(|m| m.reenter_count as f64).collect();
    let frac: Vec<f64> = metrics.iter().filter_map(|m| m.post_fa_nonfa_frac).collect();
    FaSummary {
        first_pos: quartiles(&first),
        reenter_count: quartiles(&blocks),
        post_fa_nonfa_frac: quartiles(&frac),
    }
}

/// Mean posterior per layer and regime over every step of one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorProfile {
    pub category: Category,
    pub layers: usize,
    pub k: usize,
    pub support: usize,
    /// `L×K` row-major; `None` when `support == 0`.
    pub mean: Option<Vec<f64>>,
}

/// Profile over the given decoded trajectories.
pub fn profile_of<'a>(
    decoded: impl IntoIterator<Item = &'a DecodedTrace>,
    category: Category,
    layers: usize,
    k: usize,
) -> PosteriorProfile {
    let mut sum = vec![0.0; layers * k];
    let mut support = 0;
    for d in decoded {
        for (t, c) in d.categories.iter().enumerate() {
            if *c != category {
                continue;
            }
            if let Some(g) = &d.posteriors.steps[t] {
                for (s, v) in sum.iter_mut().zip(g) {
                    *s += v;
                }
                support += 1;
            }
        }
    }
    let mean = (support > 0).then(|| sum.iter().map(|s| s / support as f64).collect());
    PosteriorProfile {
        category,
        layers,
        k,
        support,
        mean,
    }
}

fn check_aligned(set: &TraceSet, decoded: &[DecodedTrace]) -> Result<(), DiagnosticsError> {
    if set.samples.len() != decoded.len() {
        return Err(DiagnosticsError::Misaligned(format!(
            "{} samples, {} decoded",
            set.samples.len(),
            decoded.len()
        )));
    }
    if let Some((s, d)) = set.samples.iter().zip(decoded).find(|(s, d)| s.id != d.id) {
        return Err(DiagnosticsError::Misaligned(format!("{:?} vs {:?}", s.id, d.id)));
    }
    Ok(())
}

/// Profile of `category` over the cohort; `decoded[i]` belongs to
/// `set.samples[i]`.
pub fn mean_posterior_profile(
    set: &TraceSet,
    decoded: &[DecodedTrace],
    category: Category,
    cohort: &CohortFilter,
) -> Result<PosteriorProfile, DiagnosticsError> {
    check_aligned(set, decoded)?;
    let (layers, k) = decoded
        .first()
        .map_or((0, 0), |d| (d.posteriors.layers, d.posteriors.k));
    let members = cohort.select(set);
    Ok(profile_of(members.iter().map(|&i| &decoded[i]), category, layers, k))
}

fn check_profile_shapes(a: &PosteriorProfile, b: &PosteriorProfile) -> Result<(), DiagnosticsError> {
    if a.category != b.category || a.layers != b.layers || a.k != b.k {
        return Err(DiagnosticsError::ShapeMismatch(format!(
            "{} L={} K={} vs {} L={} K={}",
            a.category, a.layers, a.k, b.category, b.layers, b.k
        )));
    }
    Ok(())
}

/// Euclidean norm of the elementwise profile difference; `None` if either
/// side is empty.
pub fn profile_l2_divergence(a: &PosteriorProfile, b: &PosteriorProfile) -> Result<Option<f64>, DiagnosticsError> {
    Ok(profile_difference(a, b)?.map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt()))
}

/// Elementwise `a − b`.
pub fn profile_difference(a: &PosteriorProfile, b: &PosteriorProfile) -> Result<Option<Vec<f64>>, DiagnosticsError> {
    check_profile_shapes(a, b)?;
    Ok(match (&a.mean, &b.mean) {
        (Some(x), Some(y)) => Some(x.iter().zip(y).map(|(p, q)| p - q).collect()),
        _ => None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub category: Category,
    pub is_centroid: bool,
}

/// One point per core step: the first two coordinates of the step's
/// layer-averaged projected vector. Centroids (one per category present)
/// follow the step points.
pub fn scatter_points(trajectories: &[ProjectedTrace]) -> Vec<ScatterPoint> {
    let mut pts = Vec::new();
    let mut sums = [(0.0, 0.0, 0usize); NUM_CORE];
    for tr in trajectories {
        let f = &tr.features;
        for (t, c) in tr.categories.iter().enumerate() {
            let Some(ci) = c.core_index() else { continue };
            let (mut x, mut y) = (0.0, 0.0);
            for l in 0..f.layers {
                let v = f.vector(t, l);
                x += v[0];
                y += v.get(1).copied().unwrap_or(0.0);
            }
            x /= f.layers as f64;
            y /= f.layers as f64;
            sums[ci].0 += x;
            sums[ci].1 += y;
            sums[ci].2 += 1;
            pts.push(ScatterPoint {
                x,
                y,
                category: *c,
                is_centroid: false,
            });
        }
    }
    for (ci, &(sx, sy, n)) in sums.iter().enumerate() {
        if n > 0 {
            pts.push(ScatterPoint {
                x: sx / n as f64,
                y: sy / n as f64,
                category: Category::CORE[ci],
                is_centroid: true,
            });
        }
    }
    pts
}

pub fn scatter_csv(points: &[ScatterPoint]) -> String {
    let mut s = String::from("x,y,category,is_centroid\n");
    for p in points {
        let _ = writeln!(s, "{:.6},{:.6},{},{}", p.x, p.y, p.category, p.is_centroid);
    }
    s
}

/// Order-1 fit and its chain analytics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovBlock {
    pub model: Option<MarkovModel>,
    pub summary: Option<ChainSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn markov_block(seqs: &[Vec<Category>], opts: SummaryOptions) -> MarkovBlock {
    match fit_markov(seqs, 1) {
        Ok(m) => match chain_summary(&m, opts) {
            Ok(s) => MarkovBlock {
                model: Some(m),
                summary: Some(s),
                error: None,
            },
            Err(e) => MarkovBlock {
                model: Some(m),
                summary: None,
                error: Some(e.to_string()),
            },
        },
        Err(e) => MarkovBlock {
            model: None,
            summary: None,
            error: Some(e.to_string()),
        },
    }
}

/// Chain analytics computed per configuration, then averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedSummary {
    pub n_configurations: usize,
    pub stationary_mean: Vec<f64>,
    pub stationary_std: Vec<f64>,
    /// Over configurations where FA is reached surely; SR, AC, UV order.
    pub hitting_mean: Vec<Option<f64>>,
    pub hitting_std: Vec<Option<f64>>,
    pub hitting_n: Vec<usize>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

fn averaged_summary(summaries: &[&ChainSummary]) -> Option<AveragedSummary> {
    if summaries.is_empty() {
        return None;
    }
    let mut stationary_mean = Vec::new();
    let mut stationary_std = Vec::new();
    for c in 0..NUM_CORE {
        let (m, s) = mean_std(&summaries.iter().map(|x| x.stationary[c]).collect::<Vec<_>>());
        stationary_mean.push(m);
        stationary_std.push(s);
    }
    let mut hitting_mean = Vec::new();
    let mut hitting_std = Vec::new();
    let mut hitting_n = Vec::new();
    for i in 0..NUM_CORE - 1 {
        let v: Vec<f64> = summaries.iter().filter_map(|x| x.hitting[i].steps).collect();
        hitting_n.push(v.len());
        if v.is_empty() {
            hitting_mean.push(None);
            hitting_std.push(None);
        } else {
            let (m, s) = mean_std(&v);
            hitting_mean.push(Some(m));
            hitting_std.push(Some(s));
        }
    }
    Some(AveragedSummary {
        n_configurations: summaries.len(),
        stationary_mean,
        stationary_std,
        hitting_mean,
        hitting_std,
        hitting_n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    /// Failures with at least this many steps are "long".
    pub long_threshold: usize,
    /// Meta keys whose values identify a configuration.
    pub group_keys: Vec<String>,
    pub allow_uniform_fill: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            long_threshold: DEFAULT_LONG_THRESHOLD,
            group_keys: vec!["model".into(), "dataset".into()],
            allow_uniform_fill: false,
        }
    }
}

impl ReportConfig {
    fn group_of(&self, s: &TraceSample) -> String {
        self.group_keys
            .iter()
            .map(|k| s.meta.get(k).map_or("-", String::as_str))
            .collect::<Vec<_>>()
            .join("/")
    }

    fn summary_options(&self) -> SummaryOptions {
        SummaryOptions {
            allow_uniform_fill: self.allow_uniform_fill,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaReport {
    /// Quartiles over all cohort samples together.
    pub pooled: FaSummary,
    /// Quartiles over per-configuration medians.
    pub per_configuration: FaSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub name: String,
    pub filter: CohortFilter,
    pub n_samples: usize,
    pub n_configurations: usize,
    /// Fit on all cohort sequences together.
    pub pooled: MarkovBlock,
    /// Analytics per configuration, averaged.
    pub averaged: Option<AveragedSummary>,
    pub fa_visits: FaReport,
    /// Core order; empty without decoded posteriors.
    pub profiles: Vec<PosteriorProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    /// `a − b`.
    pub a: String,
    pub b: String,
    pub pooled: Option<Vec<Vec<f64>>>,
    /// Mean ± std over configurations where both cohorts could be fitted.
    pub per_configuration: Option<PooledDiff>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileComparison {
    pub category: Category,
    pub a: String,
    pub b: String,
    pub l2: Option<f64>,
    /// `a − b`, `L×K`.
    pub difference: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeTable {
    pub source: Category,
    /// `[exit regime][target category]` probabilities.
    pub rows: Vec<Option<Vec<f64>>>,
    /// Same, as whole percentages summing to 100 per row.
    pub percent: Vec<Option<Vec<u32>>>,
}

pub fn bridge_tables(model: &ImplicitModel) -> Vec<BridgeTable> {
    let r = &model.bridges.category_given_exit;
    Category::CORE
        .iter()
        .enumerate()
        .map(|(ci, &c)| BridgeTable {
            source: c,
            rows: r.rows[ci].clone(),
            percent: r.percent_table(c),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterSummary {
    pub file: String,
    pub n_points: usize,
    pub centroids: Vec<ScatterPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub n_samples: usize,
    pub config: ReportConfig,
    /// PCA and normalization statistics are fitted once per invocation.
    pub preprocess_scope: String,
    pub markov_order: usize,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub version: u32,
    pub meta: ReportMeta,
    pub cohorts: Vec<CohortSummary>,
    pub transition_diffs: Vec<DiffReport>,
    pub profile_comparisons: Vec<ProfileComparison>,
    pub bridge_tables: Option<Vec<BridgeTable>>,
    pub scatter: Option<ScatterSummary>,
}

/// Inputs for [`build_report`]. `decoded[i]` and `projected[i]` belong to
/// `set.samples[i]`.
pub struct ReportInputs<'a> {
    pub set: &'a TraceSet,
    pub projected: Option<&'a [ProjectedTrace]>,
    pub implicit: Option<&'a ImplicitModel>,
    pub decoded: Option<&'a [DecodedTrace]>,
}

struct Cohort {
    name: String,
    filter: CohortFilter,
    members: Vec<usize>,
}

fn cohort_summary(inp: &ReportInputs<'_>, cfg: &ReportConfig, c: &Cohort, metrics: &[FaVisitMetrics]) -> (CohortSummary, BTreeMap<String, MarkovModel>) {
    let set = inp.set;
    let opts = cfg.summary_options();
    let seqs: Vec<Vec<Category>> = c.members.iter().map(|&i| set.samples[i].categories()).collect();
    let pooled = markov_block(&seqs, opts);

    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for &i in &c.members {
        groups.entry(cfg.group_of(&set.samples[i])).or_default().push(i);
    }
    let mut per_group_models = BTreeMap::new();
    let mut per_group_summaries = Vec::new();
    let mut per_group_fa: Vec<[Option<f64>; 3]> = Vec::new();
    for (g, idx) in &groups {
        let gs: Vec<Vec<Category>> = idx.iter().map(|&i| set.samples[i].categories()).collect();
        let b = markov_block(&gs, opts);
        if let Some(m) = b.model {
            per_group_models.insert(g.clone(), m);
        }
        if let Some(s) = b.summary {
            per_group_summaries.push(s);
        }
        let fa = fa_summary(&idx.iter().map(|&i| &metrics[i]).collect::<Vec<_>>());
        per_group_fa.push([
            fa.first_pos.map(|q| q.median),
            fa.reenter_count.map(|q| q.median),
            fa.post_fa_nonfa_frac.map(|q| q.median),
        ]);
    }
    let averaged = averaged_summary(&per_group_summaries.iter().collect::<Vec<_>>());
    let pooled_fa = fa_summary(&c.members.iter().map(|&i| &metrics[i]).collect::<Vec<_>>());
    let col = |j: usize| per_group_fa.iter().filter_map(|r| r[j]).collect::<Vec<_>>();
    let per_configuration = FaSummary {
        first_pos: quartiles(&col(0)),
        reenter_count: quartiles(&col(1)),
        post_fa_nonfa_frac: quartiles(&col(2)),
    };
    let profiles = match inp.decoded {
        Some(dec) => {
            let (layers, k) = dec.first().map_or((0, 0), |d| (d.posteriors.layers, d.posteriors.k));
            Category::CORE
                .iter()
                .map(|&cat| profile_of(c.members.iter().map(|&i| &dec[i]), cat, layers, k))
                .collect()
        }
        None => Vec::new(),
    };
    (
        CohortSummary {
            name: c.name.clone(),
            filter: c.filter.clone(),
            n_samples: c.members.len(),
            n_configurations: groups.len(),
            pooled,
            averaged,
            fa_visits: FaReport {
                pooled: pooled_fa,
                per_configuration,
            },
            profiles,
        },
        per_group_models,
    )
}

fn diff_report(
    a: &CohortSummary,
    b: &CohortSummary,
    ga: &BTreeMap<String, MarkovModel>,
    gb: &BTreeMap<String, MarkovModel>,
) -> DiffReport {
    let pooled = match (&a.pooled.model, &b.pooled.model) {
        (Some(x), Some(y)) => transition_diff(x, y).ok(),
        _ => None,
    };
    let pairs: Vec<(&MarkovModel, &MarkovModel)> = ga
        .iter()
        .filter_map(|(g, m)| gb.get(g).map(|n| (m, n)))
        .collect();
    DiffReport {
        a: a.name.clone(),
        b: b.name.clone(),
        pooled,
        per_configuration: pooled_transition_diff(&pairs).ok(),
    }
}

fn profile_comparisons(a: &CohortSummary, b: &CohortSummary) -> Vec<ProfileComparison> {
    a.profiles
        .iter()
        .zip(&b.profiles)
        .map(|(pa, pb)| ProfileComparison {
            category: pa.category,
            a: a.name.clone(),
            b: b.name.clone(),
            l2: profile_l2_divergence(pa, pb).ok().flatten(),
            difference: profile_difference(pa, pb).ok().flatten(),
        })
        .collect()
}

/// Builds the full report over the cohorts `all`, `correct`, `incorrect`,
/// `long_failure` and `short_failure`.
pub fn build_report(inp: &ReportInputs<'_>, cfg: &ReportConfig) -> Result<DiagnosticsReport, DiagnosticsError> {
    let set = inp.set;
    if let Some(dec) = inp.decoded {
        check_aligned(set, dec)?;
        if inp.implicit.is_none() {
            return Err(DiagnosticsError::MissingFit("decoded paths given without the implicit model".into()));
        }
    }
    if let Some(p) = inp.projected {
        if p.len() != set.samples.len() || p.iter().zip(&set.samples).any(|(a, b)| a.id != b.id) {
            return Err(DiagnosticsError::Misaligned("projected trajectories".into()));
        }
    }
    let metrics: Vec<FaVisitMetrics> = set.samples.iter().map(|s| fa_visit_metrics(&s.categories())).collect();
    let th = cfg.long_threshold;
    let filters = [
        ("all", CohortFilter::all()),
        ("correct", CohortFilter::correctness(Correctness::Correct)),
        ("incorrect", CohortFilter::correctness(Correctness::Incorrect)),
        ("long_failure", CohortFilter::long_failures(th)),
        ("short_failure", CohortFilter::short_failures(th)),
    ];
    let mut cohorts = Vec::new();
    let mut groups = Vec::new();
    for (name, filter) in filters {
        let c = Cohort {
            name: name.into(),
            members: filter.select(set),
            filter,
        };
        let (s, g) = cohort_summary(inp, cfg, &c, &metrics);
        cohorts.push(s);
        groups.push(g);
    }
    let transition_diffs = vec![
        diff_report(&cohorts[1], &cohorts[2], &groups[1], &groups[2]),
        diff_report(&cohorts[3], &cohorts[4], &groups[3], &groups[4]),
    ];
    let mut comparisons = profile_comparisons(&cohorts[3], &cohorts[4]);
    comparisons.extend(profile_comparisons(&cohorts[1], &cohorts[2]));
    let scatter = inp.projected.map(|p| {
        let pts = scatter_points(p);
        ScatterSummary {
            file: "scatter.csv".into(),
            n_points: pts.iter().filter(|p| !p.is_centroid).count(),
            centroids: pts.into_iter().filter(|p| p.is_centroid).collect(),
        }
    });
    Ok(DiagnosticsReport {
        version: REPORT_VERSION,
        meta: ReportMeta {
            n_samples: set.samples.len(),
            config: cfg.clone(),
            preprocess_scope: "per-invocation".into(),
            markov_order: 1,
            k: inp.implicit.map(|m| m.k),
        },
        cohorts,
        transition_diffs,
        profile_comparisons: comparisons,
        bridge_tables: inp.implicit.map(bridge_tables),
        scatter,
    })
}

/// One column of a prompt/cohort comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonColumn {
    pub name: String,
    pub n_samples: usize,
    /// Share of correct samples among labeled ones.
    pub accuracy: Option<f64>,
    pub mean_length: Option<f64>,
    pub markov: MarkovBlock,
    pub profiles: Vec<PosteriorProfile>,
    /// Per category (core order), relative to the first column.
    pub l2_vs_baseline: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortComparison {
    pub baseline: String,
    pub columns: Vec<ComparisonColumn>,
}

/// Side-by-side comparison of named cohorts; the first is the baseline.
pub fn compare_cohorts(
    set: &TraceSet,
    decoded: Option<&[DecodedTrace]>,
    cohorts: &[(String, CohortFilter)],
    opts: SummaryOptions,
) -> Result<CohortComparison, DiagnosticsError> {
    if let Some(d) = decoded {
        check_aligned(set, d)?;
    }
    let (layers, k) = decoded
        .and_then(|d| d.first())
        .map_or((0, 0), |d| (d.posteriors.layers, d.posteriors.k));
    let mut columns: Vec<ComparisonColumn> = Vec::new();
    for (name, f) in cohorts {
        let members = f.select(set);
        let seqs: Vec<Vec<Category>> = members.iter().map(|&i| set.samples[i].categories()).collect();
        let labeled: Vec<bool> = members
            .iter()
            .filter_map(|&i| match set.samples[i].correctness {
                Correctness::Correct => Some(true),
                Correctness::Incorrect => Some(false),
                Correctness::Unlabeled => None,
            })
            .collect();
        let accuracy = (!labeled.is_empty())
            .then(|| labeled.iter().filter(|&&c| c).count() as f64 / labeled.len() as f64);
        let mean_length = (!members.is_empty())
            .then(|| members.iter().map(|&i| set.samples[i].len()).sum::<usize>() as f64 / members.len() as f64);
        let profiles: Vec<PosteriorProfile> = match decoded {
            Some(d) => Category::CORE
                .iter()
                .map(|&c| profile_of(members.iter().map(|&i| &d[i]), c, layers, k))
                .collect(),
            None => Vec::new(),
        };
        let l2_vs_baseline = match columns.first() {
            Some(base) if !profiles.is_empty() => base
                .profiles
                .iter()
                .zip(&profiles)
                .map(|(a, b)| profile_l2_divergence(b, a).ok().flatten())
                .collect(),
            None if !profiles.is_empty() => vec![Some(0.0); NUM_CORE],
            _ => Vec::new(),
        };
        columns.push(ComparisonColumn {
            name: name.clone(),
            n_samples: members.len(),
            accuracy,
            mean_length,
            markov: markov_block(&seqs, opts),
            profiles,
            l2_vs_baseline,
        });
    }
    Ok(CohortComparison {
        baseline: cohorts.first().map(|c| c.0.clone()).unwrap_or_default(),
        columns,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

fn q_cells(q: &Option<Quartiles>) -> String {
    match q {
        Some(q) => format!("{},{:.6},{:.6},{:.6}", q.n, q.median, q.q1, q.q3),
        None => "0,,,".into(),
    }
}

/// Report flattened into CSV tables keyed by file name.
pub fn report_tables(r: &DiagnosticsReport) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for c in &r.cohorts {
        if let Some(m) = &c.pooled.model {
            out.push((format!("transitions_{}.csv", c.name), matrix_csv(&m.trans, 1)));
        }
    }
    let mut s = String::from("cohort,mode,n,category,stationary,expected_steps_to_fa\n");
    for c in &r.cohorts {
        if let Some(sum) = &c.pooled.summary {
            for (i, cat) in Category::CORE.iter().enumerate() {
                let h = if i == 0 { Some(0.0) } else { sum.hitting[i - 1].steps };
                let _ = writeln!(s, "{},pooled,{},{},{:.6},{}", c.name, c.n_samples, cat, sum.stationary[i], opt(h));
            }
        }
        if let Some(a) = &c.averaged {
            for (i, cat) in Category::CORE.iter().enumerate() {
                let h = if i == 0 { Some(0.0) } else { a.hitting_mean[i - 1] };
                let _ = writeln!(s, "{},averaged,{},{},{:.6},{}", c.name, a.n_configurations, cat, a.stationary_mean[i], opt(h));
            }
        }
    }
    out.push(("chain_summary.csv".into(), s));

    for d in &r.transition_diffs {
        let mut s = String::from("from,to,pooled,mean,std,n_configurations\n");
        for i in 0..NUM_CORE {
            for j in 0..NUM_CORE {
                let p = d.pooled.as_ref().map(|m| m[i][j]);
                let (m, sd, n) = match &d.per_configuration {
                    Some(pd) => (Some(pd.mean[i][j]), Some(pd.std[i][j]), pd.n_configurations),
                    None => (None, None, 0),
                };
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    context_label(i, 1),
                    Category::CORE[j],
                    opt(p),
                    opt(m),
                    opt(sd),
                    n
                );
            }
        }
        out.push((format!("diff_{}_minus_{}.csv", d.a, d.b), s));
    }

    let mut s = String::from("cohort,mode,metric,n,median,q1,q3\n");
    for c in &r.cohorts {
        for (mode, fa) in [("pooled", &c.fa_visits.pooled), ("per_configuration", &c.fa_visits.per_configuration)] {
            for (name, q) in [
                ("first_pos", &fa.first_pos),
                ("reenter_count", &fa.reenter_count),
                ("post_fa_nonfa_frac", &fa.post_fa_nonfa_frac),
            ] {
                let _ = writeln!(s, "{},{},{},{}", c.name, mode, name, q_cells(q));
            }
        }
    }
    out.push(("fa_visits.csv".into(), s));

    if !r.profile_comparisons.is_empty() {
        let mut s = String::from("category,a,b,l2\n");
        for p in &r.profile_comparisons {
            let _ = writeln!(s, "{},{},{},{}", p.category, p.a, p.b, opt(p.l2));
        }
        out.push(("profile_divergence.csv".into(), s));
    }

    if let Some(tables) = &r.bridge_tables {
        let mut s = String::from("source,exit_regime,FA,SR,AC,UV\n");
        for t in tables {
            for (j, row) in t.percent.iter().enumerate() {
                match row {
                    Some(p) => {
                        let _ = writeln!(s, "{},{},{},{},{},{}", t.source, j, p[0], p[1], p[2], p[3]);
                    }
                    None => {
                        let _ = writeln!(s, "{},{},,,,", t.source, j);
                    }
                }
            }
        }
        out.push(("explicit_bridge_percent.csv".into(), s));
    }
    out
}
