//! Order-m Markov chains over the core categories and their analytics.
//!
//! Contexts are indexed base-4 over [`Category::CORE`] with the oldest
//! category as the most significant digit. A transition is counted only when
//! every category in the context and the successor is core, so `Unk` steps
//! break a sequence instead of being spliced over.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::category::{Category, NUM_CORE};

pub const MARKOV_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ExplicitError {
    #[error("no sequences given")]
    EmptyInput,
    #[error("no valid core-to-core transitions at order {0}")]
    NoValidTransitions(usize),
    #[error("markov order must be at least 1")]
    ZeroOrder,
    #[error("operation needs an order-1 chain, got order {0}")]
    OrderNotOne(usize),
    #[error("order mismatch: {0} vs {1}")]
    OrderMismatch(usize, usize),
    #[error("rows {0:?} were never observed and are uniform-filled; pass allow_uniform_fill to proceed")]
    UniformFilledRows(Vec<String>),
    #[error("matrix has {0} rows, which is not a power of 4")]
    BadShape(usize),
    #[error("invalid probability row {row}: {detail}")]
    BadRow { row: usize, detail: String },
    #[error("no order in the range had enough transitions")]
    InsufficientData,
    #[error("empty order range")]
    EmptyRange,
}

/// Row-stochastic `4^m × 4` transition table with raw counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovModel {
    pub version: u32,
    pub order: usize,
    pub trans: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u64>>,
    pub start: Vec<f64>,
    /// Context rows without observations (uniform-filled).
    pub zero_rows: Vec<usize>,
    pub n_transitions: u64,
    pub n_sequences: usize,
}

fn num_contexts(order: usize) -> usize {
    NUM_CORE.pow(order as u32)
}

/// Categories of context row `row` at `order`, oldest first.
pub fn context_of(row: usize, order: usize) -> Vec<Category> {
    let mut out = vec![Category::Fa; order];
    let mut r = row;
    for slot in out.iter_mut().rev() {
        *slot = Category::CORE[r % NUM_CORE];
        r /= NUM_CORE;
    }
    out
}

pub fn context_label(row: usize, order: usize) -> String {
    context_of(row, order)
        .iter()
        .map(|c| c.short())
        .collect::<Vec<_>>()
        .join("->")
}

/// Row index of a context, `None` if it contains `Unk`.
pub fn context_index(ctx: &[Category]) -> Option<usize> {
    ctx.iter()
        .try_fold(0usize, |acc, c| c.core_index().map(|i| acc * NUM_CORE + i))
}

impl MarkovModel {
    pub fn contexts(&self) -> Vec<Vec<Category>> {
        (0..self.trans.len())
            .map(|r| context_of(r, self.order))
            .collect()
    }

    /// Builds a model from a given probability table. Rows are
    /// renormalized to sum to one; counts are zero.
    pub fn from_probabilities(
        rows: &[Vec<f64>],
        start: Option<Vec<f64>>,
    ) -> Result<MarkovModel, ExplicitError> {
        let mut order = 0;
        let mut n = 1;
        while n < rows.len() {
            n *= NUM_CORE;
            order += 1;
        }
        if n != rows.len() || order == 0 {
            return Err(ExplicitError::BadShape(rows.len()));
        }
        let mut trans = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != NUM_CORE {
                return Err(ExplicitError::BadRow {
                    row: i,
                    detail: format!("expected {NUM_CORE} entries, got {}", r.len()),
                });
            }
            let sum: f64 = r.iter().sum();
            if r.iter().any(|p| !p.is_finite() || *p < 0.0) || sum <= 0.0 {
                return Err(ExplicitError::BadRow {
                    row: i,
                    detail: "entries must be finite, nonnegative and not all zero".into(),
                });
            }
            trans.push(r.iter().map(|p| p / sum).collect());
        }
        let start = match start {
            Some(s) => {
                let sum: f64 = s.iter().sum();
                s.iter().map(|p| p / sum).collect()
            }
            None => vec![1.0 / NUM_CORE as f64; NUM_CORE],
        };
        Ok(MarkovModel {
            version: MARKOV_VERSION,
            order,
            trans,
            counts: vec![vec![0; NUM_CORE]; rows.len()],
            start,
            zero_rows: Vec::new(),
            n_transitions: 0,
            n_sequences: 0,
        })
    }

    pub fn prob(&self, ctx: &[Category], next: Category) -> Option<f64> {
        Some(self.trans[context_index(ctx)?][next.core_index()?])
    }

    /// Log-likelihood of the counted transitions under `trans`.
    pub fn log_likelihood(&self) -> f64 {
        self.counts
            .iter()
            .zip(&self.trans)
            .flat_map(|(c, p)| c.iter().zip(p))
            .filter(|(&n, _)| n > 0)
            .map(|(&n, &p)| n as f64 * p.ln())
            .sum()
    }

    pub fn n_params(&self) -> usize {
        num_contexts(self.order) * (NUM_CORE - 1)
    }

    /// `−2·logL + p·ln(N)` with `p = 4^m·3` and `N` counted transitions.
    pub fn bic(&self) -> f64 {
        -2.0 * self.log_likelihood() + self.n_params() as f64 * (self.n_transitions as f64).ln()
    }

    /// Transition table as CSV with category headers.
    pub fn to_csv(&self) -> String {
        matrix_csv(&self.trans, self.order)
    }
}

pub fn matrix_csv(rows: &[Vec<f64>], order: usize) -> String {
    let mut s = String::from("from");
    for c in Category::CORE {
        write!(s, ",{}", c.short()).unwrap();
    }
    s.push('\n');
    for (r, row) in rows.iter().enumerate() {
        s.push_str(&context_label(r, order));
        for v in row {
            write!(s, ",{v:.6}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Maximum-likelihood order-`m` chain from category sequences.
pub fn fit_markov(sequences: &[Vec<Category>], order: usize) -> Result<MarkovModel, ExplicitError> {
    if order == 0 {
        return Err(ExplicitError::ZeroOrder);
    }
    if sequences.is_empty() {
        return Err(ExplicitError::EmptyInput);
    }
    let rows = num_contexts(order);
    let mut counts = vec![vec![0u64; NUM_CORE]; rows];
    let mut start_counts = [0u64; NUM_CORE];
    let mut n_transitions = 0u64;
    for seq in sequences {
        if let Some(first) = seq.iter().find_map(|c| c.core_index()) {
            start_counts[first] += 1;
        }
        for w in seq.windows(order + 1) {
            let (ctx, next) = w.split_at(order);
            if let (Some(r), Some(c)) = (context_index(ctx), next[0].core_index()) {
                counts[r][c] += 1;
                n_transitions += 1;
            }
        }
    }
    if n_transitions == 0 {
        return Err(ExplicitError::NoValidTransitions(order));
    }
    let mut zero_rows = Vec::new();
    let trans = counts
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                zero_rows.push(r);
                vec![1.0 / NUM_CORE as f64; NUM_CORE]
            } else {
                row.iter().map(|&n| n as f64 / total as f64).collect()
            }
        })
        .collect();
    let n_starts: u64 = start_counts.iter().sum();
    let start = if n_starts == 0 {
        vec![1.0 / NUM_CORE as f64; NUM_CORE]
    } else {
        start_counts
            .iter()
            .map(|&n| n as f64 / n_starts as f64)
            .collect()
    };
    Ok(MarkovModel {
        version: MARKOV_VERSION,
        order,
        trans,
        counts,
        start,
        zero_rows,
        n_transitions,
        n_sequences: sequences.len(),
    })
}

/// Stationary distribution, hitting times and BIC of an order-1 chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub start: Vec<f64>,
    pub stationary: Vec<f64>,
    /// False when the chain has several closed classes; `stationary` is then
    /// the limit of the lazy chain started from the uniform distribution.
    pub stationary_unique: bool,
    /// Expected steps to first reach FA from SR, AC, UV (FA absorbing).
    /// `None` means FA is not reached with probability one.
    pub hitting: Vec<HittingTime>,
    pub bic: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HittingTime {
    pub from: Category,
    pub steps: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SummaryOptions {
    pub allow_uniform_fill: bool,
}

pub fn chain_summary(model: &MarkovModel, opts: SummaryOptions) -> Result<ChainSummary, ExplicitError> {
    if model.order != 1 {
        return Err(ExplicitError::OrderNotOne(model.order));
    }
    if !model.zero_rows.is_empty() && !opts.allow_uniform_fill {
        return Err(ExplicitError::UniformFilledRows(
            model.zero_rows.iter().map(|&r| context_label(r, 1)).collect(),
        ));
    }
    let (stationary, stationary_unique) = stationary_distribution(&model.trans);
    let hitting = hitting_times(&model.trans, 0)
        .into_iter()
        .enumerate()
        .filter(|(i, _)| *i != 0)
        .map(|(i, h)| HittingTime {
            from: Category::CORE[i],
            steps: h,
        })
        .collect();
    let (bic, log_likelihood) = if model.n_transitions > 0 {
        (model.bic(), model.log_likelihood())
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(ChainSummary {
        start: model.start.clone(),
        stationary,
        stationary_unique,
        hitting,
        bic,
        log_likelihood,
    })
}

/// `reach[i][j]`: j reachable from i in zero or more steps.
fn reachability(p: &[Vec<f64>]) -> Vec<Vec<bool>> {
    let n = p.len();
    let mut reach: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| i == j || p[i][j] > 0.0).collect())
        .collect();
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    reach
}

/// Number of closed communicating classes.
fn closed_classes(p: &[Vec<f64>]) -> usize {
    let n = p.len();
    let reach = reachability(p);
    let mut seen = vec![false; n];
    let mut closed = 0;
    for i in 0..n {
        if seen[i] {
            continue;
        }
        let class: Vec<usize> = (0..n).filter(|&j| reach[i][j] && reach[j][i]).collect();
        for &j in &class {
            seen[j] = true;
        }
        let escapes = class
            .iter()
            .any(|&a| (0..n).any(|b| reach[a][b] && !class.contains(&b)));
        if !escapes {
            closed += 1;
        }
    }
    closed
}

/// Solves `πP = π`, `Σπ = 1`. Returns the distribution and whether it is
/// unique.
pub fn stationary_distribution(p: &[Vec<f64>]) -> (Vec<f64>, bool) {
    let n = p.len();
    let unique = closed_classes(p) == 1;
    if unique {
        // (Pᵀ − I)π = 0 with the last equation replaced by Σπ = 1
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = p[j][i] - if i == j { 1.0 } else { 0.0 };
            }
        }
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut b = DVector::<f64>::zeros(n);
        b[n - 1] = 1.0;
        if let Some(x) = a.lu().solve(&b) {
            let mut pi: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
            let s: f64 = pi.iter().sum();
            pi.iter_mut().for_each(|v| *v /= s);
            return (pi, true);
        }
    }
    (lazy_power_iteration(p), unique)
}

fn lazy_power_iteration(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..1_000_000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            next[i] += 0.5 * pi[i];
            for j in 0..n {
                next[j] += 0.5 * pi[i] * p[i][j];
            }
        }
        let delta = next
            .iter()
            .zip(&pi)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

/// Expected steps to reach `target` from each state, with `target` made
/// absorbing. The target's own entry is `Some(0.0)`; `None` marks states
/// from which the target is not reached almost surely.
pub fn hitting_times(p: &[Vec<f64>], target: usize) -> Vec<Option<f64>> {
    let n = p.len();
    let mut absorbed = p.to_vec();
    absorbed[target] = (0..n).map(|j| if j == target { 1.0 } else { 0.0 }).collect();
    let reach = reachability(&absorbed);
    // states that can reach a state from which the target is unreachable
    let stuck: Vec<bool> = (0..n).map(|i| !reach[i][target]).collect();
    let finite: Vec<usize> = (0..n)
        .filter(|&i| i != target && !(0..n).any(|j| reach[i][j] && stuck[j]))
        .collect();
    let mut out = vec![None; n];
    out[target] = Some(0.0);
    if finite.is_empty() {
        return out;
    }
    let m = finite.len();
    let mut a = DMatrix::<f64>::identity(m, m);
    for (r, &i) in finite.iter().enumerate() {
        for (c, &j) in finite.iter().enumerate() {
            a[(r, c)] -= p[i][j];
        }
    }
    let b = DVector::<f64>::from_element(m, 1.0);
    if let Some(h) = a.lu().solve(&b) {
        for (r, &i) in finite.iter().enumerate() {
            out[i] = Some(h[r]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub order: usize,
    pub n_transitions: u64,
    pub n_params: usize,
    pub log_likelihood: Option<f64>,
    pub bic: Option<f64>,
    /// `"ok"` or `"insufficient_data"`.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSelection {
    pub best_order: usize,
    pub rows: Vec<OrderRow>,
}

/// Fits every order in `min..=max` and picks the lowest BIC (ties go to the
/// smaller order). Orders with fewer than two counted transitions are
/// skipped: with `N = 1` the penalty term `p·ln N` vanishes.
pub fn select_order(
    sequences: &[Vec<Category>],
    min: usize,
    max: usize,
) -> Result<OrderSelection, ExplicitError> {
    if min == 0 {
        return Err(ExplicitError::ZeroOrder);
    }
    if min > max {
        return Err(ExplicitError::EmptyRange);
    }
    if sequences.is_empty() {
        return Err(ExplicitError::EmptyInput);
    }
    let mut rows = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for order in min..=max {
        let row = match fit_markov(sequences, order) {
            Ok(m) if m.n_transitions >= 2 => {
                let bic = m.bic();
                if best.is_none_or(|(_, b)| bic < b) {
                    best = Some((order, bic));
                }
                OrderRow {
                    order,
                    n_transitions: m.n_transitions,
                    n_params: m.n_params(),
                    log_likelihood: Some(m.log_likelihood()),
                    bic: Some(bic),
                    status: "ok".into(),
                }
            }
            Ok(m) => OrderRow {
                order,
                n_transitions: m.n_transitions,
                n_params: m.n_params(),
                log_likelihood: None,
                bic: None,
                status: "insufficient_data".into(),
            },
            Err(ExplicitError::NoValidTransitions(_)) => OrderRow {
                order,
                n_transitions: 0,
                n_params: num_contexts(order) * (NUM_CORE - 1),
                log_likelihood: None,
                bic: None,
                status: "insufficient_data".into(),
            },
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    let (best_order, _) = best.ok_or(ExplicitError::InsufficientData)?;
    Ok(OrderSelection { best_order, rows })
}

/// Elementwise `a − b` of two transition tables.
pub fn transition_diff(a: &MarkovModel, b: &MarkovModel) -> Result<Vec<Vec<f64>>, ExplicitError> {
    if a.order != b.order {
        return Err(ExplicitError::OrderMismatch(a.order, b.order));
    }
    Ok(a.trans
        .iter()
        .zip(&b.trans)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x - y).collect())
        .collect())
}

/// Per-configuration differences summarized elementwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledDiff {
    pub mean: Vec<Vec<f64>>,
    /// Sample standard deviation (n − 1); zero for a single configuration.
    pub std: Vec<Vec<f64>>,
    pub n_configurations: usize,
}

pub fn pooled_transition_diff(
    pairs: &[(&MarkovModel, &MarkovModel)],
) -> Result<PooledDiff, ExplicitError> {
    let diffs = pairs
        .iter()
        .map(|(a, b)| transition_diff(a, b))
        .collect::<Result<Vec<_>, _>>()?;
    let first = diffs.first().ok_or(ExplicitError::EmptyInput)?;
    let (rows, cols) = (first.len(), first[0].len());
    if let Some(other) = diffs.iter().find(|d| d.len() != rows) {
        return Err(ExplicitError::BadShape(other.len()));
    }
    let n = diffs.len() as f64;
    let mut mean = vec![vec![0.0; cols]; rows];
    let mut std = vec![vec![0.0; cols]; rows];
    for r in 0..rows {
        for c in 0..cols {
            let m = diffs.iter().map(|d| d[r][c]).sum::<f64>() / n;
            mean[r][c] = m;
            if diffs.len() > 1 {
                let ss: f64 = diffs.iter().map(|d| (d[r][c] - m).powi(2)).sum();
                std[r][c] = (ss / (n - 1.0)).sqrt();
            }
        }
    }
    Ok(PooledDiff {
        mean,
        std,
        n_configurations: diffs.len(),
    })
}
