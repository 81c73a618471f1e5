//! Cross-step bridge matrices and the explicit bridge.
//!
//! For each ordered core pair `(c, c')` the entry matrix `Ĵ^{(c,c')}` is
//! row-stochastic: row `j` is the distribution of the entry regime of a
//! `c'` step given that the preceding `c` step exited through regime `j`.
//! The explicit bridge `R[c][j][c']` is the probability of the next category
//! given the source category and its exit regime.

use serde::{Deserialize, Serialize};

use crate::category::{Category, NUM_CORE};
use crate::codec::Matrix;

fn pair_index(source: usize, target: usize) -> usize {
    source * NUM_CORE + target
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgePair {
    pub source: Category,
    pub target: Category,
    /// `K×K` row-stochastic entry matrix.
    pub entry: Matrix,
    /// Total accumulated responsibility mass.
    pub mass: f64,
    /// No adjacent steps of this pair were seen; `entry` is uniform.
    pub missing: bool,
    /// Rows with zero mass, set uniform.
    pub uniform_rows: Vec<usize>,
}

/// All 16 entry matrices plus the explicit bridge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeSet {
    pub k: usize,
    /// Ordered by source then target in core order.
    pub pairs: Vec<BridgePair>,
    pub category_given_exit: ExplicitBridge,
}

impl BridgeSet {
    pub fn uniform(k: usize) -> Self {
        BridgeAccumulator::new(k).finish()
    }

    /// Builds a set from 16 entry matrices in source-major core order.
    /// Rows are normalized; all-zero rows become uniform.
    pub fn from_entries(k: usize, entries: &[Matrix]) -> Self {
        assert_eq!(entries.len(), NUM_CORE * NUM_CORE);
        let mut acc = BridgeAccumulator::new(k);
        for (i, m) in entries.iter().enumerate() {
            acc.add_joint(i / NUM_CORE, i % NUM_CORE, &m.data);
        }
        acc.finish()
    }

    pub fn pair(&self, source: Category, target: Category) -> Option<&BridgePair> {
        Some(&self.pairs[pair_index(source.core_index()?, target.core_index()?)])
    }

    pub fn entry(&self, source: Category, target: Category) -> Option<&Matrix> {
        self.pair(source, target).map(|p| &p.entry)
    }

    pub(crate) fn entry_by_index(&self, source: usize, target: usize) -> &Matrix {
        &self.pairs[pair_index(source, target)].entry
    }

    pub fn missing_pairs(&self) -> Vec<(Category, Category)> {
        self.pairs
            .iter()
            .filter(|p| p.missing)
            .map(|p| (p.source, p.target))
            .collect()
    }

    /// Relabels regimes: `perms[c][new] = old` for each core category.
    pub fn permuted(&self, perms: &[Vec<usize>; NUM_CORE]) -> BridgeSet {
        let k = self.k;
        let pairs = self
            .pairs
            .iter()
            .map(|p| {
                let (si, ti) = (p.source.core_index().unwrap(), p.target.core_index().unwrap());
                let mut entry = Matrix::zeros(k, k);
                for nj in 0..k {
                    for nk in 0..k {
                        entry.set(nj, nk, p.entry.get(perms[si][nj], perms[ti][nk]));
                    }
                }
                let mut uniform_rows: Vec<usize> = p
                    .uniform_rows
                    .iter()
                    .map(|&old| perms[si].iter().position(|&o| o == old).unwrap())
                    .collect();
                uniform_rows.sort_unstable();
                BridgePair {
                    entry,
                    uniform_rows,
                    ..p.clone()
                }
            })
            .collect();
        let rows = (0..NUM_CORE)
            .map(|c| {
                (0..k)
                    .map(|nj| self.category_given_exit.rows[c][perms[c][nj]].clone())
                    .collect()
            })
            .collect();
        BridgeSet {
            k,
            pairs,
            category_given_exit: ExplicitBridge { k, rows },
        }
    }
}

/// Responsibility-weighted accumulators for the entry matrices.
#[derive(Debug, Clone)]
pub struct BridgeAccumulator {
    k: usize,
    acc: Vec<Vec<f64>>,
}

impl BridgeAccumulator {
    pub fn new(k: usize) -> Self {
        BridgeAccumulator {
            k,
            acc: vec![vec![0.0; k * k]; NUM_CORE * NUM_CORE],
        }
    }

    /// Adds `exit(j)·entry(k)` for one adjacent `(source, target)` pair.
    pub fn add_outer(&mut self, source: usize, target: usize, exit: &[f64], entry: &[f64]) {
        let k = self.k;
        let a = &mut self.acc[pair_index(source, target)];
        for (j, &e) in exit.iter().enumerate() {
            if e == 0.0 {
                continue;
            }
            for (slot, &v) in a[j * k..(j + 1) * k].iter_mut().zip(entry) {
                *slot += e * v;
            }
        }
    }

    /// Adds a full `K×K` joint posterior (row-major).
    pub fn add_joint(&mut self, source: usize, target: usize, joint: &[f64]) {
        for (slot, v) in self.acc[pair_index(source, target)].iter_mut().zip(joint) {
            *slot += v;
        }
    }

    pub fn merge(&mut self, other: &BridgeAccumulator) {
        for (a, b) in self.acc.iter_mut().zip(&other.acc) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Row-normalizes every pair. Explicit bridge rows are left empty.
    pub fn finish(&self) -> BridgeSet {
        let k = self.k;
        let mut pairs = Vec::with_capacity(NUM_CORE * NUM_CORE);
        for s in 0..NUM_CORE {
            for t in 0..NUM_CORE {
                let a = &self.acc[pair_index(s, t)];
                let mass: f64 = a.iter().sum();
                let mut entry = Matrix::zeros(k, k);
                let mut uniform_rows = Vec::new();
                for j in 0..k {
                    let row = &a[j * k..(j + 1) * k];
                    let total: f64 = row.iter().sum();
                    let dst = entry.row_mut(j);
                    if total > 0.0 {
                        for (d, v) in dst.iter_mut().zip(row) {
                            *d = v / total;
                        }
                    } else {
                        dst.iter_mut().for_each(|d| *d = 1.0 / k as f64);
                        uniform_rows.push(j);
                    }
                }
                pairs.push(BridgePair {
                    source: Category::CORE[s],
                    target: Category::CORE[t],
                    entry,
                    mass,
                    missing: mass <= 0.0,
                    uniform_rows,
                });
            }
        }
        BridgeSet {
            k,
            pairs,
            category_given_exit: ExplicitBridge::empty(k),
        }
    }
}

/// `R[c][j]`: distribution of the next category (core order) given source
/// category `c` exiting through regime `j`; `None` when that exit carries no
/// mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitBridge {
    pub k: usize,
    pub rows: Vec<Vec<Option<Vec<f64>>>>,
}

impl ExplicitBridge {
    pub fn empty(k: usize) -> Self {
        ExplicitBridge {
            k,
            rows: vec![vec![None; k]; NUM_CORE],
        }
    }

    pub fn row(&self, source: Category, exit: usize) -> Option<&[f64]> {
        self.rows[source.core_index()?][exit].as_deref()
    }

    /// Whole-percent table for one source category, rounded so each row
    /// sums to exactly 100.
    pub fn percent_table(&self, source: Category) -> Vec<Option<Vec<u32>>> {
        let Some(c) = source.core_index() else {
            return Vec::new();
        };
        self.rows[c]
            .iter()
            .map(|r| r.as_ref().map(|p| round_percent(p)))
            .collect()
    }
}

/// Largest-remainder rounding of a distribution to integer percentages.
pub fn round_percent(p: &[f64]) -> Vec<u32> {
    let scaled: Vec<f64> = p.iter().map(|v| v * 100.0).collect();
    let mut out: Vec<u32> = scaled.iter().map(|v| v.floor() as u32).collect();
    let short = 100i64 - out.iter().map(|&v| v as i64).sum::<i64>();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(short.max(0) as usize) {
        out[i] += 1;
    }
    out
}

/// Accumulates `R` from exit posteriors of adjacent core steps.
#[derive(Debug, Clone)]
pub struct ExplicitBridgeAccumulator {
    k: usize,
    num: Vec<f64>,
}

impl ExplicitBridgeAccumulator {
    pub fn new(k: usize) -> Self {
        ExplicitBridgeAccumulator {
            k,
            num: vec![0.0; NUM_CORE * k * NUM_CORE],
        }
    }

    pub fn add(&mut self, source: usize, target: usize, exit: &[f64]) {
        for (j, &e) in exit.iter().enumerate() {
            self.num[(source * self.k + j) * NUM_CORE + target] += e;
        }
    }

    pub fn merge(&mut self, other: &ExplicitBridgeAccumulator) {
        for (a, b) in self.num.iter_mut().zip(&other.num) {
            *a += b;
        }
    }

    pub fn finish(&self) -> ExplicitBridge {
        let k = self.k;
        let rows = (0..NUM_CORE)
            .map(|c| {
                (0..k)
                    .map(|j| {
                        let s = (c * k + j) * NUM_CORE;
                        let row = &self.num[s..s + NUM_CORE];
                        let den: f64 = row.iter().sum();
                        (den > 0.0).then(|| row.iter().map(|v| v / den).collect())
                    })
                    .collect()
            })
            .collect();
        ExplicitBridge { k, rows }
    }
}

/// Explicit bridge from per-step exit posteriors. `exits[t]` is the final
/// layer posterior of step `t` (`None` for steps without one).
pub fn explicit_bridge<'a, I>(k: usize, trajectories: I) -> ExplicitBridge
where
    I: IntoIterator<Item = (&'a [Category], Vec<Option<&'a [f64]>>)>,
{
    let mut acc = ExplicitBridgeAccumulator::new(k);
    for (cats, exits) in trajectories {
        for t in 1..cats.len() {
            let (Some(s), Some(d)) = (cats[t - 1].core_index(), cats[t].core_index()) else {
                continue;
            };
            if let Some(exit) = exits[t - 1] {
                acc.add(s, d, exit);
            }
        }
    }
    acc.finish()
}
