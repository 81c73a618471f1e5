//! Diagonal-covariance regime mixtures and their per-step posteriors.

use serde::{Deserialize, Serialize};

use crate::category::Category;
use crate::codec::Matrix;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Regime mixture of one category over `D`-dimensional layer vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryGmm {
    pub category: Category,
    pub k: usize,
    pub dim: usize,
    /// `K×D`.
    pub means: Matrix,
    /// `K×D`, every entry at least the variance floor.
    pub variances: Matrix,
    pub weights: Vec<f64>,
}

impl CategoryGmm {
    pub fn new(category: Category, means: Matrix, variances: Matrix, weights: Vec<f64>) -> Self {
        assert_eq!(means.rows, variances.rows);
        assert_eq!(means.cols, variances.cols);
        assert_eq!(means.rows, weights.len());
        CategoryGmm {
            category,
            k: means.rows,
            dim: means.cols,
            means,
            variances,
            weights,
        }
    }

    /// Log density of regime `k` at `x` (diagonal Gaussian).
    pub fn log_emission(&self, k: usize, x: &[f64]) -> f64 {
        let mu = self.means.row(k);
        let var = self.variances.row(k);
        let mut maha = 0.0;
        let mut logdet = 0.0;
        for d in 0..self.dim {
            let diff = x[d] - mu[d];
            maha += diff * diff / var[d];
            logdet += var[d].ln();
        }
        -0.5 * maha - 0.5 * logdet - 0.5 * self.dim as f64 * LN_2PI
    }

    /// Same regimes relabeled so that new regime `i` is old regime `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> CategoryGmm {
        let mut means = Matrix::zeros(self.k, self.dim);
        let mut variances = Matrix::zeros(self.k, self.dim);
        let mut weights = vec![0.0; self.k];
        for (new, &old) in perm.iter().enumerate() {
            means.row_mut(new).copy_from_slice(self.means.row(old));
            variances.row_mut(new).copy_from_slice(self.variances.row(old));
            weights[new] = self.weights[old];
        }
        CategoryGmm::new(self.category, means, variances, weights)
    }

    pub fn cache(&self) -> EmissionCache<'_> {
        EmissionCache::new(self)
    }
}

/// Precomputed terms for repeated emission evaluation.
pub struct EmissionCache<'a> {
    pub gmm: &'a CategoryGmm,
    inv_var: Vec<f64>,
    log_norm: Vec<f64>,
    pub log_weights: Vec<f64>,
}

impl<'a> EmissionCache<'a> {
    pub fn new(gmm: &'a CategoryGmm) -> Self {
        let inv_var = gmm.variances.data.iter().map(|v| 1.0 / v).collect();
        let log_norm = (0..gmm.k)
            .map(|k| {
                let logdet: f64 = gmm.variances.row(k).iter().map(|v| v.ln()).sum();
                -0.5 * logdet - 0.5 * gmm.dim as f64 * LN_2PI
            })
            .collect();
        let log_weights = gmm.weights.iter().map(|w| w.ln()).collect();
        EmissionCache {
            gmm,
            inv_var,
            log_norm,
            log_weights,
        }
    }

    pub fn log_emission(&self, k: usize, x: &[f64]) -> f64 {
        let d = self.gmm.dim;
        let mu = self.gmm.means.row(k);
        let iv = &self.inv_var[k * d..(k + 1) * d];
        let mut maha = 0.0;
        for i in 0..d {
            let diff = x[i] - mu[i];
            maha += diff * diff * iv[i];
        }
        self.log_norm[k] - 0.5 * maha
    }

    /// Writes `log emission_k(x)` for every regime into `out`.
    pub fn log_emissions(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.log_emission(k, x);
        }
    }

    /// Normalized posterior under log prior `log_prior` into `gamma`; returns
    /// the log marginal `log Σ_k prior_k·b_k(x)`.
    pub fn posterior(&self, x: &[f64], log_prior: &[f64], gamma: &mut [f64]) -> f64 {
        for k in 0..self.gmm.k {
            gamma[k] = log_prior[k] + self.log_emission(k, x);
        }
        normalize_log(gamma)
    }

    /// Layer posteriors of one step (`L×D` input, `L×K` output). Layer 1
    /// uses `layer1_prior`; later layers use the mixture weights. Returns the
    /// step log-likelihood.
    pub fn step_posteriors(&self, step: &[f64], layer1_prior: &[f64], gamma: &mut [f64]) -> f64 {
        let (d, k) = (self.gmm.dim, self.gmm.k);
        let layers = step.len() / d;
        let log_prior1: Vec<f64> = layer1_prior.iter().map(|p| p.ln()).collect();
        let mut ll = 0.0;
        for l in 0..layers {
            let prior = if l == 0 { &log_prior1 } else { &self.log_weights };
            ll += self.posterior(&step[l * d..(l + 1) * d], prior, &mut gamma[l * k..(l + 1) * k]);
        }
        ll
    }
}

/// `log Σ exp(v)`; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Turns log weights into a normalized distribution in place and returns
/// their log-sum-exp.
pub fn normalize_log(v: &mut [f64]) -> f64 {
    let lse = log_sum_exp(v);
    if !lse.is_finite() {
        let u = 1.0 / v.len() as f64;
        v.iter_mut().for_each(|x| *x = u);
        return lse;
    }
    for x in v.iter_mut() {
        *x = (*x - lse).exp();
    }
    lse
}

/// Standalone log emission.
pub fn log_emission(gmm: &CategoryGmm, k: usize, x: &[f64]) -> f64 {
    gmm.log_emission(k, x)
}

/// Posterior responsibilities of one step's `L×D` layer vectors, `L×K`
/// row-major.
pub fn responsibilities(gmm: &CategoryGmm, layer_vectors: &[f64], layer1_prior: &[f64]) -> Vec<f64> {
    let layers = layer_vectors.len() / gmm.dim;
    let mut gamma = vec![0.0; layers * gmm.k];
    gmm.cache().step_posteriors(layer_vectors, layer1_prior, &mut gamma);
    gamma
}

/// Layer-1 prior `Σ_j exit(j)·entry[j][k]`.
pub fn bridged_prior(exit: &[f64], entry: &Matrix) -> Vec<f64> {
    let mut prior = vec![0.0; entry.cols];
    for (j, &e) in exit.iter().enumerate() {
        if e == 0.0 {
            continue;
        }
        for (p, &v) in prior.iter_mut().zip(entry.row(j)) {
            *p += e * v;
        }
    }
    prior
}

/// Joint log-likelihood of one step's layers: layer 1 under the bridged
/// prior built from the previous step's exit posterior (or the mixture
/// weights for a trajectory-initial step), later layers under the weights.
pub fn step_log_likelihood(
    gmm: &CategoryGmm,
    prev: Option<(&[f64], &Matrix)>,
    layer_vectors: &[f64],
) -> f64 {
    let prior = match prev {
        Some((exit, entry)) => bridged_prior(exit, entry),
        None => gmm.weights.clone(),
    };
    let layers = layer_vectors.len() / gmm.dim;
    let mut gamma = vec![0.0; layers * gmm.k];
    gmm.cache().step_posteriors(layer_vectors, &prior, &mut gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_2d() -> CategoryGmm {
        CategoryGmm::new(
            Category::Ac,
            Matrix::from_rows(&[vec![0.0, 0.0]]),
            Matrix::from_rows(&[vec![1.0, 1.0]]),
            vec![1.0],
        )
    }

    #[test]
    fn emission_hand_values() {
        let g = unit_2d();
        let l2pi = (2.0 * std::f64::consts::PI).ln();
        assert!((g.log_emission(0, &[0.0, 0.0]) + l2pi).abs() < 1e-12);
        assert!((g.log_emission(0, &[1.0, 0.0]) - (-0.5 - l2pi)).abs() < 1e-12);
        let g4 = CategoryGmm::new(
            Category::Ac,
            Matrix::from_rows(&[vec![1.0, -1.0]]),
            Matrix::from_rows(&[vec![4.0, 1.0]]),
            vec![1.0],
        );
        let want = -0.5 * 4.0f64.ln() - l2pi;
        assert!((g4.log_emission(0, &[1.0, -1.0]) - want).abs() < 1e-12);
        assert!((g4.cache().log_emission(0, &[1.0, -1.0]) - want).abs() < 1e-12);
    }

    fn symmetric_1d() -> CategoryGmm {
        CategoryGmm::new(
            Category::Sr,
            Matrix::from_rows(&[vec![-1.0], vec![1.0]]),
            Matrix::from_rows(&[vec![1.0], vec![1.0]]),
            vec![0.5, 0.5],
        )
    }

    #[test]
    fn responsibilities_symmetric_and_ratio() {
        let g = symmetric_1d();
        let r = responsibilities(&g, &[0.0], &[0.5, 0.5]);
        assert!((r[0] - 0.5).abs() < 1e-15 && (r[1] - 0.5).abs() < 1e-15);
        let r = responsibilities(&g, &[1.0], &[0.5, 0.5]);
        let want = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((r[1] - want).abs() < 1e-12);
        assert!((r[0] + r[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_layer1_prior_forces_posterior() {
        let g = symmetric_1d();
        // layer 1 sits on regime 1's mean but the prior pins regime 0
        let r = responsibilities(&g, &[1.0, 1.0], &[1.0, 0.0]);
        assert_eq!(&r[..2], &[1.0, 0.0]);
        assert!(r[3] > 0.5);
    }

    #[test]
    fn single_component_collapses_to_sum() {
        let g = unit_2d();
        let x = [0.3, -0.2, 1.5, 0.7, -2.0, 0.1];
        let want: f64 = x.chunks(2).map(|v| g.log_emission(0, v)).sum();
        assert!((step_log_likelihood(&g, None, &x) - want).abs() < 1e-12);
        let entry = Matrix::from_rows(&[vec![1.0]]);
        assert!((step_log_likelihood(&g, Some((&[1.0], &entry)), &x) - want).abs() < 1e-12);
    }

    #[test]
    fn equal_emissions_cancel_weights() {
        let g = CategoryGmm::new(
            Category::Uv,
            Matrix::from_rows(&[vec![0.0], vec![0.0]]),
            Matrix::from_rows(&[vec![2.0], vec![2.0]]),
            vec![0.5, 0.5],
        );
        let x = [0.4, -1.1];
        let want = g.log_emission(0, &[0.4]) + g.log_emission(0, &[-1.1]);
        assert!((step_log_likelihood(&g, None, &x) - want).abs() < 1e-12);
    }

    #[test]
    fn permutation_relabels() {
        let g = symmetric_1d();
        let p = g.permuted(&[1, 0]);
        assert_eq!(p.means.row(0), &[1.0]);
        assert_eq!(p.means.row(1), &[-1.0]);
    }

    #[test]
    fn lse_handles_infinities() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 2]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, f64::NEG_INFINITY]) - 0.0).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
