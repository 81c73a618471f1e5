mod common;

use nalgebra::{DMatrix, DVector};
use prism::codec::Matrix;
use prism::implicit::{
    bridged_prior, collect_category_points, decode_all, fit_gmm, fit_gmm_from, fit_joint, fit_warmup,
    initial_gmm, step_log_likelihood, BridgeMStep, CategoryGmm, CategoryPoints, EmConfig, ImplicitModel,
};
use prism::preprocess::project_trace_set;
use prism::synth::{match_regimes, sample_with_labels};
use prism::Category;
use proptest::prelude::*;
use rand::Rng;

fn random_gmm(rng: &mut impl Rng, k: usize, dim: usize) -> CategoryGmm {
    let rows = |lo: f64, hi: f64, rng: &mut dyn rand::RngCore| -> Vec<Vec<f64>> {
        (0..k).map(|_| (0..dim).map(|_| rng.random_range(lo..hi)).collect()).collect()
    };
    let means = Matrix::from_rows(&rows(-3.0, 3.0, rng));
    let vars = Matrix::from_rows(&rows(0.2, 3.0, rng));
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    CategoryGmm::new(Category::Sr, means, vars, w.iter().map(|x| x / s).collect())
}

/// Multivariate normal log density with a dense covariance.
fn dense_log_density(mean: &[f64], cov: &DMatrix<f64>, x: &[f64]) -> f64 {
    let d = mean.len();
    let diff = DVector::from_iterator(d, x.iter().zip(mean).map(|(a, b)| a - b));
    let chol = cov.clone().cholesky().unwrap();
    let sol = chol.solve(&diff);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (diff.dot(&sol) + logdet + d as f64 * (2.0 * std::f64::consts::PI).ln())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn diagonal_emission_matches_dense_gaussian(seed in any::<u64>(), dim in 1usize..=8) {
        let mut rng = common::rng(seed);
        let g = random_gmm(&mut rng, 2, dim);
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-4.0..4.0)).collect();
        for k in 0..2 {
            let cov = DMatrix::from_diagonal(&DVector::from_row_slice(g.variances.row(k)));
            let want = dense_log_density(g.means.row(k), &cov, &x);
            prop_assert!((g.log_emission(k, &x) - want).abs() < 1e-10);
            prop_assert!((g.cache().log_emission(k, &x) - want).abs() < 1e-10);
        }
    }

    #[test]
    fn step_likelihood_matches_enumeration(seed in any::<u64>(), dim in 1usize..4, bridged in any::<bool>()) {
        let mut rng = common::rng(seed);
        let g = random_gmm(&mut rng, 2, dim);
        let x: Vec<f64> = (0..2 * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let exit = { let a: f64 = rng.random_range(0.0..1.0); vec![a, 1.0 - a] };
        let entry = Matrix::from_rows(&[vec![0.8, 0.2], vec![0.35, 0.65]]);
        let prior1 = if bridged { bridged_prior(&exit, &entry) } else { g.weights.clone() };
        let b = |k: usize, l: usize| g.log_emission(k, &x[l * dim..(l + 1) * dim]).exp();
        let mut total = 0.0;
        for k1 in 0..2 {
            for k2 in 0..2 {
                total += prior1[k1] * b(k1, 0) * g.weights[k2] * b(k2, 1);
            }
        }
        let prev = bridged.then_some((exit.as_slice(), &entry));
        let got = step_log_likelihood(&g, prev, &x);
        prop_assert!((got - total.ln()).abs() < 1e-10, "{got} vs {}", total.ln());
    }

    #[test]
    fn em_is_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let truth = random_gmm(&mut rng, 3, 2);
        let pts = sample_points(&mut rng, &truth, 150);
        let cfg = EmConfig { n_warmup: 10, tol: 0.0, ..EmConfig::with_k(3) };
        let init = initial_gmm(Category::Sr, &pts, &cfg, &mut common::rng(seed ^ 1));
        let perm = [2, 0, 1];
        let (a, _) = fit_gmm_from(&pts, init.clone(), &cfg);
        let (b, _) = fit_gmm_from(&pts, init.permuted(&perm), &cfg);
        let a = a.permuted(&perm);
        for (x, y) in a.means.data.iter().zip(&b.means.data).chain(a.variances.data.iter().zip(&b.variances.data)).chain(a.weights.iter().zip(&b.weights)) {
            prop_assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
        }
    }
}

fn sample_points(rng: &mut impl Rng, g: &CategoryGmm, n: usize) -> CategoryPoints {
    use rand_distr::{Distribution, Normal};
    let mut points = Vec::with_capacity(n * g.dim);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = g.k - 1;
        for (j, w) in g.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        for d in 0..g.dim {
            let n = Normal::new(g.means.get(k, d), g.variances.get(k, d).sqrt()).unwrap();
            points.push(n.sample(rng));
        }
    }
    CategoryPoints { category: g.category, dim: g.dim, points }
}

#[test]
fn single_regime_fit_is_the_sample_moments() {
    let mut rng = common::rng(3);
    let truth = random_gmm(&mut rng, 1, 3);
    let pts = sample_points(&mut rng, &truth, 400);
    let (g, _) = fit_gmm(&pts, &EmConfig::with_k(1), &mut common::rng(0)).unwrap();
    for d in 0..3 {
        let xs: Vec<f64> = (0..pts.len()).map(|i| pts.point(i)[d]).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((g.means.get(0, d) - m).abs() < 1e-9);
        assert!((g.variances.get(0, d) - v).abs() < 1e-9);
    }
}

fn fit(set: &prism::trace::TraceSet, cfg: &EmConfig) -> ImplicitModel {
    let trajs = project_trace_set(None, set).unwrap();
    let warm = fit_warmup(&trajs, cfg).unwrap();
    fit_joint(&warm, &trajs, cfg).unwrap()
}

#[test]
fn bridges_recover_generating_values_at_scale() {
    let truth = common::params(common::mixing_chain(), 3, 4, 4, [10, 14]);
    let (set, _) = sample_with_labels(&truth, 3000, 77).unwrap();
    let model = fit(&set, &EmConfig::with_k(3));
    let mut perms: [Vec<usize>; 4] = Default::default();
    for (ci, g) in truth.gmms.iter().enumerate() {
        let m = match_regimes(g, model.gmm(g.category).unwrap()).unwrap();
        assert!(m.max_mean_abs_error < 0.05 && m.max_weight_abs_error < 0.02);
        perms[ci] = m.perm;
    }
    let aligned = model.bridges.permuted(&perms);
    let mut worst: f64 = 0.0;
    for (a, t) in aligned.pairs.iter().zip(&truth.bridges.pairs) {
        for (x, y) in a.entry.data.iter().zip(&t.entry.data) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst < 0.08, "max bridge error {worst}");
}

#[test]
fn coupled_bridge_update_also_recovers() {
    let truth = common::params(common::cyclic_chain(0.9), 2, 3, 3, [15, 15]);
    let (set, labels) = sample_with_labels(&truth, 300, 8).unwrap();
    let cfg = EmConfig { bridge_mstep: BridgeMStep::Coupled, ..EmConfig::with_k(2) };
    let model = fit(&set, &cfg);
    let log = model.log.as_ref().unwrap();
    assert!(log.joint.max_relative_decrease <= 1e-3);
    let mut perms: [Vec<usize>; 4] = Default::default();
    for (ci, g) in truth.gmms.iter().enumerate() {
        perms[ci] = match_regimes(g, model.gmm(g.category).unwrap()).unwrap().perm;
    }
    let aligned = model.bridges.permuted(&perms);
    let complete = common::complete_data_bridges(&set, &labels, 2);
    for (a, c) in aligned.pairs.iter().zip(&complete.pairs) {
        if c.mass > 0.0 {
            for (x, y) in a.entry.data.iter().zip(&c.entry.data) {
                assert!((x - y).abs() < 0.05);
            }
        }
    }
}

#[test]
fn missing_category_is_skipped_with_warning() {
    let truth = common::params(common::cyclic_chain(0.5), 2, 2, 2, [6, 6]);
    let (mut set, _) = sample_with_labels(&truth, 40, 1).unwrap();
    // relabel every UV step as unknown
    for s in &mut set.samples {
        for st in &mut s.steps {
            if st.category == Category::Uv {
                st.category = Category::Unk;
            }
        }
    }
    let model = fit(&set, &EmConfig::with_k(2));
    assert!(model.gmm(Category::Uv).is_none());
    let log = model.log.as_ref().unwrap();
    assert!(log.warnings.iter().any(|w| w.contains("InsufficientData")));
    // pairs touching an unfitted category stay uniform but are not reported
    assert!(model.bridges.pair(Category::Uv, Category::Fa).unwrap().missing);
    assert!(!log.joint.missing_pairs.iter().any(|p| p.contains("UV")));
    let decoded = decode_all(&model, &project_trace_set(None, &set).unwrap());
    decoded.unwrap();
}

#[test]
fn category_points_group_every_core_layer_vector() {
    let truth = common::params(common::mixing_chain(), 2, 2, 3, [5, 5]);
    let (set, _) = sample_with_labels(&truth, 10, 4).unwrap();
    let trajs = project_trace_set(None, &set).unwrap();
    let pts = collect_category_points(&trajs);
    let total: usize = pts.iter().map(|p| p.len()).sum();
    assert_eq!(total, 10 * 5 * 3);
}

#[test]
fn model_json_round_trip() {
    let truth = common::params(common::mixing_chain(), 2, 2, 2, [5, 8]);
    let (set, _) = sample_with_labels(&truth, 60, 4).unwrap();
    let model = fit(&set, &EmConfig::with_k(2));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    model.save(&p).unwrap();
    let back = ImplicitModel::load(&p).unwrap();
    assert_eq!(back.gmms.len(), model.gmms.len());
    for (a, b) in back.gmms.iter().zip(&model.gmms) {
        for (x, y) in a.means.data.iter().zip(&b.means.data) {
            // stored narrowed to f32
            assert_eq!(*x, *y as f32 as f64);
        }
    }
}
