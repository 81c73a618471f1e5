mod common;

use prism::diagnostics::{
    build_report, compare_cohorts, mean_posterior_profile, quartiles, report_tables, scatter_csv,
    scatter_points, CohortFilter, ReportConfig, ReportInputs,
};
use prism::explicit::{fit_markov, transition_diff, SummaryOptions};
use prism::implicit::{decode_all, fit_joint, fit_warmup, DecodedTrace, EmConfig, ImplicitModel};
use prism::preprocess::{project_trace_set, ProjectedTrace};
use prism::synth::sample_trace_set;
use prism::trace::{Correctness, TraceSet};
use prism::Category;
use proptest::prelude::*;

/// Linear-interpolation percentile (the common "type 7" definition).
fn percentile(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (s.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

proptest! {
    #[test]
    fn quartiles_match_percentile_oracle(v in proptest::collection::vec(-100.0f64..100.0, 1..60)) {
        let q = quartiles(&v).unwrap();
        prop_assert_eq!(q.n, v.len());
        prop_assert!((q.q1 - percentile(&v, 0.25)).abs() < 1e-12);
        prop_assert!((q.median - percentile(&v, 0.5)).abs() < 1e-12);
        prop_assert!((q.q3 - percentile(&v, 0.75)).abs() < 1e-12);
    }
}

#[test]
fn quartiles_small_cases() {
    assert!(quartiles(&[]).is_none());
    let q = quartiles(&[3.0]).unwrap();
    assert_eq!((q.q1, q.median, q.q3), (3.0, 3.0, 3.0));
    let q = quartiles(&[4.0, 1.0, 3.0, 2.0]).unwrap();
    assert_eq!((q.q1, q.median, q.q3), (1.75, 2.5, 3.25));
}

struct Fixture {
    set: TraceSet,
    projected: Vec<ProjectedTrace>,
    model: ImplicitModel,
    decoded: Vec<DecodedTrace>,
}

fn fixture() -> Fixture {
    let p = common::params(common::mixing_chain(), 2, 3, 2, [4, 16]);
    let mut set = sample_trace_set(&p, 120, 9).unwrap();
    for (i, s) in set.samples.iter_mut().enumerate() {
        s.correctness = if i % 5 < 3 { Correctness::Correct } else { Correctness::Incorrect };
        s.meta.insert("model".into(), format!("m{}", i % 3));
        s.meta.insert("dataset".into(), "toy".into());
    }
    let projected = project_trace_set(None, &set).unwrap();
    let cfg = EmConfig::with_k(2);
    let warm = fit_warmup(&projected, &cfg).unwrap();
    let model = fit_joint(&warm, &projected, &cfg).unwrap();
    let decoded = decode_all(&model, &projected).unwrap();
    Fixture { set, projected, model, decoded }
}

fn report(f: &Fixture) -> prism::diagnostics::DiagnosticsReport {
    let inp = ReportInputs {
        set: &f.set,
        projected: Some(&f.projected),
        implicit: Some(&f.model),
        decoded: Some(&f.decoded),
    };
    let cfg = ReportConfig { long_threshold: 10, ..ReportConfig::default() };
    build_report(&inp, &cfg).unwrap()
}

#[test]
fn centroids_match_brute_force_means() {
    let f = fixture();
    let pts = scatter_points(&f.projected);
    for c in Category::CORE {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut n = 0.0;
        for tr in &f.projected {
            for (t, cat) in tr.categories.iter().enumerate() {
                if *cat != c {
                    continue;
                }
                let l = tr.features.layers as f64;
                sx += (0..tr.features.layers).map(|k| tr.features.vector(t, k)[0]).sum::<f64>() / l;
                sy += (0..tr.features.layers).map(|k| tr.features.vector(t, k)[1]).sum::<f64>() / l;
                n += 1.0;
            }
        }
        let cen = pts.iter().find(|p| p.is_centroid && p.category == c).unwrap();
        assert!((cen.x - sx / n).abs() < 1e-9 && (cen.y - sy / n).abs() < 1e-9);
    }
    assert!(scatter_csv(&pts).starts_with("x,y,category,is_centroid\n"));
}

#[test]
fn report_is_deterministic_and_consistent() {
    let f = fixture();
    let a = serde_json::to_string(&report(&f)).unwrap();
    let b = serde_json::to_string(&report(&f)).unwrap();
    assert_eq!(a, b);

    let r = report(&f);
    let names: Vec<&str> = r.cohorts.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, ["all", "correct", "incorrect", "long_failure", "short_failure"]);
    assert_eq!(r.cohorts[0].n_samples, 120);
    assert_eq!(r.cohorts[3].n_samples + r.cohorts[4].n_samples, r.cohorts[2].n_samples);
    assert_eq!(r.cohorts[1].n_configurations, 3);

    // the correct-minus-incorrect diff is the diff of separate fits
    let pick = |c: Correctness| -> Vec<Vec<Category>> {
        f.set.samples.iter().filter(|s| s.correctness == c).map(|s| s.categories()).collect()
    };
    let want = transition_diff(
        &fit_markov(&pick(Correctness::Correct), 1).unwrap(),
        &fit_markov(&pick(Correctness::Incorrect), 1).unwrap(),
    )
    .unwrap();
    let d = &r.transition_diffs[0];
    assert_eq!((d.a.as_str(), d.b.as_str()), ("correct", "incorrect"));
    assert_eq!(d.pooled.as_ref().unwrap(), &want);
    assert_eq!(d.per_configuration.as_ref().unwrap().n_configurations, 3);

    let files: Vec<String> = report_tables(&r).into_iter().map(|(n, _)| n).collect();
    for must in ["transitions_all.csv", "chain_summary.csv", "fa_visits.csv", "diff_correct_minus_incorrect.csv"] {
        assert!(files.iter().any(|f| f == must), "missing {must} in {files:?}");
    }
}

#[test]
fn posterior_profile_is_the_mean_posterior() {
    let f = fixture();
    let all = CohortFilter::all();
    let p = mean_posterior_profile(&f.set, &f.decoded, Category::Ac, &all).unwrap();
    let mean = p.mean.unwrap();
    let (layers, k) = (f.model.layers, f.model.k);
    let mut sum = vec![0.0; layers * k];
    let mut n = 0.0;
    for d in &f.decoded {
        for (t, c) in d.categories.iter().enumerate() {
            if *c == Category::Ac {
                for l in 0..layers {
                    for (j, v) in d.posteriors.layer(t, l).unwrap().iter().enumerate() {
                        sum[l * k + j] += v;
                    }
                }
                n += 1.0;
            }
        }
    }
    assert_eq!(p.support, n as usize);
    for (a, b) in mean.iter().zip(&sum) {
        assert!((a - b / n).abs() < 1e-12);
    }
}

#[test]
fn cohort_comparison_columns() {
    let f = fixture();
    let cohorts = vec![
        ("m0".to_string(), CohortFilter::all().with_meta("model", "m0")),
        ("m1".to_string(), CohortFilter::all().with_meta("model", "m1")),
    ];
    let cmp = compare_cohorts(&f.set, Some(&f.decoded), &cohorts, SummaryOptions::default()).unwrap();
    assert_eq!(cmp.baseline, "m0");
    assert_eq!(cmp.columns[0].n_samples, 40);
    assert_eq!(cmp.columns[0].l2_vs_baseline, vec![Some(0.0); 4]);
    assert!(cmp.columns[1].l2_vs_baseline.iter().all(|v| v.unwrap() >= 0.0));
    let acc = cmp.columns[0].accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn length_bounds_split_failures() {
    let f = fixture();
    let long = CohortFilter::long_failures(10).select(&f.set);
    let short = CohortFilter::short_failures(10).select(&f.set);
    assert!(long.iter().all(|&i| f.set.samples[i].len() >= 10));
    assert!(short.iter().all(|&i| f.set.samples[i].len() < 10));
    assert!(long.iter().all(|i| !short.contains(i)));
}
