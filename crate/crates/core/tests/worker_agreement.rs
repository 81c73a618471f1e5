mod common;

use prism::implicit::{decode_all, fit_joint, fit_warmup, EmConfig};
use prism::parallel::THREADS_ENV;
use prism::preprocess::{fit_preprocess, project_trace_set};
use prism::synth::sample_with_labels;
use prism::trace::{load_trace_set, save_trace_set};

// One test per binary: it mutates the worker-count variable.
#[test]
fn results_do_not_depend_on_worker_count() {
    let truth = common::params(common::mixing_chain(), 3, 3, 3, [6, 12]);
    let (set, _) = sample_with_labels(&truth, 80, 5).unwrap();
    let raw = common::random_trace_set(&mut common::rng(2), 30, 2, 5, 8);
    let run = || {
        let trajs = project_trace_set(None, &set).unwrap();
        let cfg = EmConfig::with_k(3);
        let warm = fit_warmup(&trajs, &cfg).unwrap();
        let model = fit_joint(&warm, &trajs, &cfg).unwrap();
        let decoded = decode_all(&model, &trajs).unwrap();
        let pre = fit_preprocess(&raw, 3).unwrap();
        let projected = project_trace_set(Some(&pre), &raw).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_trace_set(&raw, dir.path()).unwrap();
        let loaded = load_trace_set(dir.path()).unwrap();
        (serde_json::to_string(&model).unwrap(), decoded.len(), decoded.iter().map(|d| d.path.clone()).collect::<Vec<_>>(), projected, loaded)
    };
    std::env::set_var(THREADS_ENV, "1");
    let one = run();
    std::env::set_var(THREADS_ENV, "4");
    let four = run();
    std::env::remove_var(THREADS_ENV);
    assert_eq!(one.0, four.0);
    assert_eq!(one.2, four.2);
    assert_eq!(one.3, four.3);
    assert_eq!(one.4, four.4);
}
