mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use prism::trace::{save_trace_set, Correctness, HiddenTensor, StepRecord, TraceSample, TraceSet};

fn prism(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prism"))
        .args(args)
        .env_remove("PRISM_THREADS")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_params(dir: &Path) -> std::path::PathBuf {
    let params = common::params(common::mixing_chain(), 2, 3, 2, [5, 12]);
    let path = dir.join("params.json");
    params.save(&path).unwrap();
    path
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let params = write_params(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = prism(&["simulate", "--params", p(&params), "--n", "20", "--seed", "3", "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    assert_eq!(fs::read(a.join("tensors/000007.bin")).unwrap(), fs::read(b.join("tensors/000007.bin")).unwrap());
}

#[test]
fn auto_order_finds_second_order_source() {
    let mut rng = common::rng(44);
    let seqs = common::order2_sequences(&mut rng, 40, 200, 0.6);
    let samples = seqs
        .into_iter()
        .enumerate()
        .map(|(i, cats)| TraceSample {
            id: format!("s{i}"),
            tensor: HiddenTensor::new(cats.len(), 1, 1, vec![0.0; cats.len()]),
            steps: cats
                .into_iter()
                .enumerate()
                .map(|(t, category)| StepRecord { t: t as u32 + 1, category, text: None })
                .collect(),
            correctness: Correctness::Unlabeled,
            meta: BTreeMap::new(),
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("set");
    save_trace_set(&TraceSet::new(1, 1, samples), &input).unwrap();
    let out = dir.path().join("fit");
    let o = prism(&["fit-explicit", "--input", p(&input), "--out", p(&out), "--order", "auto"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("selected order 2"));
    assert!(out.join("markov.json").exists());
    assert!(out.join("tables/markov.csv").exists());
}

#[test]
fn full_pipeline_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let params = write_params(dir.path());
    let set = dir.path().join("set");
    assert!(prism(&["simulate", "--params", p(&params), "--n", "40", "--out", p(&set)]).status.success());
    let out = dir.path().join("report");
    let o = prism(&["report", "--input", p(&set), "--k", "2", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["markov.json", "implicit.json", "decoded.csv", "report.json", "scatter.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let decoded = fs::read_to_string(out.join("decoded.csv")).unwrap();
    assert!(decoded.starts_with("id,t,layer,category,regime,p0,p1\n"));

    let again = dir.path().join("decode-again");
    let o = prism(&["decode", "--input", p(&set), "--model", p(&out.join("implicit.json")), "--out", p(&again)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let path = if again.is_dir() { again.join("decoded.csv") } else { again };
    assert_eq!(fs::read_to_string(path).unwrap(), decoded);
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = prism(&["fit-explicit", "--input", p(dir.path()), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(prism(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(prism(&["simulate", "--n", "3"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let o = prism(&["select-order", "--input", p(dir.path()), "--order-min", "3", "--order-max", "2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn version_lists_schemas() {
    let o = prism(&["--version"]);
    assert!(o.status.success());
    let s = String::from_utf8_lossy(&o.stdout);
    assert!(s.contains("prism"));
}
