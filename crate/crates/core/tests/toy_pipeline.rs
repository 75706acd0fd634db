mod common;

use std::path::Path;
use std::time::Duration;

use common::stub::{Stub, StubConfig};
use contamscope::backend::BackendConfig;
use contamscope::detectors::DetectorId;
use contamscope::pipeline::{
    run_collect, run_eval, run_pipeline, run_score, toy_init, Manifest, RunConfig, RunStatus,
    FAILURES_FILE, SCORES_FILE, TRACES_FILE,
};
use contamscope::toy::ToyWorldConfig;
use contamscope::trace::{dataset_to_string, ItemRecord, Label};
use contamscope::Error;

fn toy_config(root: &Path, n_c: usize, n_cl: usize) -> RunConfig {
    let world = ToyWorldConfig {
        n_contaminated: n_c,
        n_clean: n_cl,
        answer_length: 32,
        min_answer_length: 32,
        ..Default::default()
    };
    toy_init(&world, &root.join("toy"), false).unwrap();
    let mut cfg = RunConfig::new(root.join("out"));
    cfg.dataset = Some(root.join("toy/dataset.jsonl"));
    cfg.backend = BackendConfig::new(format!("toy:{}", root.join("toy/toy_model.json").display()));
    cfg.backend.num_samples = 10;
    cfg.bootstrap_replicates = 100;
    cfg.dip_replicates = 50;
    cfg
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn forty_items_end_to_end_and_rerun_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 20, 20);
    let first = run_pipeline(&cfg).unwrap();
    assert_eq!(first.status, RunStatus::Success);
    let report = first.report.unwrap();
    assert_eq!(report.detectors.len(), DetectorId::ALL.len());
    let dvd = report.get(DetectorId::Dvd).unwrap();
    assert_eq!((dvd.n_contaminated, dvd.n_clean), (20, 20));

    let m: Manifest = serde_json::from_slice(&read(cfg.out_dir.join("manifest.json"))).unwrap();
    assert_eq!(m.defaults.min_tokens_m, 20);
    assert_eq!(m.defaults.num_samples, 10);
    assert_eq!(m.backend.as_ref().unwrap().scheme, "toy");
    assert!(m.degraded.is_empty(), "{:?}", m.degraded);
    assert!(m.inputs.contains_key("dataset"));
    for out in &m.outputs {
        assert!(cfg.out_dir.join(out).exists(), "{out}");
    }

    let rerun = RunConfig {
        out_dir: dir.path().join("rerun"),
        ..cfg.clone()
    };
    run_pipeline(&rerun).unwrap();
    for name in &m.outputs {
        assert_eq!(
            read(cfg.out_dir.join(name)),
            read(rerun.out_dir.join(name)),
            "{name}"
        );
    }
    assert_eq!(
        read(cfg.out_dir.join("manifest.json")),
        read(rerun.out_dir.join("manifest.json"))
    );

    let other_seed = RunConfig {
        out_dir: dir.path().join("seed9"),
        seed: 9,
        ..cfg.clone()
    };
    run_pipeline(&other_seed).unwrap();
    assert_ne!(
        read(cfg.out_dir.join(SCORES_FILE)),
        read(other_seed.out_dir.join(SCORES_FILE))
    );
}

#[test]
fn staged_run_matches_pipeline_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 5, 5);
    run_pipeline(&cfg).unwrap();
    let staged = RunConfig {
        out_dir: dir.path().join("staged"),
        ..cfg.clone()
    };
    run_collect(&staged).unwrap();
    run_score(&staged).unwrap();
    run_eval(&staged).unwrap();
    for name in [TRACES_FILE, SCORES_FILE, "report.jsonl", "auc_table.txt"] {
        assert_eq!(
            read(cfg.out_dir.join(name)),
            read(staged.out_dir.join(name)),
            "{name}"
        );
    }
}

#[test]
fn scoring_recorded_traces_makes_no_wire_calls() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 4, 4);
    run_collect(&cfg).unwrap();
    let stub = Stub::start(StubConfig::default());
    let score_cfg = RunConfig {
        backend: BackendConfig::new(stub.url.clone()),
        ..cfg.clone()
    };
    run_score(&score_cfg).unwrap();
    run_eval(&score_cfg).unwrap();
    assert_eq!(stub.request_count(), 0);
}

#[test]
fn clean_only_dataset_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), 0, 8);
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(err, Error::DegenerateLabels(_)));
    assert_eq!(err.exit_code(), 4);
    assert!(cfg.out_dir.join(SCORES_FILE).exists());
}

#[test]
fn http_item_failures_make_a_partial_run() {
    let dir = tempfile::tempdir().unwrap();
    let stub = Stub::start(StubConfig {
        reject_prompts: vec!["item 3?".into(), "item 7?".into()],
        ..Default::default()
    });
    let items: Vec<ItemRecord> = (0..10)
        .map(|i| ItemRecord {
            item_id: format!("i{i}"),
            prompt: format!("What about item {i}?"),
            reference_answer: "alpha beta".into(),
            label: if i < 5 {
                Label::Contaminated
            } else {
                Label::Clean
            },
            domain_tag: None,
        })
        .collect();
    let dataset = dir.path().join("data.jsonl");
    std::fs::write(&dataset, dataset_to_string(&items)).unwrap();
    let mut cfg = RunConfig::new(dir.path().join("out"));
    cfg.dataset = Some(dataset);
    cfg.backend = BackendConfig::new(stub.url.clone());
    cfg.backend.num_samples = 3;
    cfg.backend.backoff_base = Duration::from_millis(1);
    cfg.bootstrap_replicates = 0;
    cfg.dip_replicates = 0;
    let out = run_pipeline(&cfg).unwrap();
    assert_eq!(out.status, RunStatus::Partial);
    assert_eq!(out.status.exit_code(), 3);
    assert_eq!(out.manifest.failed_items.len(), 2);
    assert_eq!(
        out.manifest.request_count,
        Some(stub.request_count() as u64)
    );
    let failures = String::from_utf8(read(cfg.out_dir.join(FAILURES_FILE))).unwrap();
    assert_eq!(failures.lines().count(), 2);
    let traces = String::from_utf8(read(cfg.out_dir.join(TRACES_FILE))).unwrap();
    assert_eq!(traces.lines().count(), 8);
    let scores = String::from_utf8(read(cfg.out_dir.join(SCORES_FILE))).unwrap();
    assert_eq!(scores.lines().count(), 8 * DetectorId::ALL.len());
}
