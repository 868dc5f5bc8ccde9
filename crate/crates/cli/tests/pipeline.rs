use std::fs;
use std::path::{Path, PathBuf};

use callstep::corpus_io::{load_queries, read_prm_dataset};
use callstep::eval::read_sweep_csv;
use callstep_cli::{read_predictions, run};
use serde_json::Value;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn config() -> String {
    root().join("configs/sim.toml").display().to_string()
}

fn fixture(name: &str) -> String {
    root().join("fixtures").join(name).display().to_string()
}

fn call(args: &[&str]) -> i32 {
    run(std::iter::once("callstep").chain(args.iter().copied()))
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn json(path: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "q.jsonl");
    assert_eq!(
        call(&["synth", "--count", "3", "--out", &out]),
        2,
        "missing seed"
    );
    assert_eq!(call(&["frobnicate"]), 2);
    assert_eq!(
        call(&[
            "--config",
            &config(),
            "--concurrency",
            "0",
            "synth",
            "--count",
            "1",
            "--out",
            &out
        ]),
        2
    );
    assert_eq!(
        call(&[
            "--config",
            &config(),
            "search",
            "--queries",
            &out,
            "--out",
            &out,
            "--M",
            "0"
        ]),
        2
    );
}

#[test]
fn data_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = p(dir.path(), "nope.jsonl");
    let out = p(dir.path(), "out.json");
    assert_eq!(
        call(&[
            "--config",
            &config(),
            "eval",
            "--queries",
            &missing,
            "--predictions",
            &missing,
            "--out",
            &out
        ]),
        1
    );
    let bad = p(dir.path(), "bad.jsonl");
    fs::write(&bad, "{not json\n").unwrap();
    assert_eq!(
        call(&["--config", &config(), "stats", "--dataset", &bad]),
        1
    );
}

#[test]
fn eval_fixture_scores() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "eval.json");
    let csv = p(dir.path(), "eval.csv");
    let code = call(&[
        "--seed",
        "1",
        "eval",
        "--queries",
        &fixture("eval_queries.jsonl"),
        "--predictions",
        &fixture("eval_predictions.jsonl"),
        "--out",
        &out,
        "--csv",
        &csv,
    ]);
    assert_eq!(code, 0);
    let r = json(&out);
    assert!((r["avg_accuracy"].as_f64().unwrap() - 0.75).abs() < 1e-12);
    assert!((r["f1_args"].as_f64().unwrap() - 0.875).abs() < 1e-12);
    assert!(fs::read_to_string(&csv)
        .unwrap()
        .starts_with("metric,value,n"));
}

#[test]
fn sweep_writes_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "sweep.csv");
    assert_eq!(
        call(&[
            "--config",
            &config(),
            "sweep",
            "--episodes",
            "20",
            "--out",
            &out
        ]),
        0
    );
    let rows = read_sweep_csv(Path::new(&out)).unwrap();
    assert_eq!(rows.len(), 10);
    assert!(rows
        .iter()
        .all(|r| r.ci_low <= r.success && r.success <= r.ci_high));
}

#[test]
fn pipeline_outputs_feed_their_consumers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config();
    let base = ["--config", cfg.as_str()];
    let with = |args: &[&str]| call(&[&base[..], args].concat());

    let queries = p(d, "queries.jsonl");
    assert_eq!(with(&["synth", "--count", "6", "--out", &queries]), 0);
    assert_eq!(load_queries(Path::new(&queries)).unwrap().len(), 6);

    let (mu, mm) = (p(d, "masked.json"), p(d, "map.json"));
    assert_eq!(
        with(&[
            "mask",
            "--universe",
            &fixture("universe.json"),
            "--out-universe",
            &mu,
            "--out-map",
            &mm
        ]),
        0
    );
    assert_eq!(json(&mu).as_array().unwrap().len(), 3);

    let (rollouts, masked) = (p(d, "rollouts.jsonl"), p(d, "masked.jsonl"));
    assert_eq!(
        with(&[
            "rollout",
            "--queries",
            &queries,
            "--out",
            &rollouts,
            "--out-queries",
            &masked
        ]),
        0
    );

    let prm = p(d, "prm.jsonl");
    assert_eq!(
        with(&[
            "annotate",
            "--queries",
            &masked,
            "--rollouts",
            &rollouts,
            "--out",
            &prm
        ]),
        0
    );
    assert_eq!(read_prm_dataset(Path::new(&prm)).unwrap().len(), 6 * 4);

    let stats = p(d, "stats.json");
    assert_eq!(with(&["stats", "--dataset", &prm, "--out", &stats]), 0);
    assert_eq!(json(&stats)["traj_total"], 24);

    let rm = p(d, "rm.json");
    assert_eq!(
        with(&[
            "rm-eval",
            "--queries",
            &masked,
            "--dataset",
            &prm,
            "--out",
            &rm
        ]),
        0
    );
    assert!(json(&rm)["loss"].as_f64().unwrap().is_finite());

    let preds = p(d, "preds.jsonl");
    assert_eq!(with(&["search", "--queries", &queries, "--out", &preds]), 0);
    assert!(Path::new(&format!("{preds}.traces.jsonl")).exists());
    assert_eq!(read_predictions(Path::new(&preds)).unwrap().len(), 6);

    let report = p(d, "eval.json");
    assert_eq!(
        with(&[
            "eval",
            "--queries",
            &queries,
            "--predictions",
            &preds,
            "--out",
            &report
        ]),
        0
    );
    assert!(json(&report)["missing"].as_array().unwrap().is_empty());
}

#[test]
fn search_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config();
    let queries = p(d, "q.jsonl");
    assert_eq!(
        call(&["--config", &cfg, "synth", "--count", "5", "--out", &queries]),
        0
    );
    let outs: Vec<String> = ["a.jsonl", "b.jsonl"]
        .iter()
        .map(|name| {
            let out = p(d, name);
            let code = call(&[
                "--config",
                &cfg,
                "--concurrency",
                "3",
                "search",
                "--queries",
                &queries,
                "--out",
                &out,
                "--no-traces",
            ]);
            assert_eq!(code, 0);
            fs::read_to_string(out).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
}
