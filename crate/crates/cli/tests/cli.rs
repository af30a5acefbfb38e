use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn demo_forge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_demo-forge"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("DEMO_FORGE_BACKEND")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path) {
    let o = demo_forge(dir, &["synth", "--out", "data", "--train", "120", "--test", "15"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn validate_corpus_accepts_good_and_cites_bad_line() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let o = demo_forge(dir.path(), &["validate-corpus", "data/train.jsonl"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("120 records ok"));
    let o = demo_forge(dir.path(), &["validate-corpus", "--demonstrations", "data/seed_pool.jsonl"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let text = fs::read_to_string(dir.path().join("data/train.jsonl")).unwrap();
    let mut lines: Vec<&str> = text.lines().take(10).collect();
    lines[6] = "{\"id\": \"broken\", \"question\": ";
    fs::write(dir.path().join("bad.jsonl"), lines.join("\n") + "\n").unwrap();
    let o = demo_forge(dir.path(), &["validate-corpus", "bad.jsonl"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.jsonl:7"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&demo_forge(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&demo_forge(dir.path(), &["--help"])), 0);
    let o = demo_forge(dir.path(), &["--set", "nonsense=1", "knn-rank", "--run", "r"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    fs::write(dir.path().join("c.toml"), "min_usez = 3\n").unwrap();
    let o = demo_forge(dir.path(), &["--config", "c.toml", "refine", "--run", "r"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("min_usez"));
}

#[test]
fn missing_mock_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let o = demo_forge(
        dir.path(),
        &[
            "harvest", "--corpus", "data/train.jsonl", "--seed-pool", "data/seed_pool.jsonl", "--subset", "10",
            "--out", "run",
        ],
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let o = demo_forge(
        d,
        &[
            "--parallel", "4", "--mock-config", "data/harvest_mock.json", "harvest", "--corpus",
            "data/train.jsonl", "--seed-pool", "data/seed_pool.jsonl", "--subset", "120", "--attempts", "20",
            "--out", "run",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("pool_a="));

    let o = demo_forge(
        d,
        &["--mock-config", "data/campaign_mock.json", "refine", "--run", "run", "--min-uses", "15"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("Pool A,Pool B,Pool C,Unsolved Samples\n"));

    let o = demo_forge(
        d,
        &[
            "--mock-config", "data/infer_mock.json", "infer", "--run", "run", "--queries", "data/test.jsonl",
            "--shots", "6", "--attempts", "5",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("queries=15"));

    let o = demo_forge(d, &["knn-rank", "--run", "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = demo_forge(d, &["stats", "--run", "run", "--out", "stats"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    for f in [
        "run/config.json",
        "run/attempts.jsonl",
        "run/pool_a.jsonl",
        "run/pool_b.jsonl",
        "run/pool_c.jsonl",
        "run/pool_c_merged.jsonl",
        "run/unsolved.jsonl",
        "run/one_shot_results.jsonl",
        "run/results.jsonl",
        "run/knn_ranks.jsonl",
        "stats/difficulty_cdf.csv",
        "stats/shot_hist.csv",
        "stats/pool_table.csv",
        "stats/knn_rank_dist.csv",
        "stats/shots_curve.csv",
    ] {
        assert!(d.join(f).is_file(), "missing {f}");
    }
    let results = fs::read_to_string(d.join("run/results.jsonl")).unwrap();
    assert_eq!(results.lines().count(), 15);
}

#[test]
fn all_backend_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let o = demo_forge(
        dir.path(),
        &[
            "--backend", "http", "--set", "base_url=\"http://127.0.0.1:9\"", "--set", "model=\"m\"", "--set",
            "max_retries=0", "--set", "timeout_secs=2", "harvest", "--corpus", "data/train.jsonl", "--seed-pool",
            "data/seed_pool.jsonl", "--subset", "2", "--attempts", "1", "--out", "run",
        ],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}
