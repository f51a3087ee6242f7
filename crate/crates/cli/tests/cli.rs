use std::path::Path;
use std::process::{Command, Output};

fn omigraph(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_omigraph")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "omigraph {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn printed_defaults_load_back_as_a_config() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&omigraph(&["config", "--print-defaults"]));
    assert!(text.contains("top_k = 32"));
    let path = dir.path().join("defaults.toml");
    std::fs::write(&path, &text).unwrap();
    let cfg = omigraph::config::RunConfig::load(&path).unwrap();
    assert_eq!(cfg, omigraph::config::RunConfig::default());
}

#[test]
fn synthetic_corpus_runs_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let data = p("data");
    omigraph(&["gen-synthetic", "--out", &data, "--events", "20", "--seed", "3"]);
    assert!(Path::new(&data).join("targets.jsonl").exists());

    let ws = p("ws");
    let ingest = omigraph(&[
        "ingest",
        "--workspace",
        &ws,
        "--targets",
        &format!("{data}/targets.jsonl"),
        "--context",
        &format!("{data}/context.jsonl"),
    ]);
    assert!(stdout(&ingest).contains("ingested 20 targets and 80 context items"));

    let cfg = p("small.toml");
    std::fs::write(
        &cfg,
        "encoder_dim = 16\nmodel_dim = 8\nedge_dim = 8\nhidden = [8]\nlearning_rate = 1e-2\nbatch_size = 8\nmax_epochs = 2\n",
    )
    .unwrap();
    let run = stdout(&omigraph(&["run", "--workspace", &ws, "--config", &cfg, "--client", "stub", "--seeds", "1,2"]));
    assert!(run.contains("macro_f1,"), "{run}");

    let cost = stdout(&omigraph(&["cost-report", "--workspace", &ws]));
    assert!(cost.contains("full"), "{cost}");
}

#[test]
fn unknown_label_rule_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_omigraph"))
        .args(["gen-synthetic", "--out", "unused", "--label-rule", "coin"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown label rule"));
}
