use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use edge_influence::graph::Graph;
use edge_influence::report::{sha256_file, Manifest, Status};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edge-influence"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn cli")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {text}"))
}

fn csv_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

fn check_manifest(dir: &Path) -> Manifest {
    let m = Manifest::load(dir).unwrap();
    assert_eq!(m.status, Status::Ok);
    for a in &m.artifacts {
        assert_eq!(sha256_file(&dir.join(&a.path)).unwrap().0, a.sha256, "{}", a.path);
    }
    m
}

fn setup(dir: &Path) {
    ok(dir, &["gen", "--kind", "barbell", "--clique", "5", "--bridge", "1", "--out", "g.json"]);
    ok(
        dir,
        &["train", "--graph", "g.json", "--layers", "2", "--hidden", "8", "--epochs", "200", "--lr", "0.1", "--out", "m"],
    );
}

#[test]
fn gen_writes_a_valid_bundle() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--kind", "barbell", "--clique", "5", "--bridge", "1", "--out", "g.json"]);
    let g = Graph::load(dir.path().join("g.json")).unwrap();
    assert_eq!(g.num_nodes(), 10);
    assert_eq!(g.num_edges(), 21);
    ok(dir.path(), &["gen", "--kind", "sbm", "--sizes", "4,4", "--seed", "3", "--out", "s/sbm.json"]);
    assert_eq!(Graph::load(dir.path().join("s/sbm.json")).unwrap().num_nodes(), 8);
}

#[test]
fn usage_and_input_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--kind", "barbell", "--out", "g.json"]);

    let out = run(d, &["influence", "--graph", "g.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");

    let out = run(d, &["train", "--graph", "g.json", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(d, &["train", "--graph", "nope.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"], "missing-file");

    fs::write(d.join("bad.json"), "{\"num_nodes\": 3}").unwrap();
    let out = run(d, &["train", "--graph", "bad.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(error_json(&out)["error"], "schema");
    assert_eq!(Manifest::load(&d.join("o")).unwrap().status, Status::Failed);

    assert!(run(d, &["--help"]).status.success());
}

#[test]
fn pipeline_writes_reports_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let m = check_manifest(&d.join("m"));
    assert_eq!(m.artifacts.len(), 2);
    assert_eq!(csv_rows(&d.join("m/history.csv")), 201);

    let scan = ["influence", "--graph", "g.json", "--model", "m/model.json", "--sample", "3"];
    ok(d, &[&scan[..], &["--out", "i1"]].concat());
    ok(d, &[&scan[..], &["--out", "i2", "--workers", "1"]].concat());
    assert_eq!(check_manifest(&d.join("i1")).artifacts, check_manifest(&d.join("i2")).artifacts);
    assert_eq!(csv_rows(&d.join("i1/influence.csv")), 6 * 3);

    ok(
        d,
        &[
            "verify", "--graph", "g.json", "--model", "m/model.json", "--sample", "2", "--pbrf-steps", "20",
            "--epochs", "30", "--lr", "0.1", "--out", "v",
        ],
    );
    check_manifest(&d.join("v"));
    assert_eq!(csv_rows(&d.join("v/scatter.csv")), 4 * 3 * 2);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("v/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["entries"].as_array().unwrap().len(), 6);

    ok(d, &["attack", "--graph", "g.json", "--model", "m/model.json", "--sample", "5", "--budget", "3", "--out", "a"]);
    assert_eq!(csv_rows(&d.join("a/plan.csv")), 3);
    assert!(fs::read_to_string(d.join("a/plan.csv")).unwrap().starts_with("rank,u,v,kind,total\n"));

    fs::write(d.join("edits.csv"), "u,v,kind\n4,5,delete\n0,9,insert\n").unwrap();
    ok(d, &["score-edits", "--graph", "g.json", "--model", "m/model.json", "--edits", "edits.csv", "--out", "s"]);
    assert_eq!(csv_rows(&d.join("s/influence.csv")), 6);
    assert_eq!(csv_rows(&d.join("s/summary.csv")), 3);

    fs::write(d.join("bad.csv"), "u,v,kind\n4,5,delete\n4,5,insert\n").unwrap();
    let out = run(d, &["score-edits", "--graph", "g.json", "--model", "m/model.json", "--edits", "bad.csv", "--out", "s2"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("row 2"));

    ok(d, &["homophily", "--graph", "g.json", "--model", "m/model.json", "--sample", "4", "--metric", "val-loss", "--out", "h"]);
    let text = fs::read_to_string(d.join("h/homophily.csv")).unwrap();
    assert!(text.starts_with("kind,class,metric,mean,count\n"));
}

#[test]
fn empty_edit_list_gives_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    fs::write(d.join("none.csv"), "u,v,kind\n").unwrap();
    ok(d, &["influence", "--graph", "g.json", "--model", "m/model.json", "--edits", "none.csv", "--out", "e"]);
    assert_eq!(fs::read_to_string(d.join("e/influence.csv")).unwrap(), "u,v,kind,metric,param_shift,msg_prop,total\n");
    assert_eq!(check_manifest(&d.join("e")).artifacts.len(), 1);
}
