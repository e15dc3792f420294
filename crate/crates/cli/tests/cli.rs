use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn scratch(name: &str, body: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hyperreg-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperreg")).args(args).output().unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

// complete bipartite graph on 2+2 vertices
const K22: &str = "chain parts=2,2 k=2 closed\n1:0\n1:1\n2:0\n2:1\n1:0 2:0\n1:0 2:1\n1:1 2:0\n1:1 2:1\n";

#[test]
fn closure_adds_lower_edges() {
    let p = scratch("open.txt", "chain parts=2,2 k=2\n1:0 2:1\n");
    let out = run(&["closure", p.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text, "chain parts=2,2 k=2 closed\n1:0\n1:0 2:1\n2:1\n");
}

#[test]
fn complete_host_counts_every_map() {
    let host = scratch("k22.txt", K22);
    let tpl = scratch("edge.txt", "chain parts=1,1 k=2 closed\n1:0\n2:0\n1:0 2:0\n");
    let out = run(&["count-hom", tpl.to_str().unwrap(), host.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["pass"], Value::Bool(true));
    assert!(v["report"].to_string().contains('4'), "{v}");
}

#[test]
fn oct_of_complete_chain_is_zero() {
    let host = scratch("k22b.txt", K22);
    let out = run(&["oct", host.to_str().unwrap(), "--index", "1,2"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["report"]["oct"].as_f64(), Some(0.0));
}

#[test]
fn corners_report_passes_and_missing_pattern_exits_one() {
    let grid = scratch("grid.json", r#"{"dim":2,"n":4,"points":[[1,1],[2,1],[1,2],[3,4]]}"#);
    let out = run(&["corners", grid.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["pass"], Value::Bool(true));

    let lonely = scratch("one.json", r#"{"dim":2,"n":4,"points":[[2,2]]}"#);
    let out = run(&["pattern", lonely.to_str().unwrap(), "--points", "0 0;1 0;0 1"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["pass"], Value::Bool(false));
}

#[test]
fn bad_input_exits_two() {
    let out = run(&["closure", "/nonexistent/chain.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let p = scratch("bad.txt", "chain parts=2,2 k=2\n1:5 2:0\n");
    assert_eq!(run(&["density", p.to_str().unwrap()]).status.code(), Some(2));

    let p = scratch("k22c.txt", K22);
    assert_eq!(run(&["density", p.to_str().unwrap(), "--epsilon", "2"]).status.code(), Some(2));
}
