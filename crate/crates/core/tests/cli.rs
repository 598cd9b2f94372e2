//! End-to-end checks of the command-line interface: output formats, exit
//! codes and byte-level determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn sample(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../samples").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lazygraph"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_of(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn validate_ok_and_broken() {
    let out = run(&["validate", sample("fig1.json").to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), "ok\n");

    let out = run(&["validate", sample("broken.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("update target not Var"), "message names the rule: {text}");
}

#[test]
fn plan_fig1_uses_one_eight_byte_block() {
    let text = stdout_of(&["plan", sample("fig1.json").to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["block_sizes"], serde_json::json!({ "0": 8 }));
    assert_eq!(v["peak_bytes"], serde_json::json!(32));
    assert_eq!(v["assignment"], serde_json::json!({ "2": 0, "4": 0, "5": 0 }));
    assert_eq!(v["external"], serde_json::json!([0, 1, 3]));
}

#[test]
fn pebble_fig3_frontier_and_budget() {
    let text = stdout_of(&["pebble", sample("fig3.json").to_str().unwrap(), "--frontier"]);
    assert_eq!(text, "(3,6) (2,8)\n");

    let text =
        stdout_of(&["pebble", sample("fig3.json").to_str().unwrap(), "--space-budget", "2"]);
    assert_eq!(text, "8\n");

    let text = stdout_of(&["pebble", sample("fig1.json").to_str().unwrap()]);
    assert_eq!(text, "(2,6)\n");
}

#[test]
fn eval_fig1_with_inputs() {
    let text = stdout_of(&[
        "eval",
        sample("fig1.json").to_str().unwrap(),
        "--inputs",
        sample("fig1_inputs.json").to_str().unwrap(),
    ]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let x5 = v["5"]["data"][0].as_f64().unwrap();
    assert!((x5 - 0.479425538604203).abs() < 1e-12, "sin(0.5), got {x5}");
}

#[test]
fn optimise_adagrad_fuses_and_preserves_results() {
    let dir = std::env::temp_dir().join("lazygraph-cli-test");
    std::fs::create_dir_all(&dir).unwrap();
    let rewritten = dir.join("adagrad-optimised.json");

    let out = run(&[
        "optimise",
        sample("adagrad.json").to_str().unwrap(),
        "--out",
        rewritten.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&rewritten).unwrap();
    assert!(text.contains("fused_adagrad"), "{text}");
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["nodes"].as_array().unwrap().len(), 3, "8 nodes fused down to 3");

    let before = stdout_of(&[
        "eval",
        sample("adagrad.json").to_str().unwrap(),
        "--inputs",
        sample("adagrad_inputs.json").to_str().unwrap(),
    ]);
    let after = stdout_of(&[
        "eval",
        rewritten.to_str().unwrap(),
        "--inputs",
        sample("adagrad_inputs.json").to_str().unwrap(),
    ]);
    let b: serde_json::Value = serde_json::from_str(&before).unwrap();
    let a: serde_json::Value = serde_json::from_str(&after).unwrap();
    let (b, a) = (b["7"]["data"].as_array().unwrap(), a["7"]["data"].as_array().unwrap());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
        assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0));
    }
}

#[test]
fn stats_and_shapes_tables() {
    let text = stdout_of(&["stats", sample("fig1.json").to_str().unwrap()]);
    assert!(text.contains("pool blocks\t1"), "{text}");
    assert!(text.contains("pool bytes\t8"), "{text}");
    assert!(text.contains("peak bytes\t32"), "{text}");
    assert!(text.contains("naive pool bytes\t24"), "{text}");

    let text = stdout_of(&["shapes", sample("fig1.json").to_str().unwrap()]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[5], "5\tsin\t[]\t8");
}

#[test]
fn dot_export() {
    let text = stdout_of(&["dot", sample("counter.json").to_str().unwrap()]);
    assert!(text.starts_with("digraph"));
    assert_eq!(text.matches("style=dashed").count(), 1, "one update edge");
}

#[test]
fn seeded_runs_are_byte_identical() {
    for cmd in [
        vec!["plan", "--seed", "5"],
        vec!["dot", "--seed", "5"],
        vec!["optimise", "--seed", "5"],
        vec!["stats", "--seed", "11"],
    ] {
        let a = stdout_of(&cmd);
        let b = stdout_of(&cmd);
        assert_eq!(a, b, "{cmd:?} must be deterministic");
        assert!(!a.is_empty());
    }
}

#[test]
fn reads_standard_input_with_dash() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_lazygraph"))
        .args(["validate", "-"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let fig1 = std::fs::read(sample("fig1.json")).unwrap();
    use std::io::Write;
    child.stdin.as_mut().unwrap().write_all(&fig1).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), "ok\n");
}

#[test]
fn parse_and_usage_errors_exit_two() {
    let dir = std::env::temp_dir().join("lazygraph-cli-test");
    std::fs::create_dir_all(&dir).unwrap();
    let garbage = dir.join("garbage.json");
    std::fs::write(&garbage, "{ not json").unwrap();
    let out = run(&["validate", garbage.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    let out = run(&["plan"]);
    assert_eq!(out.status.code(), Some(2), "no file and no seed");

    let out = run(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn counter_round_trips_through_eval() {
    // one evaluation of the counter graph: output is initial value + 1
    let text = stdout_of(&["eval", sample("counter.json").to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["2"]["data"][0].as_f64().unwrap(), 1.0);
}
