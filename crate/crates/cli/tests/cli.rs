use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn reassign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reassign"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(out: Output) -> Output {
    assert_eq!(
        code(&out),
        0,
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A gdb-style backtrace whose function names depend on the class, so the
/// two populations are separable.
fn backtrace(class: &str, i: usize) -> String {
    let len = 4 + i % 5;
    let mut text = format!("Crash in the file manager, report {i}.\n\nBacktrace:\n");
    for k in 0..len {
        let name = if (i + k).is_multiple_of(4) {
            format!("g_main_loop_{}", k % 3)
        } else {
            format!("{class}_handler_{}", (i * 7 + k * 3) % 8)
        };
        text.push_str(&format!("#{k}  0x0804{k:04x} in {name} () from /usr/lib/lib{class}.so\n"));
    }
    text
}

fn write_reports(path: &Path, n_per_class: usize) {
    let mut lines = String::new();
    for (class, label) in [("nautilus", true), ("gedit", false)] {
        for i in 0..n_per_class {
            let report = json!({
                "id": format!("{class}-{i}"),
                "text": backtrace(class, i),
                "labels": {"component": label},
            });
            lines.push_str(&report.to_string());
            lines.push('\n');
        }
    }
    lines.push_str(&json!({"id": "prose-only", "text": "It just crashed.", "labels": {}}).to_string());
    lines.push('\n');
    fs::write(path, lines).unwrap();
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    write_reports(Path::new(&p("reports.jsonl")), 60);

    ok(reassign(&["extract", "--input", &p("reports.jsonl"), "--output", &p("traces.jsonl"), "--dialect", "gnome"]));
    let traces = read_jsonl(Path::new(&p("traces.jsonl")));
    assert_eq!(traces.len(), 120);
    assert_eq!(traces[0]["frames"][1], "nautilus_handler_3");

    let data = ["--traces", &p("traces.jsonl"), "--out", &p("out")];
    let mut train = vec!["train", "--states", "2,3", "--restarts", "1", "--max-iters", "20"];
    train.extend_from_slice(&data);
    ok(reassign(&train));
    for name in ["R-N2.json", "R-N3.json", "NR-N2.json", "NR-N3.json"] {
        assert!(dir.path().join("out/models/component").join(name).is_file(), "{name}");
    }
    assert!(dir.path().join("out/splits/component.json").is_file());

    let mut combine = vec!["combine"];
    combine.extend_from_slice(&data);
    ok(reassign(&combine));
    let ensemble: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/ensembles/component.json")).unwrap()).unwrap();
    assert_eq!(ensemble["method"], "wpibc");
    assert!(!ensemble["rules"].as_array().unwrap().is_empty());

    let mut evaluate = vec!["evaluate"];
    evaluate.extend_from_slice(&data);
    ok(reassign(&evaluate));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/report/report.json")).unwrap()).unwrap();
    let field = &report["fields"][0];
    assert_eq!(field["field"], "component");
    assert!(field["auc"].as_f64().unwrap() > 0.8, "{field}");
    assert!(dir.path().join("out/report/summary.csv").is_file());
    assert!(dir.path().join("out/report/roc/component.csv").is_file());

    let predict = [
        "predict", "--input", &p("reports.jsonl"), "--out", &p("out"), "--field", "component",
        "--dialect", "gnome",
    ];
    let predictions_path = p("predictions.jsonl");
    let mut to_file = predict.to_vec();
    to_file.extend_from_slice(&["--output", &predictions_path]);
    ok(reassign(&to_file));
    let predictions = read_jsonl(Path::new(&predictions_path));
    assert_eq!(predictions.len(), 121);
    let last = predictions.last().unwrap();
    assert_eq!(last["id"], "prose-only");
    assert!(last["decision"].is_null());
    assert_eq!(last["reason"], "no-stack-trace");
    let correct = predictions[..120]
        .iter()
        .filter(|v| v["decision"].as_bool() == Some(v["id"].as_str().unwrap().starts_with("nautilus")))
        .count();
    assert!(correct >= 96, "{correct} of 120 correct");

    // Stdout output matches the file, and reruns are identical.
    let stdout = ok(reassign(&predict)).stdout;
    assert_eq!(String::from_utf8(stdout).unwrap(), fs::read_to_string(&predictions_path).unwrap());
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&reassign(&["--help"])), 0);
    assert_eq!(code(&reassign(&["train", "--help"])), 0);
    assert_eq!(code(&reassign(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&reassign(&[])), 1);
    assert_eq!(code(&reassign(&["extract", "--input", "x.jsonl"])), 1);
    assert_eq!(code(&reassign(&["extract", "--input", "a", "--output", "b", "--dialect", "cobol"])), 1);
    assert_eq!(code(&reassign(&["train", "--traces", "t", "--out", "o", "--states", "5..1:1"])), 1);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.jsonl");
    fs::write(&input, "{\"id\": \"1\", \"text\": \"\"}\n{not json\n").unwrap();
    let out = reassign(&[
        "extract",
        "--input",
        input.to_str().unwrap(),
        "--output",
        dir.path().join("t.jsonl").to_str().unwrap(),
        "--dialect",
        "eclipse",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.jsonl:2:"), "{out:?}");

    // Too few traces in each class to split.
    let traces = dir.path().join("few.jsonl");
    write_reports(&dir.path().join("few_reports.jsonl"), 3);
    ok(reassign(&[
        "extract",
        "--input",
        dir.path().join("few_reports.jsonl").to_str().unwrap(),
        "--output",
        traces.to_str().unwrap(),
        "--dialect",
        "gnome",
    ]));
    let out = reassign(&["train", "--traces", traces.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn io_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = reassign(&[
        "extract",
        "--input",
        dir.path().join("missing.jsonl").to_str().unwrap(),
        "--output",
        dir.path().join("t.jsonl").to_str().unwrap(),
        "--dialect",
        "gnome",
    ]);
    assert_eq!(code(&out), 3);

    let out = reassign(&[
        "predict",
        "--input",
        dir.path().join("missing.jsonl").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--field",
        "component",
        "--dialect",
        "gnome",
    ]);
    assert_eq!(code(&out), 3);
}
